//! The GAP-headed classifier.
//!
//! The backbone is a stack of stages, each `conv3x3 -> relu -> conv3x3 ->
//! relu -> maxpool2`. A tap attaches a head (`conv3x3 -> relu -> gap`) to the
//! output of a stage; the GAP features of all taps are concatenated and fed to
//! a two-class dense layer. Row 1 of that layer's weight matrix holds the
//! per-unit nodule weights that turn head activations into an activation map
//! (see [`crate::nam`]).

mod train;
mod weights;

pub use train::{
    accuracy, sample_gradients, train, train_with, EpochMetrics, LabeledImage, LearningRates, MomentumSgd, TrainConfig,
    TrainOutcome,
};
pub use weights::{from_bytes, load, save, to_bytes, MAGIC};

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ops, Tape, Tensor, Var};

/// Slice-level class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    NoNodule,
    Nodule,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::NoNodule => 0,
            Label::Nodule => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::NoNodule),
            1 => Some(Label::Nodule),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::NoNodule => "no_nodule",
            Label::Nodule => "nodule",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nodule" | "1" => Ok(Label::Nodule),
            "no_nodule" | "0" => Ok(Label::NoNodule),
            other => Err(Error::Data(format!("unknown label {other:?}"))),
        }
    }
}

/// Network shape and the head learning-rate multiplier.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// `(height, width)` of input images.
    pub input_size: (usize, usize),
    pub stage_channels: Vec<usize>,
    /// Stage indices carrying a Conv+GAP head, strictly increasing.
    pub gap_taps: Vec<usize>,
    /// Units per head (`K`).
    pub head_channels: usize,
    pub num_classes: usize,
    /// Learning-rate factor for heads and the dense layer relative to the backbone.
    pub head_lr_multiplier: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: (64, 64),
            stage_channels: vec![16, 32, 64],
            gap_taps: vec![2],
            head_channels: 32,
            num_classes: 2,
            head_lr_multiplier: 10.0,
        }
    }
}

impl ModelConfig {
    /// Default backbone with heads on the deepest `n` stages (1-, 2- or 3-GAP).
    pub fn with_gap_count(n: usize) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.gap_taps = deepest_taps(cfg.stage_channels.len(), n)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        let stages = self.stage_channels.len();
        if stages == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("stage_channels must be non-empty and positive".into()));
        }
        let factor = 1usize << stages;
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be a positive multiple of {factor} for {stages} pooling stages"
            )));
        }
        if self.gap_taps.is_empty() {
            return Err(Error::Config("at least one GAP tap is required".into()));
        }
        if self.gap_taps.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config(format!("gap_taps {:?} must be strictly increasing", self.gap_taps)));
        }
        if let Some(&bad) = self.gap_taps.iter().find(|&&t| t >= stages) {
            return Err(Error::Config(format!("gap tap {bad} is not a stage index (have {stages} stages)")));
        }
        if self.head_channels == 0 {
            return Err(Error::Config("head_channels must be positive".into()));
        }
        if self.num_classes != 2 {
            return Err(Error::Config(format!("num_classes must be 2, got {}", self.num_classes)));
        }
        if !(self.head_lr_multiplier.is_finite() && self.head_lr_multiplier >= 0.0) {
            return Err(Error::Config("head_lr_multiplier must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Length of the concatenated GAP feature vector.
    pub fn feature_len(&self) -> usize {
        self.gap_taps.len() * self.head_channels
    }

    /// Spatial size `(h, w)` of the activation maps at tap `t` (an index into `gap_taps`).
    pub fn tap_size(&self, t: usize) -> (usize, usize) {
        let shift = self.gap_taps[t] + 1;
        (self.input_size.0 >> shift, self.input_size.1 >> shift)
    }
}

/// Tap indices for the deepest `n` of `stages` stages.
pub fn deepest_taps(stages: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > stages {
        return Err(Error::Config(format!("cannot place {n} GAP heads on {stages} stages")));
    }
    Ok((stages - n..stages).collect())
}

/// Convolution weights `[C_out, C_in, 3, 3]` and bias `[C_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn init(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (c_in * 9) as f64).sqrt();
        Self {
            kernel: Tensor::from_fn(&[c_out, c_in, 3, 3], |_| rng.gen_range(-bound..bound)),
            bias: Tensor::zeros(&[c_out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub first: ConvLayer,
    pub second: ConvLayer,
}

/// Which learning rate a parameter trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub stages: Vec<Stage>,
    /// One head per tap, in `gap_taps` order.
    pub heads: Vec<ConvLayer>,
    /// `[2, feature_len]`; row 1 holds the nodule weights.
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
}

/// Output of [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Tensor,
    /// Post-ReLU head maps `[K, h_t, w_t]`, one per tap.
    pub tap_activations: Vec<Tensor>,
}

/// Tape handles produced by [`Model::record`].
#[derive(Debug)]
pub struct Recorded {
    /// Parameter leaves in declaration order (see [`Model::params`]).
    pub params: Vec<Var>,
    pub image: Var,
    pub taps: Vec<Var>,
    pub logits: Var,
}

/// Result of [`Model::classify`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Classification {
    pub label: Label,
    /// Softmax probability of the nodule class.
    pub nodule_probability: f64,
}

impl Classification {
    /// Argmax of the two logits; equal logits resolve to no nodule.
    pub fn from_logits(logits: &Tensor) -> Self {
        let p = ops::softmax(logits);
        let label = if logits.data()[1] > logits.data()[0] { Label::Nodule } else { Label::NoNodule };
        Self { label, nodule_probability: p[1] }
    }
}

impl Model {
    /// Deterministic fan-in-scaled uniform initialization.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(config.stage_channels.len());
        let mut c_in = 1;
        for &c in &config.stage_channels {
            let first = ConvLayer::init(c_in, c, &mut rng);
            let second = ConvLayer::init(c, c, &mut rng);
            stages.push(Stage { first, second });
            c_in = c;
        }
        let heads = config
            .gap_taps
            .iter()
            .map(|&t| ConvLayer::init(config.stage_channels[t], config.head_channels, &mut rng))
            .collect();
        let features = config.feature_len();
        let bound = (6.0 / features as f64).sqrt();
        let fc_weight = Tensor::from_fn(&[config.num_classes, features], |_| rng.gen_range(-bound..bound));
        let fc_bias = Tensor::zeros(&[config.num_classes]);
        Ok(Self { config, stages, heads, fc_weight, fc_bias })
    }

    /// Model with every parameter zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut m = Self::build(config, 0)?;
        for p in m.params_mut() {
            p.data_mut().fill(0.0);
        }
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameters in declaration order: per stage (first kernel, first bias,
    /// second kernel, second bias), per head (kernel, bias), dense weight, dense bias.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for s in &self.stages {
            out.extend([&s.first.kernel, &s.first.bias, &s.second.kernel, &s.second.bias]);
        }
        for h in &self.heads {
            out.extend([&h.kernel, &h.bias]);
        }
        out.extend([&self.fc_weight, &self.fc_bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for s in &mut self.stages {
            out.extend([&mut s.first.kernel, &mut s.first.bias, &mut s.second.kernel, &mut s.second.bias]);
        }
        for h in &mut self.heads {
            out.extend([&mut h.kernel, &mut h.bias]);
        }
        out.extend([&mut self.fc_weight, &mut self.fc_bias]);
        out
    }

    /// Group of each parameter, aligned with [`params`](Self::params).
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let backbone = 4 * self.stages.len();
        let head = 2 * self.heads.len() + 2;
        std::iter::repeat_n(ParamGroup::Backbone, backbone)
            .chain(std::iter::repeat_n(ParamGroup::Head, head))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// Slice of dense row 1 that weights tap `t`'s units.
    pub fn nodule_weights(&self, t: usize) -> &[f64] {
        let k = self.config.head_channels;
        let row = &self.fc_weight.data()[self.config.feature_len()..];
        &row[t * k..(t + 1) * k]
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (h, w) = self.config.input_size;
        if image.shape() != [1, h, w] {
            return Err(Error::Geometry(format!("expected image [1, {h}, {w}], got {:?}", image.shape())));
        }
        Ok(())
    }

    /// Records the full forward computation on `tape` with every parameter as a leaf.
    pub fn record(&self, tape: &mut Tape, image: &Tensor) -> Result<Recorded> {
        self.check_image(image)?;
        let params: Vec<Var> = self.params().into_iter().map(|p| tape.leaf(p.clone())).collect();
        let image_var = tape.leaf(image.clone());
        let last_stage = *self.config.gap_taps.last().expect("validated non-empty");
        let head_base = 4 * self.stages.len();

        let mut x = image_var;
        let mut taps = Vec::with_capacity(self.heads.len());
        let mut features = Vec::with_capacity(self.heads.len());
        for s in 0..=last_stage {
            let p = &params[4 * s..4 * s + 4];
            x = tape.conv2d(x, p[0], p[1], 1, 1)?;
            x = tape.relu(x)?;
            x = tape.conv2d(x, p[2], p[3], 1, 1)?;
            x = tape.relu(x)?;
            x = tape.maxpool2(x)?;
            if let Some(t) = self.config.gap_taps.iter().position(|&tap| tap == s) {
                let (k, b) = (params[head_base + 2 * t], params[head_base + 2 * t + 1]);
                let a = tape.conv2d(x, k, b, 1, 1)?;
                let a = tape.relu(a)?;
                features.push(tape.gap(a)?);
                taps.push(a);
            }
        }
        let f = tape.concat(&features)?;
        let n = params.len();
        let logits = tape.fc(f, params[n - 2], params[n - 1])?;
        Ok(Recorded { params, image: image_var, taps, logits })
    }

    pub fn forward(&self, image: &Tensor) -> Result<ForwardPass> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, image)?;
        Ok(ForwardPass {
            logits: tape.value(rec.logits).clone(),
            tap_activations: rec.taps.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    pub fn classify(&self, image: &Tensor) -> Result<Classification> {
        Ok(Classification::from_logits(&self.forward(image)?.logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(taps: Vec<usize>) -> ModelConfig {
        ModelConfig {
            input_size: (16, 16),
            stage_channels: vec![3, 4, 5],
            gap_taps: taps,
            head_channels: 4,
            ..ModelConfig::default()
        }
    }

    fn image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::build(ModelConfig::default(), 5).unwrap();
        let b = Model::build(ModelConfig::default(), 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Model::build(ModelConfig::default(), 6).unwrap());
    }

    #[test]
    fn dense_layer_width_follows_concatenation() {
        let one = Model::build(ModelConfig::default(), 0).unwrap();
        assert_eq!(one.fc_weight.shape(), &[2, 32]);
        let three = Model::build(ModelConfig::with_gap_count(3).unwrap(), 0).unwrap();
        assert_eq!(three.config().gap_taps, vec![0, 1, 2]);
        assert_eq!(three.fc_weight.shape(), &[2, 96]);
    }

    #[test]
    fn rejects_bad_taps() {
        assert!(matches!(Model::build(small_config(vec![3]), 0), Err(Error::Config(_))));
        assert!(matches!(Model::build(small_config(vec![1, 1]), 0), Err(Error::Config(_))));
        assert!(matches!(Model::build(small_config(vec![2, 0]), 0), Err(Error::Config(_))));
        let mut cfg = small_config(vec![2]);
        cfg.num_classes = 3;
        assert!(matches!(Model::build(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_model_outputs_bias() {
        let mut m = Model::zeros(small_config(vec![1, 2])).unwrap();
        m.fc_bias = Tensor::new(vec![2], vec![0.3, -0.7]).unwrap();
        let out = m.forward(&Tensor::zeros(&[1, 16, 16])).unwrap();
        assert_eq!(out.logits.data(), &[0.3, -0.7]);
    }

    #[test]
    fn nodule_logit_recomposes_from_tap_activations() {
        for taps in [vec![2], vec![1, 2], vec![0, 1, 2]] {
            let m = Model::build(small_config(taps), 9).unwrap();
            let out = m.forward(&image(3, 16, 16)).unwrap();
            let mut s = m.fc_bias.at(&[1]);
            for (t, a) in out.tap_activations.iter().enumerate() {
                let g = ops::gap(a).unwrap();
                s += m.nodule_weights(t).iter().zip(g.data()).map(|(w, v)| w * v).sum::<f64>();
            }
            let l1 = out.logits.at(&[1]);
            assert!((s - l1).abs() <= 1e-9 * (1.0 + l1.abs()), "{s} vs {l1}");
        }
    }

    #[test]
    fn doubling_nodule_row_doubles_score() {
        let mut m = Model::build(small_config(vec![1, 2]), 2).unwrap();
        m.fc_bias = Tensor::new(vec![2], vec![0.1, 0.2]).unwrap();
        let img = image(4, 16, 16);
        let before = m.forward(&img).unwrap().logits.at(&[1]) - 0.2;
        let k = m.config().feature_len();
        for v in &mut m.fc_weight.data_mut()[k..] {
            *v *= 2.0;
        }
        let after = m.forward(&img).unwrap().logits.at(&[1]) - 0.2;
        assert!((after - 2.0 * before).abs() <= 1e-12 * before.abs().max(1.0));
    }

    #[test]
    fn tap_sizes_halve_per_stage() {
        let m = Model::build(ModelConfig::with_gap_count(3).unwrap(), 1).unwrap();
        let out = m.forward(&image(1, 64, 64)).unwrap();
        let shapes: Vec<_> = out.tap_activations.iter().map(|a| a.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![32, 32, 32], vec![32, 16, 16], vec![32, 8, 8]]);
        assert_eq!(m.config().tap_size(0), (32, 32));
    }

    #[test]
    fn classify_tie_goes_to_no_nodule() {
        let t = |a: f64, b: f64| Tensor::new(vec![2], vec![a, b]).unwrap();
        let c = Classification::from_logits(&t(0.0, 10.0));
        assert_eq!(c.label, Label::Nodule);
        assert!(c.nodule_probability > 0.999);
        assert_eq!(Classification::from_logits(&t(10.0, 0.0)).label, Label::NoNodule);
        assert_eq!(Classification::from_logits(&t(1.5, 1.5)).label, Label::NoNodule);
    }

    #[test]
    fn wrong_image_size_is_geometry_error() {
        let m = Model::build(small_config(vec![2]), 0).unwrap();
        assert!(matches!(m.forward(&Tensor::zeros(&[1, 8, 16])), Err(Error::Geometry(_))));
    }
}
