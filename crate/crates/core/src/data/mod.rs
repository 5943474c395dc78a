//! Synthetic slices, stratified splits and on-disk datasets.
//!
//! Positives hold one (rarely two) soft-edged bright discs; any slice may also
//! hold a ring or a bar as a distractor. Ground-truth masks ride along in
//! [`Sample`] for evaluation and never reach the training API, which takes
//! [`crate::model::LabeledImage`] pairs only.

mod dataset;
mod pgm;
mod scene;

pub use dataset::{
    image_name, manifest_text, mask_name, read_dataset, read_masks, write_dataset, write_masks, Dataset, MaskFile,
};
pub use pgm::{decode_pgm, encode_pgm, read_pgm, write_pgm, PgmEncoding};
pub use scene::Scene;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Label;
use crate::region::PixelSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub image_size: (usize, usize),
    pub background_level: f64,
    pub noise_sigma: f64,
    /// Amplitude of the smooth background undulation.
    pub lung_texture: f64,
    pub nodule_radius_range: (f64, f64),
    pub nodule_contrast_range: (f64, f64),
    /// Chance of a ring or bar distractor, for either class.
    pub decoy_rate: f64,
    /// Chance that a positive holds two nodules.
    pub two_nodule_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            background_level: 0.3,
            noise_sigma: 0.05,
            lung_texture: 0.04,
            nodule_radius_range: (3.0, 9.0),
            nodule_contrast_range: (0.25, 0.6),
            decoy_rate: 0.3,
            two_nodule_rate: 0.01,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let (r_min, r_max) = self.nodule_radius_range;
        let (c_min, c_max) = self.nodule_contrast_range;
        let bad = |m: String| Err(Error::Config(m));
        if h < 8 || w < 8 {
            return bad(format!("image size {h}x{w} is below 8x8"));
        }
        if !(r_min >= 2.0 && r_min <= r_max) {
            return bad(format!("radius range [{r_min}, {r_max}] needs 2 <= r_min <= r_max"));
        }
        if 2.0 * (r_max + 2.0) >= h.min(w) as f64 {
            return bad(format!("radius {r_max} does not fit a {h}x{w} image"));
        }
        if !(c_min > 0.0 && c_min <= c_max) {
            return bad(format!("contrast range [{c_min}, {c_max}] needs 0 < c_min <= c_max"));
        }
        for (name, rate) in [("decoy_rate", self.decoy_rate), ("two_nodule_rate", self.two_nodule_rate)] {
            if !(0.0..=1.0).contains(&rate) {
                return bad(format!("{name} must lie in [0,1], got {rate}"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.lung_texture >= 0.0 && self.background_level.is_finite()) {
            return bad("noise, texture and background must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Independent stream for sample `index`.
    pub fn rng_for(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// `[1, H, W]`, intensities in `[0, 1]`.
    pub image: Tensor,
    pub label: Label,
    /// Evaluation only; empty for negatives.
    pub truth_masks: Vec<PixelSet>,
}

/// Draws one slice. Positives get one nodule, or two at `two_nodule_rate`.
pub fn generate_one(cfg: &SyntheticConfig, id: usize, label: Label) -> Result<Sample> {
    let mut rng = cfg.rng_for(id);
    let mut scene = Scene::background(cfg, &mut rng);
    if label == Label::Nodule {
        let count = if rng.gen_bool(cfg.two_nodule_rate) { 2 } else { 1 };
        for _ in 0..count {
            scene.place_random_nodule(cfg, &mut rng)?;
        }
    }
    if rng.gen_bool(cfg.decoy_rate) {
        scene.place_random_decoy(cfg, &mut rng);
    }
    let (image, truth_masks) = scene.finish(cfg.noise_sigma, &mut rng);
    Ok(Sample { id, image, label, truth_masks })
}

/// `n_pos` positives (ids `0..n_pos`) followed by `n_neg` negatives.
pub fn generate(cfg: &SyntheticConfig, n_pos: usize, n_neg: usize) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..n_pos + n_neg)
        .map(|id| generate_one(cfg, id, if id < n_pos { Label::Nodule } else { Label::NoNodule }))
        .collect()
}

/// Indices into a sample list, per split, ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Split name of every index, for `n` samples.
    pub fn names(&self, n: usize) -> Vec<Option<&'static str>> {
        let mut out = vec![None; n];
        for (name, set) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &i in set {
                out[i] = Some(name);
            }
        }
        out
    }
}

/// Stratified 4:1:1 partition of positions `0..labels.len()`.
pub fn split_indices(labels: &[Label], seed: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Split::default();
    for class in [Label::Nodule, Label::NoNodule] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let n = idx.len();
        if n < 3 {
            return Err(Error::Data(format!("class {class} has {n} samples, a 4:1:1 split needs at least 3")));
        }
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        let n_train = (4 * n + 3) / 6;
        let n_val = ((n + 3) / 6).max(1);
        out.train.extend_from_slice(&idx[..n_train]);
        out.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        out.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Stratified 4:1:1 split of the samples themselves.
pub fn split(samples: Vec<Sample>, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let parts = split_indices(&labels, seed)?;
    let names = parts.names(samples.len());
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (s, name) in samples.into_iter().zip(names) {
        match name {
            Some("train") => train.push(s),
            Some("val") => val.push(s),
            _ => test.push(s),
        }
    }
    Ok((train, val, test))
}
