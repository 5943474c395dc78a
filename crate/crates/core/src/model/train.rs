use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Label, Model, ParamGroup};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// An image with its slice-level label and nothing else.
///
/// Training only ever sees this type, so pixel-level ground truth cannot
/// leak into the optimizer.
#[derive(Clone, Copy, Debug)]
pub struct LabeledImage<'a> {
    pub image: &'a Tensor,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay_per_epoch: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Reference protocol for an `n`-GAP model: initial rate 1e-2 / 2e-3 /
    /// 1e-3 for 1 / 2 / 3 heads, decay 0.99 per epoch, batch 30.
    pub fn for_gap_count(n: usize) -> Self {
        let initial_lr = match n {
            1 => 1e-2,
            2 => 2e-3,
            _ => 1e-3,
        };
        Self { initial_lr, lr_decay_per_epoch: 0.99, momentum: 0.9, batch_size: 30, epochs: 30, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config("initial_lr must be positive".into()));
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return Err(Error::Config("lr_decay_per_epoch must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Backbone learning rate used during epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr * self.lr_decay_per_epoch.powi(epoch as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates {
    pub backbone: f64,
    pub head: f64,
}

/// SGD with classical momentum: `v <- m v + g`, `p <- p - lr v`.
#[derive(Clone, Debug)]
pub struct MomentumSgd {
    momentum: f64,
    velocity: Vec<Tensor>,
}

impl MomentumSgd {
    pub fn new(model: &Model, momentum: f64) -> Self {
        let velocity = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { momentum, velocity }
    }

    /// Applies one update. `grads` is aligned with [`Model::params`].
    pub fn step(&mut self, model: &mut Model, grads: &[Tensor], rates: LearningRates) -> Result<()> {
        let groups = model.param_groups();
        let params = model.params_mut();
        if grads.len() != params.len() {
            return Err(Error::Dimension(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (((p, g), v), group) in params.into_iter().zip(grads).zip(&mut self.velocity).zip(groups) {
            let lr = match group {
                ParamGroup::Backbone => rates.backbone,
                ParamGroup::Head => rates.head,
            };
            g.expect_shape(p.shape())?;
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// Loss and per-parameter gradients for one sample.
pub fn sample_gradients(model: &Model, sample: LabeledImage<'_>) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let rec = model.record(&mut tape, sample.image)?;
    let loss = tape.softmax_xent(rec.logits, sample.label.index())?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss).data()[0];
    Ok((value, rec.params.iter().map(|&p| grads.wrt(p)).collect()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot with the best validation accuracy (earliest on ties).
    pub model: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochMetrics>,
}

pub fn accuracy(model: &Model, set: &[LabeledImage<'_>]) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in set {
        if model.classify(s.image)?.label == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Mini-batch training. Returns the best-on-validation snapshot; with an
/// empty validation set the last epoch wins.
pub fn train(
    model: &Model,
    train_set: &[LabeledImage<'_>],
    val_set: &[LabeledImage<'_>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, train_set, val_set, cfg, |_| {})
}

/// [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    model: &Model,
    train_set: &[LabeledImage<'_>],
    val_set: &[LabeledImage<'_>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let has = |l: Label| train_set.iter().any(|s| s.label == l);
    if !has(Label::Nodule) || !has(Label::NoNodule) {
        return Err(Error::Data("training set must contain both classes".into()));
    }

    let mut model = model.clone();
    let mut sgd = MomentumSgd::new(&model, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let multiplier = model.config().head_lr_multiplier;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let rates = LearningRates { backbone: lr, head: lr * multiplier };
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let sample = train_set[i];
                let (loss, grads) = sample_gradients(&model, sample)?;
                loss_sum += loss;
                // loss < ln 2 means the true class has the larger logit
                if loss < std::f64::consts::LN_2 {
                    correct += 1;
                }
                match &mut acc {
                    None => acc = Some(grads),
                    Some(total) => {
                        for (t, g) in total.iter_mut().zip(&grads) {
                            t.add_assign(g)?;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let mean: Vec<Tensor> = acc.expect("non-empty batch").iter().map(|g| g.scale(scale)).collect();
            sgd.step(&mut model, &mean, rates)?;
        }
        if !model.is_finite() {
            return Err(Error::Numeric(format!("parameters diverged during epoch {epoch}")));
        }
        let val_accuracy = accuracy(&model, val_set)?;
        log.push(EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_accuracy,
        });
        on_epoch(log.last().expect("just pushed"));
        let better = match &best {
            None => true,
            Some((b, _, _)) => val_set.is_empty() || val_accuracy > *b,
        };
        if better {
            best = Some((val_accuracy, epoch, model.clone()));
        }
    }

    let (_, best_epoch, model) = best.unwrap_or((0.0, 0, model));
    Ok(TrainOutcome { model, best_epoch, log })
}
