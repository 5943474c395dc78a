//! Multi-phase intensity segmentation by iterated conditional modes.
//!
//! Minimizes the Potts energy
//!
//! ```text
//! E(L) = sum_p (I(p) - mu[L(p)])^2 + beta * #{4-neighbor pairs p~q : L(p) != L(q)}
//! ```
//!
//! Phase means start at the intensity quantiles `(2i + 1) / (2 * phases)` and
//! every pixel starts at its nearest mean. Each iteration is one raster-order
//! ICM sweep followed by re-estimating the means from the new labels (a phase
//! that lost all its pixels keeps its previous mean). Both steps can only
//! lower the energy. Iteration stops after a sweep that changes no label, or
//! after `max_iters` sweeps.

use crate::error::{Error, Result};
use crate::region::{BBox, Pixel, PixelSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct IcmConfig {
    pub phases: usize,
    /// Smoothness weight. `None` derives it from the window:
    /// `min(0.25 * range^2, beta_cap)`.
    pub beta: Option<f64>,
    pub beta_cap: f64,
    pub max_iters: usize,
    /// Pixels added around the scope's bounding box to form the window.
    pub window_margin: usize,
}

impl Default for IcmConfig {
    fn default() -> Self {
        Self { phases: 4, beta: None, beta_cap: 0.01, max_iters: 20, window_margin: 8 }
    }
}

impl IcmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phases < 2 {
            return Err(Error::Config("ICM needs at least 2 phases".into()));
        }
        if let Some(b) = self.beta {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::Config("beta must be finite and non-negative".into()));
            }
        }
        if self.beta_cap.is_nan() || self.beta_cap < 0.0 {
            return Err(Error::Config("beta_cap must be non-negative".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        Ok(())
    }

    fn beta_for(&self, values: &[f64]) -> f64 {
        self.beta.unwrap_or_else(|| {
            let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            (0.25 * (hi - lo).powi(2)).min(self.beta_cap)
        })
    }
}

/// Labels over a rectangular grid plus the trajectory that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct IcmRun {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
    pub means: Vec<f64>,
    pub beta: f64,
    /// Energy of the initial labeling, then after each sweep + mean update.
    pub energies: Vec<f64>,
    pub sweeps: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Initial means at the `(2i + 1) / (2 * phases)` quantiles.
pub fn initial_means(values: &[f64], phases: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    (0..phases).map(|i| quantile(&sorted, (2 * i + 1) as f64 / (2 * phases) as f64)).collect()
}

/// Index of the nearest mean; the lowest index wins ties.
pub fn nearest_mean(v: f64, means: &[f64]) -> usize {
    let mut best = 0;
    for (i, &m) in means.iter().enumerate().skip(1) {
        if (v - m).powi(2) < (v - means[best]).powi(2) {
            best = i;
        }
    }
    best
}

/// Potts energy of a labeling.
pub fn energy(values: &[f64], height: usize, width: usize, labels: &[usize], means: &[f64], beta: f64) -> f64 {
    let mut unary = 0.0;
    for (&v, &l) in values.iter().zip(labels) {
        unary += (v - means[l]).powi(2);
    }
    let mut cuts = 0usize;
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if c + 1 < width && labels[i] != labels[i + 1] {
                cuts += 1;
            }
            if r + 1 < height && labels[i] != labels[i + width] {
                cuts += 1;
            }
        }
    }
    unary + beta * cuts as f64
}

fn reestimate(values: &[f64], labels: &[usize], means: &mut [f64]) {
    let mut sums = vec![0.0; means.len()];
    let mut counts = vec![0usize; means.len()];
    for (&v, &l) in values.iter().zip(labels) {
        sums[l] += v;
        counts[l] += 1;
    }
    for ((m, s), n) in means.iter_mut().zip(sums).zip(counts) {
        if n > 0 {
            *m = s / n as f64;
        }
    }
}

/// ICM on a row-major `height x width` grid of intensities.
pub fn icm_grid(values: &[f64], height: usize, width: usize, phases: usize, beta: f64, max_iters: usize) -> Result<IcmRun> {
    if height < 2 || width < 2 {
        return Err(Error::Geometry(format!("ICM window {height}x{width} is smaller than 2x2")));
    }
    if values.len() != height * width {
        return Err(Error::Dimension(format!("{} values for a {height}x{width} grid", values.len())));
    }
    let mut means = initial_means(values, phases);
    let mut labels: Vec<usize> = values.iter().map(|&v| nearest_mean(v, &means)).collect();
    let mut energies = vec![energy(values, height, width, &labels, &means, beta)];
    let mut sweeps = 0;
    let mut costs = vec![0.0; phases];

    while sweeps < max_iters {
        sweeps += 1;
        let mut changed = false;
        for r in 0..height {
            for c in 0..width {
                let i = r * width + c;
                let v = values[i];
                for (l, cost) in costs.iter_mut().enumerate() {
                    *cost = (v - means[l]).powi(2);
                }
                for q in Pixel::new(r, c).neighbors4(height, width) {
                    let lq = labels[q.row * width + q.col];
                    for (l, cost) in costs.iter_mut().enumerate() {
                        if l != lq {
                            *cost += beta;
                        }
                    }
                }
                let current = labels[i];
                let mut best = current;
                for (l, &cost) in costs.iter().enumerate() {
                    if cost < costs[best] {
                        best = l;
                    }
                }
                if best != current {
                    labels[i] = best;
                    changed = true;
                }
            }
        }
        reestimate(values, &labels, &mut means);
        energies.push(energy(values, height, width, &labels, &means, beta));
        if !changed {
            break;
        }
    }
    Ok(IcmRun { height, width, labels, means, beta, energies, sweeps })
}

/// Phase labels over a window of an image.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseMap {
    /// Window in image coordinates.
    pub window: BBox,
    pub run: IcmRun,
}

impl PhaseMap {
    pub fn label_at(&self, p: Pixel) -> Option<usize> {
        self.window.contains(p).then(|| {
            let (r, c) = (p.row - self.window.ymin, p.col - self.window.xmin);
            self.run.labels[r * self.run.width + c]
        })
    }

    /// Phase with the largest mean among phases that hold pixels.
    pub fn brightest_phase(&self) -> usize {
        let mut present = vec![false; self.run.means.len()];
        for &l in &self.run.labels {
            present[l] = true;
        }
        (0..self.run.means.len())
            .filter(|&l| present[l])
            .max_by(|&a, &b| self.run.means[a].total_cmp(&self.run.means[b]).then(b.cmp(&a)))
            .expect("at least one labeled pixel")
    }

    /// Pixels (image coordinates) carrying `phase`.
    pub fn phase_pixels(&self, phase: usize) -> PixelSet {
        let w = self.run.width;
        self.run
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == phase)
            .map(|(i, _)| Pixel::new(self.window.ymin + i / w, self.window.xmin + i % w))
            .collect()
    }

    /// Label matrix as a tensor, for dumping.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.run.height, self.run.width], |i| self.run.labels[i] as f64)
    }
}

/// ICM over an explicit window of a `[1, H, W]` image.
pub fn icm_window(image: &Tensor, window: BBox, cfg: &IcmConfig) -> Result<PhaseMap> {
    cfg.validate()?;
    let [1, h, w] = *image.shape() else {
        return Err(Error::Dimension(format!("image must be [1,H,W], got {:?}", image.shape())));
    };
    if window.xmax >= w || window.ymax >= h || window.xmin > window.xmax || window.ymin > window.ymax {
        return Err(Error::Geometry(format!("window {window:?} is not inside a {h}x{w} image")));
    }
    let mut values = Vec::with_capacity(window.width() * window.height());
    for r in window.ymin..=window.ymax {
        values.extend_from_slice(&image.data()[r * w + window.xmin..=r * w + window.xmax]);
    }
    let beta = cfg.beta_for(&values);
    let run = icm_grid(&values, window.height(), window.width(), cfg.phases, beta, cfg.max_iters)?;
    Ok(PhaseMap { window, run })
}

/// ICM over the scope's bounding box grown by `window_margin`.
pub fn icm_segment(image: &Tensor, scope: &PixelSet, cfg: &IcmConfig) -> Result<PhaseMap> {
    let [1, h, w] = *image.shape() else {
        return Err(Error::Dimension(format!("image must be [1,H,W], got {:?}", image.shape())));
    };
    let bbox = scope.bbox().ok_or_else(|| Error::Domain("ICM scope is empty".into()))?;
    if !scope.all_within(h, w) {
        return Err(Error::Geometry("scope extends outside the image".into()));
    }
    icm_window(image, bbox.dilate(cfg.window_margin, h, w), cfg)
}
