//! Nodule activation maps.
//!
//! For a tap with head activations `a_k(x, y)` and nodule weights `w_k`
//! (the tap's slice of dense row 1), the raw map is
//! `raw(x, y) = sum_k w_k a_k(x, y)`. Because GAP is a mean, the nodule logit
//! decomposes exactly as
//!
//! ```text
//! logit_nodule = bias_nodule + sum_t mean(raw_t)
//! ```
//!
//! The full-resolution map sums each tap's bilinearly upsampled raw map
//! divided by that tap's cell count `h_t * w_t`, which keeps every tap on the
//! same per-cell scale as its contribution to the logit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::region::{Pixel, PixelSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Nam {
    /// `[H, W]` at input resolution.
    pub map: Tensor,
    /// Per-tap `[h_t, w_t]` maps before upsampling.
    pub raw_maps: Vec<Tensor>,
    /// Nodule logit minus its bias.
    pub score: f64,
}

impl Nam {
    /// Assembles a map from per-tap raw maps.
    pub fn from_raw_maps(raw_maps: Vec<Tensor>, height: usize, width: usize) -> Result<Self> {
        let mut map = Tensor::zeros(&[height, width]);
        let mut score = 0.0;
        for raw in &raw_maps {
            let [h, w] = *raw.shape() else {
                return Err(Error::Dimension(format!("raw map must be 2-D, got {:?}", raw.shape())));
            };
            score += raw.mean();
            let up = upsample_bilinear(raw, height, width)?;
            let norm = 1.0 / (h * w) as f64;
            for (m, u) in map.data_mut().iter_mut().zip(up.data()) {
                *m += norm * u;
            }
        }
        if !map.is_finite() || !score.is_finite() {
            return Err(Error::Numeric("activation map is not finite".into()));
        }
        Ok(Self { map, raw_maps, score })
    }

    pub fn height(&self) -> usize {
        self.map.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.map.shape()[1]
    }

    pub fn at(&self, p: Pixel) -> f64 {
        self.map.data()[p.row * self.width() + p.col]
    }

    /// First pixel (row-major) holding the maximum.
    pub fn argmax(&self) -> Pixel {
        let i = self.map.argmax();
        Pixel::new(i / self.width(), i % self.width())
    }

    /// Writes the full-resolution map as a text matrix.
    pub fn dump(&self, path: impl AsRef<Path>) -> Result<()> {
        write_matrix(&self.map, path)
    }
}

/// `sum_k weights[k] * activations[k, .., ..]` for `[K, h, w]` activations.
pub fn raw_map(activations: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let [k, h, w] = *activations.shape() else {
        return Err(Error::Dimension(format!("activations must be [K,h,w], got {:?}", activations.shape())));
    };
    if weights.len() != k {
        return Err(Error::Dimension(format!("{} weights for {k} units", weights.len())));
    }
    let mut out = vec![0.0; h * w];
    for (plane, &wk) in activations.data().chunks_exact(h * w).zip(weights) {
        for (o, &a) in out.iter_mut().zip(plane) {
            *o += wk * a;
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Bilinear resize of a `[h, w]` map with corner-aligned sampling: source
/// corners land exactly on destination corners.
pub fn upsample_bilinear(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [h, w] = *map.shape() else {
        return Err(Error::Dimension(format!("upsample expects a 2-D map, got {:?}", map.shape())));
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::Geometry("upsample target must be non-empty".into()));
    }
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_in == 1 || n_out == 1 {
            return (0, 0, 0.0);
        }
        let s = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (s.floor() as usize).min(n_in - 2);
        (lo, lo + 1, s - lo as f64)
    };
    let src = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, out_h, h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, out_w, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

/// Activation map of `image` under `model`.
pub fn compute_nam(model: &Model, image: &Tensor) -> Result<Nam> {
    if !model.is_finite() {
        return Err(Error::Numeric("model has non-finite parameters".into()));
    }
    let pass = model.forward(image)?;
    let raw_maps = pass
        .tap_activations
        .iter()
        .enumerate()
        .map(|(t, a)| raw_map(a, model.nodule_weights(t)))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = model.config().input_size;
    Nam::from_raw_maps(raw_maps, h, w)
}

/// Copy of `image` (`[1, H, W]`) with the pixels of `mask` set to `fill`.
pub fn fill_mask(image: &Tensor, mask: &PixelSet, fill: f64) -> Result<Tensor> {
    let [1, h, w] = *image.shape() else {
        return Err(Error::Dimension(format!("image must be [1,H,W], got {:?}", image.shape())));
    };
    if !mask.all_within(h, w) {
        return Err(Error::Geometry("mask extends outside the image".into()));
    }
    let mut out = image.clone();
    let data = out.data_mut();
    for p in mask.iter() {
        data[p.row * w + p.col] = fill;
    }
    Ok(out)
}

/// Residual map: the activation map of `image` with `mask` painted over by `fill`.
pub fn compute_rnam(model: &Model, image: &Tensor, mask: &PixelSet, fill: f64) -> Result<Nam> {
    compute_nam(model, &fill_mask(image, mask, fill)?)
}

/// Sum of squared differences of two full-resolution maps over `scope`.
pub fn nam_distance(a: &Nam, b: &Nam, scope: &PixelSet) -> Result<f64> {
    if a.map.shape() != b.map.shape() {
        return Err(Error::Dimension(format!("map shapes differ: {:?} vs {:?}", a.map.shape(), b.map.shape())));
    }
    if scope.is_empty() {
        return Err(Error::Domain("distance over an empty scope".into()));
    }
    if !scope.all_within(a.height(), a.width()) {
        return Err(Error::Geometry("scope extends outside the map".into()));
    }
    Ok(scope
        .iter()
        .map(|p| {
            let d = a.at(p) - b.at(p);
            d * d
        })
        .sum())
}

/// Plain-text matrix: one row per line, space-separated values.
pub fn write_matrix(map: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let [h, w] = *map.shape() else {
        return Err(Error::Dimension(format!("matrix dump needs a 2-D tensor, got {:?}", map.shape())));
    };
    let mut s = String::new();
    for r in 0..h {
        let row = &map.data()[r * w..(r + 1) * w];
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            write!(s, "{v:e}").expect("write to string");
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Tensor> {
    let text = fs::read_to_string(path)?;
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("bad matrix entry {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(Error::Format("ragged matrix rows".into()));
        }
        data.extend(row);
        rows += 1;
    }
    let width = width.ok_or_else(|| Error::Format("empty matrix file".into()))?;
    Tensor::new(vec![rows, width], data).map_err(|e| Error::Format(e.to_string()))
}
