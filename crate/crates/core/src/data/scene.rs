use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::SyntheticConfig;
use crate::error::{Error, Result};
use crate::region::{Pixel, PixelSet};
use crate::tensor::Tensor;

/// A slice under construction: noise-free background plus painted shapes.
///
/// ```
/// use namseg::data::{Scene, SyntheticConfig};
/// use rand::SeedableRng;
///
/// let cfg = SyntheticConfig::default();
/// let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
/// let mut scene = Scene::background(&cfg, &mut rng);
/// let truth = scene.add_nodule((32.0, 32.0), 5.0, 0.4);
/// scene.add_ring((32.0, 50.0), 6.0, 1.5, 0.4);
/// let (image, masks) = scene.finish(cfg.noise_sigma, &mut rng);
/// assert_eq!(image.shape(), &[1, 64, 64]);
/// assert_eq!(masks, vec![truth]);
/// ```
#[derive(Clone, Debug)]
pub struct Scene {
    height: usize,
    width: usize,
    values: Vec<f64>,
    truth: Vec<PixelSet>,
    /// Pixels painted by any shape, nodule or decoy.
    occupied: Vec<bool>,
}

fn ramp(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

impl Scene {
    /// Flat `background_level` plus a few long-wavelength undulations.
    pub fn background(cfg: &SyntheticConfig, rng: &mut impl Rng) -> Self {
        let (h, w) = cfg.image_size;
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                let period = rng.gen_range(24.0..72.0);
                let angle = rng.gen_range(0.0..PI);
                let phase = rng.gen_range(0.0..2.0 * PI);
                let amp = cfg.lung_texture * rng.gen_range(0.5..1.0) / 3.0f64.sqrt();
                (2.0 * PI / period * angle.cos(), 2.0 * PI / period * angle.sin(), phase, amp)
            })
            .collect();
        let values = (0..h * w)
            .map(|i| {
                let (r, c) = ((i / w) as f64, (i % w) as f64);
                cfg.background_level + waves.iter().map(|&(fy, fx, ph, a)| a * (fy * r + fx * c + ph).sin()).sum::<f64>()
            })
            .collect();
        Self { height: h, width: w, values, truth: Vec::new(), occupied: vec![false; h * w] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn truth(&self) -> &[PixelSet] {
        &self.truth
    }

    fn paint(&mut self, shade: impl Fn(f64, f64) -> f64) {
        for i in 0..self.values.len() {
            let s = shade((i / self.width) as f64, (i % self.width) as f64);
            if s > 0.0 {
                self.values[i] += s;
                self.occupied[i] = true;
            }
        }
    }

    /// Soft-edged disc. The truth mask is every pixel centre within `radius`.
    pub fn add_nodule(&mut self, center: (f64, f64), radius: f64, contrast: f64) -> PixelSet {
        let (cy, cx) = center;
        let dist = move |r: f64, c: f64| ((r - cy).powi(2) + (c - cx).powi(2)).sqrt();
        self.paint(|r, c| contrast * ramp(radius + 0.5 - dist(r, c)));
        let w = self.width;
        let mask: PixelSet = (0..self.values.len())
            .filter(|&i| dist((i / w) as f64, (i % w) as f64) <= radius)
            .map(|i| Pixel::new(i / w, i % w))
            .collect();
        self.truth.push(mask.clone());
        mask
    }

    /// Annulus of mean radius `radius`; dark inside, so never a disc.
    pub fn add_ring(&mut self, center: (f64, f64), radius: f64, thickness: f64, contrast: f64) {
        let (cy, cx) = center;
        self.paint(|r, c| {
            let d = ((r - cy).powi(2) + (c - cx).powi(2)).sqrt();
            contrast * ramp(thickness / 2.0 + 0.5 - (d - radius).abs())
        });
    }

    /// Straight bar from `a` to `b` (row, col).
    pub fn add_bar(&mut self, a: (f64, f64), b: (f64, f64), thickness: f64, contrast: f64) {
        let (dy, dx) = (b.0 - a.0, b.1 - a.1);
        let len2 = (dy * dy + dx * dx).max(1e-12);
        self.paint(|r, c| {
            let t = (((r - a.0) * dy + (c - a.1) * dx) / len2).clamp(0.0, 1.0);
            let d = ((r - a.0 - t * dy).powi(2) + (c - a.1 - t * dx).powi(2)).sqrt();
            contrast * ramp(thickness / 2.0 + 0.5 - d)
        });
    }

    fn clear_of_occupied(&self, center: (f64, f64), reach: f64) -> bool {
        (0..self.values.len()).all(|i| {
            !self.occupied[i] || {
                let (r, c) = ((i / self.width) as f64, (i % self.width) as f64);
                ((r - center.0).powi(2) + (c - center.1).powi(2)).sqrt() > reach
            }
        })
    }

    /// Random nodule away from the border and from anything already painted.
    pub fn place_random_nodule(&mut self, cfg: &SyntheticConfig, rng: &mut impl Rng) -> Result<PixelSet> {
        let (r_min, r_max) = cfg.nodule_radius_range;
        let (c_min, c_max) = cfg.nodule_contrast_range;
        for _ in 0..200 {
            let radius = rng.gen_range(r_min..=r_max);
            let contrast = rng.gen_range(c_min..=c_max);
            let margin = radius + 2.0;
            let cy = rng.gen_range(margin..self.height as f64 - 1.0 - margin);
            let cx = rng.gen_range(margin..self.width as f64 - 1.0 - margin);
            if self.clear_of_occupied((cy, cx), radius + 3.0) {
                return Ok(self.add_nodule((cy, cx), radius, contrast));
            }
        }
        Err(Error::Config("could not place a nodule clear of other structures".into()))
    }

    /// Random ring or bar that leaves a gap around every nodule. Gives up
    /// silently when no clear spot turns up, and on frames under 29 px.
    pub fn place_random_decoy(&mut self, cfg: &SyntheticConfig, rng: &mut impl Rng) {
        let (c_min, c_max) = cfg.nodule_contrast_range;
        let (h, w) = (self.height as f64, self.width as f64);
        let side = h.min(w);
        let (ring_max, bar_max) = ((side / 2.0 - 4.5).min(10.0), (side - 6.0).min(30.0));
        if ring_max <= 4.0 || bar_max <= 14.0 {
            return;
        }
        for _ in 0..200 {
            let contrast = rng.gen_range(c_min..=c_max);
            let thickness = rng.gen_range(1.0..2.5);
            let trial = if rng.gen_bool(0.5) {
                let radius = rng.gen_range(4.0..ring_max);
                let m = radius + thickness + 1.0;
                let center = (rng.gen_range(m..h - m), rng.gen_range(m..w - m));
                let mut s = self.clone();
                s.add_ring(center, radius, thickness, contrast);
                s
            } else {
                let len = rng.gen_range(14.0..bar_max);
                let angle = rng.gen_range(0.0..PI);
                let (hy, hx) = (len / 2.0 * angle.sin(), len / 2.0 * angle.cos());
                let (my, mx) = (hy.abs() + 2.0, hx.abs() + 2.0);
                let center = (rng.gen_range(my..h - my), rng.gen_range(mx..w - mx));
                let mut s = self.clone();
                s.add_bar((center.0 - hy, center.1 - hx), (center.0 + hy, center.1 + hx), thickness, contrast);
                s
            };
            if self.decoy_keeps_gap(&trial, 2) {
                *self = trial;
                return;
            }
        }
    }

    /// Whether `trial` painted nothing within `gap` pixels of a nodule.
    fn decoy_keeps_gap(&self, trial: &Scene, gap: usize) -> bool {
        let new: Vec<bool> = trial.occupied.iter().zip(&self.occupied).map(|(&t, &o)| t && !o).collect();
        self.truth.iter().flat_map(|m| m.iter()).all(|p| {
            let (r0, r1) = (p.row.saturating_sub(gap), (p.row + gap).min(self.height - 1));
            let (c0, c1) = (p.col.saturating_sub(gap), (p.col + gap).min(self.width - 1));
            (r0..=r1).all(|r| (c0..=c1).all(|c| !new[r * self.width + c]))
        })
    }

    /// Adds Gaussian noise, clamps to `[0, 1]` and returns the image with
    /// its nodule masks.
    pub fn finish(self, noise_sigma: f64, rng: &mut impl Rng) -> (Tensor, Vec<PixelSet>) {
        let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("finite sigma");
        let data = self.values.iter().map(|v| (v + noise.sample(rng)).clamp(0.0, 1.0)).collect();
        (Tensor::new(vec![1, self.height, self.width], data).expect("scene shape"), self.truth)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nodule_truth_is_the_disc() {
        let cfg = SyntheticConfig { lung_texture: 0.0, ..SyntheticConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut scene = Scene::background(&cfg, &mut rng);
        let m = scene.add_nodule((10.0, 10.0), 2.0, 0.5);
        // 13 lattice points within radius 2
        assert_eq!(m.len(), 13);
        assert!(m.is_connected());
        let (img, _) = scene.finish(0.0, &mut rng);
        assert!((img.at(&[0, 10, 10]) - 0.8).abs() < 1e-12);
        assert!((img.at(&[0, 10, 12]) - 0.55).abs() < 1e-12);
        assert!((img.at(&[0, 0, 0]) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn ring_is_hollow() {
        let cfg = SyntheticConfig { lung_texture: 0.0, ..SyntheticConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut scene = Scene::background(&cfg, &mut rng);
        scene.add_ring((30.0, 30.0), 6.0, 2.0, 0.4);
        assert!(scene.truth().is_empty());
        let (img, _) = scene.finish(0.0, &mut rng);
        assert!((img.at(&[0, 30, 30]) - 0.3).abs() < 1e-12);
        assert!((img.at(&[0, 30, 36]) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn random_decoy_keeps_clear_of_nodule() {
        let cfg = SyntheticConfig { lung_texture: 0.0, ..SyntheticConfig::default() };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut scene = Scene::background(&cfg, &mut rng);
            let truth = scene.place_random_nodule(&cfg, &mut rng).unwrap();
            let before = scene.values.clone();
            scene.place_random_decoy(&cfg, &mut rng);
            for p in truth.iter() {
                let i = p.row * 64 + p.col;
                assert_eq!(before[i], scene.values[i]);
            }
        }
    }
}
