//! Watershed-by-flooding over an activation map.
//!
//! Flooding runs on the negated map, so catchment basins grow downhill from
//! the map's regional maxima. Every pixel ends up in exactly one basin; there
//! are no watershed lines.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use super::{Scope, ScopeOrigin};
use crate::error::{Error, Result};
use crate::nam::Nam;
use crate::region::{component_of, Pixel, PixelSet};
use crate::tensor::Tensor;

/// Relative threshold applied inside the winning basin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScopeConfig {
    pub tau: f64,
}

impl Default for ScopeConfig {
    fn default() -> Self {
        Self { tau: 0.4 }
    }
}

/// Basin partition of a 2-D map.
#[derive(Clone, Debug)]
pub struct Basins {
    pub height: usize,
    pub width: usize,
    /// Basin id per pixel, row-major.
    pub labels: Vec<usize>,
    /// Per basin: first pixel (row-major) of its maximum plateau and the peak value.
    pub peaks: Vec<(Pixel, f64)>,
}

impl Basins {
    pub fn pixels_of(&self, basin: usize) -> PixelSet {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == basin)
            .map(|(i, _)| Pixel::new(i / self.width, i % self.width))
            .collect()
    }

    /// Basin ids ordered by decreasing peak value, ties by peak position.
    pub fn ranked(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.peaks.len()).collect();
        ids.sort_by(|&a, &b| self.peaks[b].1.total_cmp(&self.peaks[a].1).then(self.peaks[a].0.cmp(&self.peaks[b].0)));
        ids
    }

    pub fn basin_at(&self, p: Pixel) -> usize {
        self.labels[p.row * self.width + p.col]
    }
}

#[derive(PartialEq)]
struct Queued {
    value: f64,
    seq: usize,
    index: usize,
}

impl Eq for Queued {}

impl Ord for Queued {
    // Highest value first, then first-in.
    fn cmp(&self, other: &Self) -> Ordering {
        self.value.total_cmp(&other.value).then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Regional maxima: 4-connected plateaus with no strictly higher neighbor.
/// Returned in row-major order of each plateau's first pixel.
pub fn regional_maxima(values: &[f64], height: usize, width: usize) -> Vec<PixelSet> {
    let mut visited = vec![false; values.len()];
    let mut maxima = Vec::new();
    for start in 0..values.len() {
        if visited[start] {
            continue;
        }
        let level = values[start];
        let mut plateau = Vec::new();
        let mut is_max = true;
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        while let Some(i) = queue.pop_front() {
            plateau.push(Pixel::new(i / width, i % width));
            for q in Pixel::new(i / width, i % width).neighbors4(height, width) {
                let j = q.row * width + q.col;
                if values[j] > level {
                    is_max = false;
                } else if values[j] == level && !visited[j] {
                    visited[j] = true;
                    queue.push_back(j);
                }
            }
        }
        if is_max {
            maxima.push(plateau.into_iter().collect());
        }
    }
    maxima
}

/// Floods `map` (`[H, W]`) from its regional maxima.
pub fn flood(map: &Tensor) -> Result<Basins> {
    let [height, width] = *map.shape() else {
        return Err(Error::Dimension(format!("watershed needs a 2-D map, got {:?}", map.shape())));
    };
    let values = map.data();
    if !map.is_finite() {
        return Err(Error::Numeric("watershed input is not finite".into()));
    }
    let maxima = regional_maxima(values, height, width);
    const UNSET: usize = usize::MAX;
    let mut labels = vec![UNSET; values.len()];
    let mut heap = BinaryHeap::new();
    let mut seq = 0;
    let mut peaks = Vec::with_capacity(maxima.len());
    for (id, plateau) in maxima.iter().enumerate() {
        let first = plateau.as_slice()[0];
        peaks.push((first, values[first.row * width + first.col]));
        for p in plateau.iter() {
            let index = p.row * width + p.col;
            labels[index] = id;
            heap.push(Queued { value: values[index], seq, index });
            seq += 1;
        }
    }
    while let Some(Queued { index, .. }) = heap.pop() {
        let id = labels[index];
        for q in Pixel::new(index / width, index % width).neighbors4(height, width) {
            let j = q.row * width + q.col;
            if labels[j] == UNSET {
                labels[j] = id;
                heap.push(Queued { value: values[j], seq, index: j });
                seq += 1;
            }
        }
    }
    Ok(Basins { height, width, labels, peaks })
}

fn check_not_constant(map: &Tensor) -> Result<()> {
    let first = map.data()[0];
    if map.data().iter().all(|&v| v == first) {
        return Err(Error::DegenerateMap("map is constant; no distinct maximum".into()));
    }
    Ok(())
}

/// Level a basin pixel must reach to stay in the scope.
///
/// For a positive peak this is `tau * peak`. A basin whose peak is not
/// positive uses its own range instead: `floor + tau * (peak - floor)`.
fn threshold(peak: f64, floor: f64, tau: f64) -> f64 {
    if peak > 0.0 {
        tau * peak
    } else {
        floor + tau * (peak - floor)
    }
}

/// Thresholded, connected part of `basin` around its peak.
fn basin_scope(map: &Tensor, basins: &Basins, basin: usize, cfg: ScopeConfig, origin: ScopeOrigin) -> Scope {
    let (peak, peak_value) = basins.peaks[basin];
    let values = map.data();
    let floor = basins
        .labels
        .iter()
        .zip(values)
        .filter(|(&l, _)| l == basin)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let level = threshold(peak_value, floor, cfg.tau);
    let bits: Vec<bool> = basins.labels.iter().zip(values).map(|(&l, &v)| l == basin && v >= level).collect();
    let pixels = component_of(&bits, basins.height, basins.width, peak);
    Scope { pixels, origin, peak, peak_value }
}

/// Scope around the most prominent blob: the basin holding the global maximum,
/// cut at `tau` of the peak and reduced to the component containing the peak.
pub fn extract_scope(nam: &Nam, cfg: ScopeConfig) -> Result<Scope> {
    extract_top_scopes(nam, 1, cfg).map(|mut v| v.remove(0))
}

/// Up to `n` scopes from the basins with the highest peaks, each thresholded
/// against its own peak. Scopes are pairwise disjoint.
pub fn extract_top_scopes(nam: &Nam, n: usize, cfg: ScopeConfig) -> Result<Vec<Scope>> {
    if n == 0 {
        return Err(Error::Domain("at least one scope must be requested".into()));
    }
    check_not_constant(&nam.map)?;
    let basins = flood(&nam.map)?;
    Ok(basins
        .ranked()
        .into_iter()
        .take(n)
        .map(|b| basin_scope(&nam.map, &basins, b, cfg, ScopeOrigin::OneGap))
        .collect())
}

/// Multi-GAP refinement of a baseline scope.
///
/// Picks the highest-peaked basin of `multi` whose peak lies inside
/// `baseline` and reaches the threshold relative to `multi`'s global
/// maximum. The result is clipped to `baseline` and kept connected around the
/// peak. `None` when no basin qualifies.
pub fn refine_scope(multi: &Nam, baseline: &Scope, cfg: ScopeConfig) -> Result<Option<Scope>> {
    check_not_constant(&multi.map)?;
    let basins = flood(&multi.map)?;
    let global = multi.map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let global_floor = multi.map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let prominence = threshold(global, global_floor, cfg.tau);
    for b in basins.ranked() {
        let (peak, value) = basins.peaks[b];
        if value < prominence {
            break;
        }
        if !baseline.pixels.contains(peak) {
            continue;
        }
        let scope = basin_scope(&multi.map, &basins, b, cfg, ScopeOrigin::MultiGap);
        let clipped = scope.pixels.intersection(&baseline.pixels);
        let bits = clipped.to_bitmap(basins.height, basins.width);
        let pixels = component_of(&bits, basins.height, basins.width, peak);
        return Ok(Some(Scope { pixels, ..scope }));
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nam_from(h: usize, w: usize, f: impl Fn(f64, f64) -> f64) -> Nam {
        let map = Tensor::from_fn(&[h, w], |i| f((i / w) as f64, (i % w) as f64));
        Nam { map, raw_maps: vec![], score: 0.0 }
    }

    fn bump(r: f64, c: f64, r0: f64, c0: f64, height: f64, sigma: f64) -> f64 {
        height * (-((r - r0).powi(2) + (c - c0).powi(2)) / (2.0 * sigma * sigma)).exp()
    }

    #[test]
    fn single_bump_scope_holds_peak() {
        let nam = nam_from(32, 32, |r, c| bump(r, c, 12.0, 20.0, 1.0, 3.0));
        let scope = extract_scope(&nam, ScopeConfig::default()).unwrap();
        assert!(scope.pixels.contains(Pixel::new(12, 20)));
        assert!(scope.pixels.is_connected());
        // tau = 0.4 of a Gaussian: radius sigma * sqrt(2 ln 2.5) ~ 4.06
        assert!(scope.pixels.iter().all(|p| nam.at(p) >= 0.4));
        assert!(scope.pixels.len() > 30 && scope.pixels.len() < 70, "{}", scope.pixels.len());
    }

    #[test]
    fn two_bumps_scope_stays_on_taller_one() {
        let nam = nam_from(32, 48, |r, c| bump(r, c, 16.0, 12.0, 5.0, 4.0) + bump(r, c, 16.0, 36.0, 3.0, 4.0));
        let scope = extract_scope(&nam, ScopeConfig::default()).unwrap();
        assert!(scope.pixels.iter().all(|p| p.col < 24), "scope leaks into the second bump's half-plane");
        let top = extract_top_scopes(&nam, 2, ScopeConfig::default()).unwrap();
        assert_eq!(top.len(), 2);
        assert_eq!(top[0], scope);
        assert!(top[1].pixels.contains(Pixel::new(16, 36)));
        assert!(!top[0].pixels.intersects(&top[1].pixels));
    }

    #[test]
    fn single_bump_has_one_top_scope() {
        let nam = nam_from(16, 16, |r, c| bump(r, c, 8.0, 8.0, 2.0, 3.0));
        assert_eq!(extract_top_scopes(&nam, 2, ScopeConfig::default()).unwrap().len(), 1);
    }

    #[test]
    fn constant_map_is_degenerate() {
        let nam = nam_from(8, 8, |_, _| 0.5);
        assert!(matches!(extract_scope(&nam, ScopeConfig::default()), Err(Error::DegenerateMap(_))));
    }

    #[test]
    fn negative_map_still_yields_peak_scope() {
        let nam = nam_from(16, 16, |r, c| bump(r, c, 5.0, 5.0, 1.0, 2.0) - 3.0);
        let scope = extract_scope(&nam, ScopeConfig::default()).unwrap();
        assert!(scope.pixels.contains(Pixel::new(5, 5)));
        assert!(scope.pixels.len() > 1);
    }

    #[test]
    fn flooding_assigns_every_pixel() {
        let nam = nam_from(10, 10, |r, c| ((r * 1.3).sin() + (c * 0.7).cos()) * 2.0);
        let basins = flood(&nam.map).unwrap();
        assert!(basins.labels.iter().all(|&l| l < basins.peaks.len()));
        for (b, (peak, value)) in basins.peaks.iter().enumerate() {
            assert_eq!(basins.basin_at(*peak), b);
            assert!(basins.pixels_of(b).iter().all(|p| nam.at(p) <= *value));
        }
    }

    #[test]
    fn refinement_requires_peak_inside_baseline() {
        let one = nam_from(32, 32, |r, c| bump(r, c, 16.0, 16.0, 1.0, 6.0));
        let baseline = extract_scope(&one, ScopeConfig::default()).unwrap();
        let inside = nam_from(32, 32, |r, c| bump(r, c, 18.0, 15.0, 1.0, 2.0));
        let refined = refine_scope(&inside, &baseline, ScopeConfig::default()).unwrap().unwrap();
        assert_eq!(refined.origin, ScopeOrigin::MultiGap);
        assert!(refined.pixels.is_subset(&baseline.pixels));
        assert!(refined.pixels.contains(Pixel::new(18, 15)));
        let outside = nam_from(32, 32, |r, c| bump(r, c, 2.0, 2.0, 1.0, 2.0));
        assert!(refine_scope(&outside, &baseline, ScopeConfig::default()).unwrap().is_none());
    }
}
