//! From activation map to nodule mask.
//!
//! 1. [`watershed`] picks a screening scope around the map's most prominent blob.
//! 2. [`icm`] splits a window around the scope into intensity phases.
//! 3. [`extract_candidates`] keeps bright-phase components touching the scope.
//! 4. [`select_candidate`] masks each candidate in turn and keeps the one whose
//!    removal changes the activation map the most inside the baseline scope.
//!
//! [`pipeline`] chains these with classification gating and the optional
//! multi-GAP scope refinement.

pub mod icm;
pub mod pipeline;
pub mod watershed;

pub use icm::{icm_segment, icm_window, IcmConfig, IcmRun, PhaseMap};
pub use pipeline::{
    segment_slice, segment_two_nodules, BlobMask, SegmentConfig, SliceOutcome, SliceSegmentation, TwoNoduleOutcome,
};
pub use watershed::{extract_scope, extract_top_scopes, refine_scope, ScopeConfig};

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nam::{compute_rnam, nam_distance, Nam};
use crate::region::{connected_components, BBox, Pixel, PixelSet};
use crate::tensor::Tensor;

/// Which activation map a scope came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScopeOrigin {
    /// Baseline scope from the one-GAP map (C1).
    OneGap,
    /// Refined scope from a multi-GAP map (C_multi).
    MultiGap,
}

impl ScopeOrigin {
    pub fn as_str(self) -> &'static str {
        match self {
            ScopeOrigin::OneGap => "C1",
            ScopeOrigin::MultiGap => "Cmulti",
        }
    }
}

/// Connected pixel region constraining candidate screening.
#[derive(Clone, Debug, PartialEq)]
pub struct Scope {
    pub pixels: PixelSet,
    pub origin: ScopeOrigin,
    /// Peak of the basin the scope was cut from.
    pub peak: Pixel,
    pub peak_value: f64,
}

/// A connected bright region proposed as the nodule.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub pixels: PixelSet,
    pub area: usize,
    pub bbox: BBox,
}

impl Candidate {
    pub fn new(pixels: PixelSet) -> Option<Self> {
        let bbox = pixels.bbox()?;
        Some(Self { area: pixels.len(), bbox, pixels })
    }
}

/// Components of the brightest phase that touch `scope`, at least
/// `min_area` pixels, largest first.
pub fn extract_candidates(phases: &PhaseMap, scope: &PixelSet, min_area: usize) -> Vec<Candidate> {
    let bright = phases.brightest_phase();
    let (h, w) = (phases.run.height, phases.run.width);
    let bits: Vec<bool> = phases.run.labels.iter().map(|&l| l == bright).collect();
    let (dy, dx) = (phases.window.ymin, phases.window.xmin);
    let mut out: Vec<Candidate> = connected_components(&bits, h, w)
        .into_iter()
        .map(|local| local.iter().map(|p| Pixel::new(p.row + dy, p.col + dx)).collect::<PixelSet>())
        .filter(|c| c.len() >= min_area && c.intersects(scope))
        .filter_map(Candidate::new)
        .collect();
    out.sort_by(|a, b| b.area.cmp(&a.area).then(a.pixels.as_slice()[0].cmp(&b.pixels.as_slice()[0])));
    out
}

/// Outcome of fine selection.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub index: usize,
    /// Residual-map distance per candidate; empty when there was only one.
    pub scores: Vec<f64>,
}

/// Orders candidates for the argmax: higher score, then larger area, then
/// smaller bbox xmin, then earlier position.
fn rank(scores: &[f64], candidates: &[Candidate], a: usize, b: usize) -> Ordering {
    scores[a]
        .total_cmp(&scores[b])
        .then(candidates[a].area.cmp(&candidates[b].area))
        .then(candidates[b].bbox.xmin.cmp(&candidates[a].bbox.xmin))
        .then(b.cmp(&a))
}

/// Picks the candidate whose masking most changes the activation map inside
/// `scope`: `argmax_j sum_{p in scope} (nam(p) - rnam_j(p))^2`.
pub fn select_candidate(
    model: &Model,
    image: &Tensor,
    nam: &Nam,
    scope: &PixelSet,
    candidates: &[Candidate],
    fill: f64,
) -> Result<Selection> {
    match candidates.len() {
        0 => return Err(Error::Selection("no candidates to choose from".into())),
        1 => return Ok(Selection { index: 0, scores: Vec::new() }),
        _ => {}
    }
    let scores = candidates
        .iter()
        .map(|c| {
            let residual = compute_rnam(model, image, &c.pixels, fill)?;
            nam_distance(nam, &residual, scope)
        })
        .collect::<Result<Vec<_>>>()?;
    let index = (0..candidates.len()).max_by(|&a, &b| rank(&scores, candidates, a, b)).expect("non-empty");
    Ok(Selection { index, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn disc(r0: usize, c0: usize, radius: f64) -> PixelSet {
        let mut s = Vec::new();
        for r in 0..32 {
            for c in 0..32 {
                let d = ((r as f64 - r0 as f64).powi(2) + (c as f64 - c0 as f64).powi(2)).sqrt();
                if d <= radius {
                    s.push(Pixel::new(r, c));
                }
            }
        }
        s.into_iter().collect()
    }

    fn image_with(blobs: &[&PixelSet]) -> Tensor {
        let mut img = Tensor::full(&[1, 32, 32], 0.2);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v += 0.01 * ((i * 7919) % 13) as f64 / 13.0;
        }
        for b in blobs {
            for p in b.iter() {
                img.data_mut()[p.row * 32 + p.col] = 0.9;
            }
        }
        img
    }

    fn full_window(image: &Tensor) -> PhaseMap {
        let cfg = IcmConfig { beta: Some(0.001), ..IcmConfig::default() };
        icm_window(image, BBox { xmin: 0, ymin: 0, xmax: 31, ymax: 31 }, &cfg).unwrap()
    }

    #[test]
    fn single_blob_inside_scope_is_one_candidate() {
        let blob = disc(10, 10, 3.0);
        let pm = full_window(&image_with(&[&blob]));
        let scope = disc(10, 10, 5.0);
        let cands = extract_candidates(&pm, &scope, 4);
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].pixels, blob);
        assert_eq!(cands[0].area, blob.len());
    }

    #[test]
    fn blob_outside_scope_is_ignored() {
        let blob = disc(10, 10, 3.0);
        let pm = full_window(&image_with(&[&blob]));
        assert!(extract_candidates(&pm, &disc(25, 25, 3.0), 4).is_empty());
    }

    #[test]
    fn two_blobs_touching_scope_come_largest_first() {
        let small = disc(8, 8, 2.0);
        let large = disc(8, 20, 3.5);
        let pm = full_window(&image_with(&[&small, &large]));
        let scope: PixelSet = (4..26).map(|c| Pixel::new(8, c)).collect();
        let cands = extract_candidates(&pm, &scope, 4);
        assert_eq!(cands.len(), 2);
        assert_eq!(cands[0].pixels, large);
        assert_eq!(cands[1].pixels, small);
    }

    #[test]
    fn selection_edge_cases() {
        let cfg = ModelConfig { input_size: (32, 32), stage_channels: vec![2, 2], gap_taps: vec![1], head_channels: 2, ..Default::default() };
        let model = Model::zeros(cfg).unwrap();
        let image = image_with(&[]);
        let nam = crate::nam::compute_nam(&model, &image).unwrap();
        let scope = disc(16, 16, 6.0);
        assert!(matches!(select_candidate(&model, &image, &nam, &scope, &[], 0.2), Err(Error::Selection(_))));

        let a = Candidate::new(disc(16, 10, 2.0)).unwrap();
        let b = Candidate::new(disc(16, 22, 3.0)).unwrap();
        let single = select_candidate(&model, &image, &nam, &scope, std::slice::from_ref(&a), 0.2).unwrap();
        assert_eq!(single.index, 0);

        // zero model: every residual map is identical, so the tie rule decides
        for order in [[a.clone(), b.clone()], [b.clone(), a.clone()]] {
            let sel = select_candidate(&model, &image, &nam, &scope, &order, 0.2).unwrap();
            assert_eq!(sel.scores, vec![0.0, 0.0]);
            assert_eq!(order[sel.index], b);
        }
    }
}
