//! Per-slice segmentation: classification gate, scoping, coarse and fine steps.

use super::icm::{icm_segment, IcmConfig, PhaseMap};
use super::watershed::{extract_scope, extract_top_scopes, refine_scope, ScopeConfig};
use super::{extract_candidates, select_candidate, Candidate, Scope};
use crate::error::{Error, Result};
use crate::model::{Classification, Label, Model};
use crate::nam::{compute_nam, Nam};
use crate::region::PixelSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentConfig {
    pub scope: ScopeConfig,
    pub icm: IcmConfig,
    /// Smallest candidate kept, in pixels.
    pub min_area: usize,
    /// Intensity painted over a candidate when computing its residual map.
    pub fill_value: f64,
    /// Skip fine selection and return the union of all candidates.
    pub coarse_only: bool,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            scope: ScopeConfig::default(),
            icm: IcmConfig::default(),
            min_area: 4,
            fill_value: crate::data::SyntheticConfig::default().background_level,
            coarse_only: false,
        }
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<()> {
        self.icm.validate()?;
        if !(self.scope.tau > 0.0 && self.scope.tau < 1.0) {
            return Err(Error::Config(format!("scope tau must lie in (0,1), got {}", self.scope.tau)));
        }
        if self.min_area == 0 {
            return Err(Error::Config("min_area must be at least 1".into()));
        }
        if !self.fill_value.is_finite() {
            return Err(Error::Config("fill value must be finite".into()));
        }
        Ok(())
    }
}

/// Everything produced for a slice that reached segmentation.
#[derive(Clone, Debug)]
pub struct SliceSegmentation {
    pub classification: Classification,
    pub nam: Nam,
    /// Baseline scope from the one-GAP map.
    pub scope_c1: Scope,
    /// Scope used for candidate screening (C1 or the refined multi-GAP scope).
    pub scope: Scope,
    pub phase_map: PhaseMap,
    pub candidates: Vec<Candidate>,
    /// Index into `candidates`; `None` in coarse-only mode.
    pub selected: Option<usize>,
    /// Residual-map distances, one per candidate when two or more competed.
    pub scores: Vec<f64>,
    /// Final mask: the selected candidate, or the coarse mask in coarse-only mode.
    pub mask: PixelSet,
    /// Union of all candidates.
    pub coarse_mask: PixelSet,
}

#[derive(Clone, Debug)]
pub enum SliceOutcome {
    NoNodule(Classification),
    Segmented(Box<SliceSegmentation>),
    /// Classified as a nodule slice but no mask could be produced.
    DetectionFailed { classification: Classification, reason: String },
}

impl SliceOutcome {
    pub fn classification(&self) -> &Classification {
        match self {
            SliceOutcome::NoNodule(c) => c,
            SliceOutcome::Segmented(s) => &s.classification,
            SliceOutcome::DetectionFailed { classification, .. } => classification,
        }
    }

    pub fn mask(&self) -> Option<&PixelSet> {
        match self {
            SliceOutcome::Segmented(s) => Some(&s.mask),
            _ => None,
        }
    }
}

/// Errors that mean "nothing found" rather than "something is broken".
fn is_detection_failure(e: &Error) -> bool {
    matches!(e, Error::DegenerateMap(_) | Error::Selection(_) | Error::Domain(_))
}

fn union_of(candidates: &[Candidate]) -> PixelSet {
    candidates.iter().fold(PixelSet::default(), |acc, c| acc.union(&c.pixels))
}

fn check_image(model: &Model, image: &Tensor) -> Result<()> {
    let (h, w) = model.config().input_size;
    if image.shape() != [1, h, w] {
        return Err(Error::Dimension(format!("image must be [1,{h},{w}], got {:?}", image.shape())));
    }
    Ok(())
}

fn segment_positive(
    one: &Model,
    multi: Option<&Model>,
    image: &Tensor,
    classification: Classification,
    cfg: &SegmentConfig,
) -> Result<SliceSegmentation> {
    let nam = compute_nam(one, image)?;
    let scope_c1 = extract_scope(&nam, cfg.scope)?;
    let scope = match multi {
        Some(m) => {
            let multi_nam = compute_nam(m, image)?;
            match refine_scope(&multi_nam, &scope_c1, cfg.scope) {
                Ok(Some(s)) => s,
                Ok(None) | Err(Error::DegenerateMap(_)) => scope_c1.clone(),
                Err(e) => return Err(e),
            }
        }
        None => scope_c1.clone(),
    };
    let phase_map = icm_segment(image, &scope.pixels, &cfg.icm)?;
    let candidates = extract_candidates(&phase_map, &scope.pixels, cfg.min_area);
    if candidates.is_empty() {
        return Err(Error::Selection("no bright candidate touches the scope".into()));
    }
    let coarse_mask = union_of(&candidates);
    let (selected, scores, mask) = if cfg.coarse_only {
        (None, Vec::new(), coarse_mask.clone())
    } else {
        let sel = select_candidate(one, image, &nam, &scope_c1.pixels, &candidates, cfg.fill_value)?;
        (Some(sel.index), sel.scores, candidates[sel.index].pixels.clone())
    };
    Ok(SliceSegmentation {
        classification,
        nam,
        scope_c1,
        scope,
        phase_map,
        candidates,
        selected,
        scores,
        mask,
        coarse_mask,
    })
}

/// Full pipeline for one slice. `multi` enables scope refinement; fine
/// selection always uses the one-GAP model over the baseline scope.
pub fn segment_slice(one: &Model, multi: Option<&Model>, image: &Tensor, cfg: &SegmentConfig) -> Result<SliceOutcome> {
    cfg.validate()?;
    check_image(one, image)?;
    if let Some(m) = multi {
        check_image(m, image)?;
    }
    let classification = one.classify(image)?;
    if classification.label == Label::NoNodule {
        return Ok(SliceOutcome::NoNodule(classification));
    }
    match segment_positive(one, multi, image, classification, cfg) {
        Ok(s) => Ok(SliceOutcome::Segmented(Box::new(s))),
        Err(e) if is_detection_failure(&e) => {
            Ok(SliceOutcome::DetectionFailed { classification, reason: e.to_string() })
        }
        Err(e) => Err(e),
    }
}

/// One mask per activation blob in two-nodule mode.
#[derive(Clone, Debug)]
pub struct BlobMask {
    pub scope: Scope,
    pub candidates: Vec<Candidate>,
    pub selected: usize,
    pub mask: PixelSet,
}

#[derive(Clone, Debug)]
pub enum TwoNoduleOutcome {
    NoNodule(Classification),
    /// One or two masks, strongest blob first.
    Segmented { classification: Classification, blobs: Vec<BlobMask> },
    DetectionFailed { classification: Classification, reason: String },
}

impl TwoNoduleOutcome {
    pub fn masks(&self) -> Vec<&PixelSet> {
        match self {
            TwoNoduleOutcome::Segmented { blobs, .. } => blobs.iter().map(|b| &b.mask).collect(),
            _ => Vec::new(),
        }
    }
}

fn segment_blob(model: &Model, image: &Tensor, nam: &Nam, scope: Scope, cfg: &SegmentConfig) -> Result<Option<BlobMask>> {
    let phase_map = icm_segment(image, &scope.pixels, &cfg.icm)?;
    let candidates = extract_candidates(&phase_map, &scope.pixels, cfg.min_area);
    if candidates.is_empty() {
        return Ok(None);
    }
    let selected = if cfg.coarse_only {
        0
    } else {
        select_candidate(model, image, nam, &scope.pixels, &candidates, cfg.fill_value)?.index
    };
    let mask = candidates[selected].pixels.clone();
    Ok(Some(BlobMask { scope, candidates, selected, mask }))
}

/// Segments the top two activation blobs of a slice classified positive.
///
/// Blobs come from the multi-GAP map when `multi` is given, else from the
/// one-GAP map; each blob is screened with the model that produced the map.
/// A second mask overlapping the first is dropped.
pub fn segment_two_nodules(
    one: &Model,
    multi: Option<&Model>,
    image: &Tensor,
    cfg: &SegmentConfig,
) -> Result<TwoNoduleOutcome> {
    cfg.validate()?;
    check_image(one, image)?;
    let classification = one.classify(image)?;
    if classification.label == Label::NoNodule {
        return Ok(TwoNoduleOutcome::NoNodule(classification));
    }
    let model = match multi {
        Some(m) => {
            check_image(m, image)?;
            m
        }
        None => one,
    };
    let attempt = || -> Result<Vec<BlobMask>> {
        let nam = compute_nam(model, image)?;
        let mut blobs: Vec<BlobMask> = Vec::new();
        for scope in extract_top_scopes(&nam, 2, cfg.scope)? {
            if let Some(blob) = segment_blob(model, image, &nam, scope, cfg)? {
                if blobs.iter().all(|b| !b.mask.intersects(&blob.mask)) {
                    blobs.push(blob);
                }
            }
        }
        Ok(blobs)
    };
    match attempt() {
        Ok(blobs) if blobs.is_empty() => Ok(TwoNoduleOutcome::DetectionFailed {
            classification,
            reason: "no bright candidate touches either scope".into(),
        }),
        Ok(blobs) => Ok(TwoNoduleOutcome::Segmented { classification, blobs }),
        Err(e) if is_detection_failure(&e) => {
            Ok(TwoNoduleOutcome::DetectionFailed { classification, reason: e.to_string() })
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny(bias: [f64; 2]) -> Model {
        let cfg = ModelConfig {
            input_size: (32, 32),
            stage_channels: vec![2, 2],
            gap_taps: vec![1],
            head_channels: 2,
            ..Default::default()
        };
        let mut m = Model::zeros(cfg).unwrap();
        m.fc_bias.data_mut().copy_from_slice(&bias);
        m
    }

    #[test]
    fn negative_slice_is_never_segmented() {
        let model = tiny([1.0, 0.0]);
        let out = segment_slice(&model, None, &Tensor::full(&[1, 32, 32], 0.3), &SegmentConfig::default()).unwrap();
        assert!(matches!(out, SliceOutcome::NoNodule(_)));
        assert!(out.mask().is_none());
        let two = segment_two_nodules(&model, None, &Tensor::full(&[1, 32, 32], 0.3), &SegmentConfig::default()).unwrap();
        assert!(two.masks().is_empty());
    }

    #[test]
    fn flat_map_is_a_detection_failure() {
        // positive bias, zero weights: constant NAM
        let model = tiny([0.0, 1.0]);
        let out = segment_slice(&model, None, &Tensor::full(&[1, 32, 32], 0.3), &SegmentConfig::default()).unwrap();
        match out {
            SliceOutcome::DetectionFailed { classification, reason } => {
                assert_eq!(classification.label, Label::Nodule);
                assert!(!reason.is_empty());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_image_shape_is_an_error() {
        let model = tiny([0.0, 1.0]);
        let err = segment_slice(&model, None, &Tensor::zeros(&[1, 16, 16]), &SegmentConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn config_validation() {
        let mut cfg = SegmentConfig::default();
        cfg.scope.tau = 1.5;
        assert!(cfg.validate().is_err());
        let cfg = SegmentConfig { min_area: 0, ..SegmentConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
