//! Segmentation and detection scoring.
//!
//! A predicted mask detects a truth mask when they overlap (Dice > 0) and the
//! prediction's centroid lies inside the truth bounding box grown by
//! [`DetectionRule::bbox_margin`] pixels.
//!
//! Rates:
//! - TPR: positive slices with at least one detected nodule, over positive slices
//! - FPR: negative slices with any prediction, over negative slices
//! - FPR_nodule: positive slices with a prediction that detects nothing, over
//!   positive slices
//!
//! Dice is taken per positive slice between the union of predictions and the
//! union of truth (no prediction scores 0). TP Dice and TP DOA are taken per
//! detected nodule against its best-matching prediction. Standard deviations
//! use `n - 1`; a single observation has SD 0.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::Label;
use crate::region::PixelSet;

/// `2|a ∩ b| / (|a| + |b|)`, with `dice(∅, ∅) = 1`.
pub fn dice(a: &PixelSet, b: &PixelSet) -> f64 {
    let total = a.len() + b.len();
    if total == 0 {
        return 1.0;
    }
    2.0 * a.intersection_len(b) as f64 / total as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionRule {
    pub bbox_margin: usize,
}

impl Default for DetectionRule {
    fn default() -> Self {
        Self { bbox_margin: 2 }
    }
}

impl DetectionRule {
    pub fn detects(&self, pred: &PixelSet, truth: &PixelSet) -> bool {
        let (Some((r, c)), Some(b)) = (pred.centroid(), truth.bbox()) else { return false };
        let m = self.bbox_margin as f64;
        pred.intersects(truth)
            && r >= b.ymin as f64 - m
            && r <= b.ymax as f64 + m
            && c >= b.xmin as f64 - m
            && c <= b.xmax as f64 + m
    }
}

/// Predictions and truth for one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceResult {
    pub id: usize,
    pub label: Label,
    pub truth: Vec<PixelSet>,
    pub pred: Vec<PixelSet>,
}

/// Per-truth match: index of the best detecting prediction and its Dice.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceScore {
    pub id: usize,
    pub label: Label,
    pub matches: Vec<Option<(usize, f64)>>,
    /// Predictions that detect no truth mask.
    pub unmatched_preds: usize,
    /// Dice of the prediction union against the truth union (positives only).
    pub slice_dice: Option<f64>,
}

impl SliceScore {
    pub fn detected(&self) -> usize {
        self.matches.iter().flatten().count()
    }
}

fn union(sets: &[PixelSet]) -> PixelSet {
    sets.iter().fold(PixelSet::new(), |acc, s| acc.union(s))
}

pub fn score_slice(r: &SliceResult, rule: DetectionRule) -> SliceScore {
    let matches = r
        .truth
        .iter()
        .map(|t| {
            r.pred
                .iter()
                .enumerate()
                .filter(|(_, p)| rule.detects(p, t))
                .map(|(i, p)| (i, dice(p, t)))
                .fold(None, |best: Option<(usize, f64)>, cur| match best {
                    Some(b) if b.1 >= cur.1 => Some(b),
                    _ => Some(cur),
                })
        })
        .collect();
    let unmatched_preds = r.pred.iter().filter(|p| !r.truth.iter().any(|t| rule.detects(p, t))).count();
    let slice_dice = (r.label == Label::Nodule).then(|| dice(&union(&r.pred), &union(&r.truth)));
    SliceScore { id: r.id, label: r.label, matches, unmatched_preds, slice_dice }
}

/// Mean, sample SD and count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        let n = xs.len();
        if n == 0 {
            return None;
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = if n == 1 { 0.0 } else { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() };
        Some(Stat { mean, sd, n })
    }
}

/// Slices holding exactly two nodules.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TwoNoduleTally {
    pub slices: usize,
    pub both: usize,
    pub one: usize,
    pub none: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub n_slices: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub n_truth: usize,
    pub n_tp: usize,
    pub tpr: f64,
    pub fpr: f64,
    pub fpr_nodule: f64,
    pub dice: Option<Stat>,
    pub tp_dice: Option<Stat>,
    pub tp_doa: Option<Stat>,
    pub two_nodule: TwoNoduleTally,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SizeBin {
    /// Equivalent diameter range `[lo, hi)` in pixels; `hi = None` is open.
    pub lo: f64,
    pub hi: Option<f64>,
    pub n_truth: usize,
    pub n_detected: usize,
    pub tp_dice: Option<Stat>,
    pub tp_doa: Option<Stat>,
}

/// Diameter of the disc with the mask's area.
pub fn equivalent_diameter(mask: &PixelSet) -> f64 {
    2.0 * (mask.len() as f64 / std::f64::consts::PI).sqrt()
}

pub const DEFAULT_BIN_EDGES: [f64; 5] = [0.0, 8.0, 11.0, 14.0, 17.0];

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Aggregates slice results. `bin_edges` are ascending lower bounds of the
/// size bins; the last bin is open-ended.
pub fn report(
    results: &[SliceResult],
    px_to_mm2: f64,
    rule: DetectionRule,
    bin_edges: &[f64],
) -> Result<(MetricsReport, Vec<SizeBin>)> {
    if results.is_empty() {
        return Err(Error::Data("no slices to evaluate".into()));
    }
    if bin_edges.is_empty() || bin_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("size bin edges must be non-empty and strictly ascending".into()));
    }
    let mut ids = BTreeSet::new();
    for r in results {
        if !ids.insert(r.id) {
            return Err(Error::Data(format!("slice id {} appears twice", r.id)));
        }
        if (r.label == Label::Nodule) == r.truth.is_empty() {
            return Err(Error::Data(format!("slice {}: label {} disagrees with its truth", r.id, r.label)));
        }
    }

    let scores: Vec<SliceScore> = results.iter().map(|r| score_slice(r, rule)).collect();
    let (mut n_pos, mut n_neg, mut tp_slices, mut fp_neg, mut fp_pos) = (0, 0, 0, 0, 0);
    let mut slice_dice = Vec::new();
    let mut tp_dice = Vec::new();
    let mut tp_doa = Vec::new();
    let mut two = TwoNoduleTally::default();
    let mut bins: Vec<(usize, Vec<f64>, Vec<f64>)> = vec![(0, Vec::new(), Vec::new()); bin_edges.len()];
    for (r, s) in results.iter().zip(&scores) {
        match r.label {
            Label::NoNodule => {
                n_neg += 1;
                fp_neg += usize::from(!r.pred.is_empty());
            }
            Label::Nodule => {
                n_pos += 1;
                tp_slices += usize::from(s.detected() > 0);
                fp_pos += usize::from(s.unmatched_preds > 0);
                slice_dice.push(s.slice_dice.expect("positive slice"));
                for (t, m) in r.truth.iter().zip(&s.matches) {
                    let d = equivalent_diameter(t);
                    let bin = bin_edges.iter().rposition(|&e| d >= e).unwrap_or(0);
                    bins[bin].0 += 1;
                    if let Some((pi, dv)) = *m {
                        let doa = (r.pred[pi].len() as f64 - t.len() as f64).abs() * px_to_mm2;
                        tp_dice.push(dv);
                        tp_doa.push(doa);
                        bins[bin].1.push(dv);
                        bins[bin].2.push(doa);
                    }
                }
                if r.truth.len() == 2 {
                    two.slices += 1;
                    match s.detected() {
                        2 => two.both += 1,
                        1 => two.one += 1,
                        _ => two.none += 1,
                    }
                }
            }
        }
    }
    let metrics = MetricsReport {
        n_slices: results.len(),
        n_positive: n_pos,
        n_negative: n_neg,
        n_truth: results.iter().map(|r| r.truth.len()).sum(),
        n_tp: tp_dice.len(),
        tpr: ratio(tp_slices, n_pos),
        fpr: ratio(fp_neg, n_neg),
        fpr_nodule: ratio(fp_pos, n_pos),
        dice: Stat::of(&slice_dice),
        tp_dice: Stat::of(&tp_dice),
        tp_doa: Stat::of(&tp_doa),
        two_nodule: two,
    };
    let size_bins = bins
        .into_iter()
        .enumerate()
        .map(|(i, (n_truth, d, a))| SizeBin {
            lo: bin_edges[i],
            hi: bin_edges.get(i + 1).copied(),
            n_truth,
            n_detected: d.len(),
            tp_dice: Stat::of(&d),
            tp_doa: Stat::of(&a),
        })
        .collect();
    Ok((metrics, size_bins))
}

/// Pairs predictions (by slice id) with truth. Every prediction id must name
/// a known slice; slices without predictions get none.
pub fn join_predictions(
    truth: impl IntoIterator<Item = (usize, Label, Vec<PixelSet>)>,
    mut preds: BTreeMap<usize, Vec<PixelSet>>,
) -> Result<Vec<SliceResult>> {
    let out: Vec<SliceResult> = truth
        .into_iter()
        .map(|(id, label, truth)| SliceResult { id, label, truth, pred: preds.remove(&id).unwrap_or_default() })
        .collect();
    if let Some(id) = preds.keys().next() {
        return Err(Error::Data(format!("prediction for unknown slice id {id}")));
    }
    Ok(out)
}

fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

fn fmt_stat(s: Option<Stat>) -> [String; 2] {
    match s {
        Some(s) => [fmt_f(s.mean), fmt_f(s.sd)],
        None => ["NA".into(), "NA".into()],
    }
}

pub const METRICS_HEADER: &str = "config,n_slices,n_positive,n_negative,n_truth,n_tp,tpr,fpr,fpr_nodule,\
dice_mean,dice_sd,tp_dice_mean,tp_dice_sd,tp_doa_mean,tp_doa_sd,two_nodule_slices,two_both,two_one";

/// One row per named configuration. Missing statistics print as `NA`.
pub fn metrics_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for (name, m) in rows {
        let [dm, ds] = fmt_stat(m.dice);
        let [tdm, tds] = fmt_stat(m.tp_dice);
        let [am, asd] = fmt_stat(m.tp_doa);
        writeln!(
            out,
            "{name},{},{},{},{},{},{},{},{},{dm},{ds},{tdm},{tds},{am},{asd},{},{},{}",
            m.n_slices,
            m.n_positive,
            m.n_negative,
            m.n_truth,
            m.n_tp,
            fmt_f(m.tpr),
            fmt_f(m.fpr),
            fmt_f(m.fpr_nodule),
            m.two_nodule.slices,
            m.two_nodule.both,
            m.two_nodule.one,
        )
        .expect("string write");
    }
    out
}

pub const SIZE_BINS_HEADER: &str = "diam_lo,diam_hi,n_truth,n_detected,tp_dice_mean,tp_dice_sd,tp_doa_mean,tp_doa_sd";

pub fn size_bins_csv(bins: &[SizeBin]) -> String {
    let mut out = format!("{SIZE_BINS_HEADER}\n");
    for b in bins {
        let [dm, ds] = fmt_stat(b.tp_dice);
        let [am, asd] = fmt_stat(b.tp_doa);
        let hi = b.hi.map_or_else(|| "inf".to_string(), |h| h.to_string());
        writeln!(out, "{},{hi},{},{},{dm},{ds},{am},{asd}", b.lo, b.n_truth, b.n_detected).expect("string write");
    }
    out
}
