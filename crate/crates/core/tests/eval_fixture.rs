//! Ten hand-built slices on a 12x12 frame, scored against CSVs recomputed
//! independently and checked in under `fixtures/`.

use namseg::eval::{metrics_csv, report, size_bins_csv, DetectionRule, SliceResult};
use namseg::{Label, Pixel, PixelSet};

fn rect(r0: usize, c0: usize, h: usize, w: usize) -> PixelSet {
    (r0..r0 + h).flat_map(|r| (c0..c0 + w).map(move |c| Pixel::new(r, c))).collect()
}

fn slice(id: usize, label: Label, truth: Vec<PixelSet>, pred: Vec<PixelSet>) -> SliceResult {
    SliceResult { id, label, truth, pred }
}

fn fixture() -> Vec<SliceResult> {
    use Label::{NoNodule as N, Nodule as P};
    let tail: PixelSet = (5..12).map(|c| Pixel::new(5, c)).collect();
    vec![
        slice(0, P, vec![rect(1, 1, 3, 3)], vec![rect(1, 1, 3, 4)]),
        slice(1, P, vec![rect(2, 2, 4, 4)], vec![]),
        slice(2, P, vec![rect(0, 0, 2, 2)], vec![rect(5, 5, 2, 2)]),
        slice(3, P, vec![rect(3, 3, 3, 3)], vec![rect(3, 3, 3, 3)]),
        slice(4, P, vec![rect(0, 0, 2, 3), rect(6, 6, 3, 3)], vec![rect(0, 0, 2, 2), rect(6, 6, 3, 3)]),
        slice(5, P, vec![rect(0, 0, 3, 3), rect(5, 5, 2, 2)], vec![rect(0, 0, 3, 2)]),
        slice(6, N, vec![], vec![]),
        slice(7, N, vec![], vec![rect(4, 4, 2, 2)]),
        slice(8, N, vec![], vec![]),
        slice(9, P, vec![rect(4, 4, 2, 2)], vec![tail]),
    ]
}

#[test]
fn fixture_matches_checked_in_csv() {
    let (m, bins) = report(&fixture(), 0.5, DetectionRule::default(), &[0.0, 3.0, 4.0]).unwrap();
    assert_eq!(metrics_csv(&[("fixture".into(), m)]), include_str!("fixtures/eval_metrics.csv"));
    assert_eq!(size_bins_csv(&bins), include_str!("fixtures/eval_size_bins.csv"));
}

#[test]
fn fixture_counts_partition() {
    let (m, bins) = report(&fixture(), 0.5, DetectionRule::default(), &[0.0, 3.0, 4.0]).unwrap();
    assert_eq!(m.n_positive + m.n_negative, m.n_slices);
    assert_eq!(bins.iter().map(|b| b.n_truth).sum::<usize>(), m.n_truth);
    assert_eq!(bins.iter().map(|b| b.n_detected).sum::<usize>(), m.n_tp);
    let t = m.two_nodule;
    assert_eq!(t.both + t.one + t.none, t.slices);
}
