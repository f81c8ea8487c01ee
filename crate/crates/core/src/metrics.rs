//! Frame accuracy, segmental Edit score and segmental F1.

use std::fmt::Write as _;

use serde_json::json;

use crate::error::{Error, Result};
use crate::seqdata::{segments_from_labels, LabelSequence, Segment, SegmentList};

/// IoU thresholds reported as F1@10, F1@25, F1@50.
pub const THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

pub const CSV_HEADER: &str = "f1_10,f1_25,f1_50,edit,acc";

/// Scores in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub f1_10: f64,
    pub f1_25: f64,
    pub f1_50: f64,
    pub edit: f64,
    pub acc: f64,
}

impl MetricsReport {
    pub fn f1(&self) -> [f64; 3] {
        [self.f1_10, self.f1_25, self.f1_50]
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "f1_10": self.f1_10,
            "f1_25": self.f1_25,
            "f1_50": self.f1_50,
            "edit": self.edit,
            "acc": self.acc,
        })
    }

    /// Values in `CSV_HEADER` order.
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        for (i, v) in [self.f1_10, self.f1_25, self.f1_50, self.edit, self.acc].iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{v:.4}");
        }
        s
    }
}

fn check_lengths(pred: &LabelSequence, gt: &LabelSequence) -> Result<()> {
    if pred.labels.len() != gt.labels.len() {
        return Err(Error::Argument(format!(
            "prediction has {} frames but ground truth has {}",
            pred.labels.len(),
            gt.labels.len()
        )));
    }
    Ok(())
}

pub fn frame_accuracy(pred: &LabelSequence, gt: &LabelSequence) -> Result<f64> {
    check_lengths(pred, gt)?;
    let t = gt.labels.len();
    if t == 0 {
        return Ok(100.0);
    }
    let correct = pred.labels.iter().zip(&gt.labels).filter(|(a, b)| a == b).count();
    Ok(100.0 * correct as f64 / t as f64)
}

fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn edit_score(pred: &SegmentList, gt: &SegmentList) -> f64 {
    let (p, g) = (pred.classes(), gt.classes());
    match (p.is_empty(), g.is_empty()) {
        (true, true) => 100.0,
        (true, false) | (false, true) => 0.0,
        _ => 100.0 * (1.0 - levenshtein(&p, &g) as f64 / p.len().max(g.len()) as f64),
    }
}

fn iou(a: &Segment, b: &Segment) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.end.max(b.end) - a.start.min(b.start);
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// True positives, false positives and false negatives at one threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MatchCounts {
    pub fn f1(&self) -> f64 {
        let (pred, gt) = (self.tp + self.fp, self.tp + self.fn_);
        if pred == 0 && gt == 0 {
            return 100.0;
        }
        if self.tp == 0 {
            return 0.0;
        }
        let precision = self.tp as f64 / pred as f64;
        let recall = self.tp as f64 / gt as f64;
        100.0 * 2.0 * precision * recall / (precision + recall)
    }
}

/// One-to-one matching of same-class segments with IoU ≥ `threshold`.
///
/// Predictions are visited in temporal order and offered their eligible
/// ground-truth segments by descending IoU; an augmenting-path search lets a
/// later prediction displace an earlier one onto another segment, so the
/// number of matches is the maximum possible.
pub fn match_segments(pred: &[Segment], gt: &[Segment], threshold: f64) -> MatchCounts {
    let candidates: Vec<Vec<usize>> = pred
        .iter()
        .map(|p| {
            let mut c: Vec<(usize, f64)> = gt
                .iter()
                .enumerate()
                .filter(|(_, g)| g.class == p.class)
                .map(|(j, g)| (j, iou(p, g)))
                .filter(|&(_, v)| v >= threshold)
                .collect();
            c.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            c.into_iter().map(|(j, _)| j).collect()
        })
        .collect();

    fn augment(i: usize, cand: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
        for &j in &cand[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            if owner[j].is_none_or(|o| augment(o, cand, owner, seen)) {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }

    let mut owner = vec![None; gt.len()];
    let mut tp = 0;
    for i in 0..pred.len() {
        let mut seen = vec![false; gt.len()];
        if augment(i, &candidates, &mut owner, &mut seen) {
            tp += 1;
        }
    }
    MatchCounts { tp, fp: pred.len() - tp, fn_: gt.len() - tp }
}

pub fn f1_at(pred: &SegmentList, gt: &SegmentList, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Argument(format!("IoU threshold {threshold} outside (0, 1)")));
    }
    Ok(match_segments(pred.as_slice(), gt.as_slice(), threshold).f1())
}

/// Per-video scores plus the raw counts needed for dataset pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoScores {
    pub report: MetricsReport,
    pub counts: [MatchCounts; 3],
    pub correct_frames: usize,
    pub frames: usize,
}

pub fn score_video(pred: &LabelSequence, gt: &LabelSequence) -> Result<VideoScores> {
    let acc = frame_accuracy(pred, gt)?;
    let (ps, gs) = (segments_from_labels(pred), segments_from_labels(gt));
    let counts = THRESHOLDS.map(|th| match_segments(ps.as_slice(), gs.as_slice(), th));
    let report = MetricsReport {
        f1_10: counts[0].f1(),
        f1_25: counts[1].f1(),
        f1_50: counts[2].f1(),
        edit: edit_score(&ps, &gs),
        acc,
    };
    let correct_frames = pred.labels.iter().zip(&gt.labels).filter(|(a, b)| a == b).count();
    Ok(VideoScores { report, counts, correct_frames, frames: gt.labels.len() })
}

pub fn evaluate(pred: &LabelSequence, gt: &LabelSequence) -> Result<MetricsReport> {
    Ok(score_video(pred, gt)?.report)
}

/// Dataset-level aggregation: F1 from pooled counts, Edit averaged over
/// videos, accuracy pooled over frames. Merging is associative.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsAccumulator {
    counts: [MatchCounts; 3],
    edit_sum: f64,
    videos: usize,
    correct_frames: usize,
    frames: usize,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, v: &VideoScores) {
        for (acc, c) in self.counts.iter_mut().zip(&v.counts) {
            acc.tp += c.tp;
            acc.fp += c.fp;
            acc.fn_ += c.fn_;
        }
        self.edit_sum += v.report.edit;
        self.videos += 1;
        self.correct_frames += v.correct_frames;
        self.frames += v.frames;
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        for (acc, c) in self.counts.iter_mut().zip(&other.counts) {
            acc.tp += c.tp;
            acc.fp += c.fp;
            acc.fn_ += c.fn_;
        }
        self.edit_sum += other.edit_sum;
        self.videos += other.videos;
        self.correct_frames += other.correct_frames;
        self.frames += other.frames;
    }

    pub fn videos(&self) -> usize {
        self.videos
    }

    pub fn report(&self) -> MetricsReport {
        let edit = if self.videos == 0 { 100.0 } else { self.edit_sum / self.videos as f64 };
        let acc = if self.frames == 0 {
            100.0
        } else {
            100.0 * self.correct_frames as f64 / self.frames as f64
        };
        MetricsReport {
            f1_10: self.counts[0].f1(),
            f1_25: self.counts[1].f1(),
            f1_50: self.counts[2].f1(),
            edit,
            acc,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(labels: &[usize]) -> LabelSequence {
        LabelSequence { labels: labels.to_vec(), num_classes: 8 }
    }

    fn segs(labels: &[usize]) -> SegmentList {
        segments_from_labels(&seq(labels))
    }

    fn from_runs(runs: &[(usize, usize)]) -> Vec<usize> {
        runs.iter().flat_map(|&(c, n)| std::iter::repeat_n(c, n)).collect()
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(frame_accuracy(&seq(&[0, 0, 1, 1]), &seq(&[0, 1, 1, 1])).unwrap(), 75.0);
        assert_eq!(frame_accuracy(&seq(&[1, 1]), &seq(&[0, 0])).unwrap(), 0.0);
        assert!(frame_accuracy(&seq(&[1]), &seq(&[0, 0])).is_err());
    }

    #[test]
    fn edit_cases() {
        let e = edit_score(&segs(&[0, 2]), &segs(&[0, 1, 2]));
        assert!((e - 100.0 * 2.0 / 3.0).abs() < 1e-9);
        assert_eq!(edit_score(&segs(&[0, 1, 0]), &segs(&[2, 3, 2])), 0.0);
        assert_eq!(edit_score(&SegmentList::empty(), &SegmentList::empty()), 100.0);
        assert_eq!(edit_score(&SegmentList::empty(), &segs(&[1])), 0.0);
    }

    #[test]
    fn f1_cases() {
        let gt = segs(&from_runs(&[(0, 100)]));
        let pred = SegmentList::new(vec![Segment { class: 0, start: 0, end: 40 }]).unwrap();
        assert_eq!(f1_at(&pred, &gt, 0.10).unwrap(), 100.0);
        assert_eq!(f1_at(&pred, &gt, 0.25).unwrap(), 100.0);
        assert_eq!(f1_at(&pred, &gt, 0.50).unwrap(), 0.0);

        let gt = segs(&from_runs(&[(0, 10), (1, 5), (0, 10)]));
        let pred = SegmentList::new(vec![Segment { class: 0, start: 0, end: 10 }]).unwrap();
        let c = match_segments(pred.as_slice(), gt.as_slice(), 0.5);
        assert_eq!((c.tp, c.fp, c.fn_), (1, 0, 2));

        let pred = segs(&from_runs(&[(0, 10), (1, 15)]));
        // Class-0 first segment perfect, second unmatched; class-1 prediction IoU 5/15.
        let c = match_segments(pred.as_slice(), gt.as_slice(), 0.5);
        assert_eq!((c.tp, c.fp, c.fn_), (1, 1, 2));
        assert!(f1_at(&pred, &gt, 1.0).is_err());
    }

    #[test]
    fn hand_example() {
        let r = evaluate(&seq(&[0, 0, 1, 2, 2, 2]), &seq(&[0, 0, 1, 1, 2, 2])).unwrap();
        assert!((r.acc - 500.0 / 6.0).abs() < 1e-9);
        assert_eq!((r.edit, r.f1_10, r.f1_25, r.f1_50), (100.0, 100.0, 100.0, 100.0));
    }

    #[test]
    fn greedy_counterexample_is_matched_maximally() {
        let gt = segs(&from_runs(&[(0, 10), (1, 2), (0, 28)]));
        let pred = segs(&from_runs(&[(2, 5), (0, 25), (1, 1), (0, 9)]));
        let c = match_segments(pred.as_slice(), gt.as_slice(), 0.1);
        // Both class-0 predictions can be matched when the first takes the earlier segment.
        assert_eq!(c.tp, 2);
    }

    #[test]
    fn constant_prediction_keeps_accuracy_but_loses_segments() {
        let gt = from_runs(&[(0, 90), (1, 2), (0, 3), (2, 2), (0, 3)]);
        let r = evaluate(&seq(&vec![0; gt.len()]), &seq(&gt)).unwrap();
        assert!(r.acc > 90.0);
        assert!(r.acc > r.f1_50 && r.acc > r.edit);
    }

    #[test]
    fn json_and_csv() {
        let r = MetricsReport { f1_10: 1.0, f1_25: 2.0, f1_50: 3.0, edit: 4.0, acc: 5.5 };
        assert_eq!(r.to_json()["acc"], 5.5);
        assert_eq!(r.csv_row(), "1.0000,2.0000,3.0000,4.0000,5.5000");
    }

    #[test]
    fn accumulator_pools() {
        let a = score_video(&seq(&[0, 0, 1]), &seq(&[0, 0, 1])).unwrap();
        let b = score_video(&seq(&[1, 1, 1, 1]), &seq(&[0, 0, 1, 1])).unwrap();
        let mut acc = MetricsAccumulator::new();
        acc.add(&a);
        acc.add(&b);
        let r = acc.report();
        assert!((r.acc - 500.0 / 7.0).abs() < 1e-9);
        assert!((r.edit - (a.report.edit + b.report.edit) / 2.0).abs() < 1e-9);
        // pooled: tp = 2 + 1, fp = 0, fn = 0 + 1
        assert!((r.f1_10 - 100.0 * 2.0 * 0.75 / 1.75).abs() < 1e-9);
        let mut left = MetricsAccumulator::new();
        left.add(&a);
        let mut right = MetricsAccumulator::new();
        right.add(&b);
        left.merge(&right);
        assert_eq!(left, acc);
    }

    fn labels_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec((0usize..3, 1usize..6), 1..8).prop_map(|runs| from_runs(&runs))
    }

    proptest! {
        #[test]
        fn permutation_and_scaling_invariance(gt in labels_strategy(), noise in prop::collection::vec(0usize..3, 48), k in 2usize..4) {
            let pred: Vec<usize> = gt.iter().zip(noise.iter().cycle()).enumerate()
                .map(|(t, (&g, &n))| if t % 5 == 0 { n } else { g }).collect();
            let base = evaluate(&seq(&pred), &seq(&gt)).unwrap();
            let perm = |v: &[usize]| v.iter().map(|&c| (c + 1) % 3).collect::<Vec<_>>();
            let permuted = evaluate(&seq(&perm(&pred)), &seq(&perm(&gt))).unwrap();
            prop_assert_eq!(base, permuted);
            let stretch = |v: &[usize]| v.iter().flat_map(|&c| std::iter::repeat_n(c, k)).collect::<Vec<_>>();
            let scaled = evaluate(&seq(&stretch(&pred)), &seq(&stretch(&gt))).unwrap();
            prop_assert!((base.acc - scaled.acc).abs() < 1e-9);
            prop_assert!((base.edit - scaled.edit).abs() < 1e-9);
            prop_assert_eq!(base.f1(), scaled.f1());
            prop_assert!(base.f1_10 >= base.f1_25 && base.f1_25 >= base.f1_50);
        }
    }
}
