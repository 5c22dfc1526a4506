use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::bbox::{BBox, DetectionSet};
use super::matching::{match_greedy_with_ignore, Matching};
use crate::error::{Error, Result};

/// IoU thresholds 0.50:0.05:0.95, in percent.
pub const IOU_THRESHOLDS_PCT: [u32; 10] = [50, 55, 60, 65, 70, 75, 80, 85, 90, 95];

/// Number of points on the interpolated recall grid.
pub const RECALL_POINTS: usize = 101;

pub const SMALL_AREA_MAX: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA_MAX: f64 = 96.0 * 96.0;

pub fn threshold_value(pct: u32) -> f64 {
    pct as f64 / 100.0
}

/// Recall level `i` of the 101-point grid.
#[inline]
pub fn recall_level(i: usize) -> f64 {
    i as f64 / (RECALL_POINTS - 1) as f64
}

/// Scored detections of one class at one IoU threshold, pooled over frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchPool {
    /// `(score, is_true_positive)` in insertion order.
    pub detections: Vec<(f64, bool)>,
    pub num_gt: usize,
}

impl MatchPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add one frame's matching; ignored predictions are skipped.
    pub fn add_frame(&mut self, preds: &[BBox], matching: &Matching, num_gt: usize) {
        for &(p, g) in &matching.pairs {
            self.detections.push((preds[p].rank_score(), g.is_some()));
        }
        self.num_gt += num_gt;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApValue {
    pub ap: f64,
    /// Set when the pool had no ground truth; `ap` is 0 in that case.
    pub no_ground_truth: bool,
}

/// 101-point interpolated average precision of a match pool.
pub fn average_precision(pool: &MatchPool) -> ApValue {
    if pool.num_gt == 0 {
        return ApValue {
            ap: 0.0,
            no_ground_truth: true,
        };
    }
    let mut dets = pool.detections.clone();
    // stable: equal scores keep pooling order
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));

    let n_gt = pool.num_gt as f64;
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, is_tp) in &dets {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_gt);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let level = recall_level(r);
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    ApValue {
        ap: sum / RECALL_POINTS as f64,
        no_ground_truth: false,
    }
}

/// COCO-style summary of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    /// IoU threshold in percent → AP.
    pub ap_per_iou: BTreeMap<u32, f64>,
    pub ap_mean: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    /// Conditions under which a value was defined as 0 rather than measured.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl APReport {
    pub fn ap_at(&self, pct: u32) -> Option<f64> {
        self.ap_per_iou.get(&pct).copied()
    }

    pub fn ap50(&self) -> f64 {
        self.ap_at(50).unwrap_or(0.0)
    }

    pub fn ap75(&self) -> f64 {
        self.ap_at(75).unwrap_or(0.0)
    }
}

/// Size-bucket APs, each already averaged over thresholds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SizeBuckets {
    pub small: f64,
    pub medium: f64,
    pub large: f64,
}

/// Assemble a report from per-threshold APs; every threshold in
/// [`IOU_THRESHOLDS_PCT`] must be present.
pub fn aggregate_coco(per_threshold: &BTreeMap<u32, f64>, buckets: SizeBuckets) -> Result<APReport> {
    let mut ap_per_iou = BTreeMap::new();
    for pct in IOU_THRESHOLDS_PCT {
        let v = *per_threshold
            .get(&pct)
            .ok_or_else(|| Error::Contract(format!("missing AP for IoU threshold 0.{pct}")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Contract(format!("AP {v} at 0.{pct} outside [0,1]")));
        }
        ap_per_iou.insert(pct, v);
    }
    if let Some(extra) = per_threshold.keys().find(|k| !IOU_THRESHOLDS_PCT.contains(k)) {
        return Err(Error::Contract(format!("unexpected IoU threshold {extra}%")));
    }
    let ap_mean = ap_per_iou.values().sum::<f64>() / IOU_THRESHOLDS_PCT.len() as f64;
    Ok(APReport {
        ap_per_iou,
        ap_mean,
        ap_small: buckets.small,
        ap_medium: buckets.medium,
        ap_large: buckets.large,
        flags: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    fn contains(self, area: f64) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Small => area < SMALL_AREA_MAX,
            AreaRange::Medium => (SMALL_AREA_MAX..MEDIUM_AREA_MAX).contains(&area),
            AreaRange::Large => area >= MEDIUM_AREA_MAX,
        }
    }

    fn label(self) -> &'static str {
        match self {
            AreaRange::All => "all",
            AreaRange::Small => "small",
            AreaRange::Medium => "medium",
            AreaRange::Large => "large",
        }
    }
}

/// One evaluation instance: a prediction set scored against one gt frame.
#[derive(Debug, Clone, Copy)]
pub struct EvalPair<'a> {
    pub preds: &'a DetectionSet,
    pub gts: &'a DetectionSet,
}

/// Mean over classes (with at least one gt) of AP at one threshold and range.
fn class_mean_ap(pairs: &[EvalPair<'_>], classes: &BTreeSet<u32>, thr: f64, range: AreaRange) -> Option<f64> {
    let mut aps = Vec::new();
    for &class in classes {
        let mut pool = MatchPool::new();
        for pair in pairs {
            let preds: Vec<BBox> = pair
                .preds
                .boxes
                .iter()
                .filter(|b| b.class_id == class)
                .copied()
                .collect();
            let gts: Vec<BBox> = pair
                .gts
                .boxes
                .iter()
                .filter(|b| b.class_id == class)
                .copied()
                .collect();
            let ignore: Vec<bool> = gts.iter().map(|g| !range.contains(g.area())).collect();
            let mut m = match_greedy_with_ignore(&preds, &gts, &ignore, thr);
            if range != AreaRange::All {
                // unmatched predictions outside the range do not count as FP
                m.pairs
                    .retain(|&(p, g)| g.is_some() || range.contains(preds[p].area()));
            }
            let n_gt = ignore.iter().filter(|&&ig| !ig).count();
            pool.add_frame(&preds, &m, n_gt);
        }
        let v = average_precision(&pool);
        if !v.no_ground_truth {
            aps.push(v.ap);
        }
    }
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

/// Full COCO-style evaluation over a list of (prediction, ground-truth) pairs.
///
/// Classes without ground truth are left out of the class mean; an evaluation
/// with no ground truth at all (or an empty size bucket) yields 0 with a flag.
pub fn evaluate_pairs(pairs: &[EvalPair<'_>]) -> APReport {
    let classes: BTreeSet<u32> = pairs
        .iter()
        .flat_map(|p| p.gts.boxes.iter().map(|b| b.class_id))
        .collect();
    let mut flags = Vec::new();

    let mut per_threshold = BTreeMap::new();
    for pct in IOU_THRESHOLDS_PCT {
        let v = class_mean_ap(pairs, &classes, threshold_value(pct), AreaRange::All);
        per_threshold.insert(pct, v.unwrap_or(0.0));
    }
    if classes.is_empty() {
        flags.push("no_ground_truth".to_string());
    }

    let mut bucket = |range: AreaRange| -> f64 {
        let vals: Vec<Option<f64>> = IOU_THRESHOLDS_PCT
            .iter()
            .map(|&pct| class_mean_ap(pairs, &classes, threshold_value(pct), range))
            .collect();
        if vals.iter().all(Option::is_none) {
            flags.push(format!("empty_bucket_{}", range.label()));
            0.0
        } else {
            vals.iter().map(|v| v.unwrap_or(0.0)).sum::<f64>() / vals.len() as f64
        }
    };
    let buckets = SizeBuckets {
        small: bucket(AreaRange::Small),
        medium: bucket(AreaRange::Medium),
        large: bucket(AreaRange::Large),
    };
    let mut report =
        aggregate_coco(&per_threshold, buckets).expect("all thresholds populated above");
    report.flags = flags;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(dets: &[(f64, bool)], num_gt: usize) -> MatchPool {
        MatchPool {
            detections: dets.to_vec(),
            num_gt,
        }
    }

    #[test]
    fn perfect_ranking_is_one() {
        let v = average_precision(&pool(&[(0.9, true), (0.8, true)], 2));
        assert_eq!(v.ap, 1.0);
    }

    #[test]
    fn no_predictions_is_zero() {
        assert_eq!(average_precision(&pool(&[], 3)).ap, 0.0);
    }

    #[test]
    fn zero_gt_flagged() {
        let v = average_precision(&pool(&[(0.9, false)], 0));
        assert_eq!(v.ap, 0.0);
        assert!(v.no_ground_truth);
    }

    #[test]
    fn tp_fp_tp_over_two_gts() {
        // Hand-evaluated: recall 0.5 at precision 1, recall 1 at precision 2/3.
        // Levels 0..=50 take 1.0 (51 points), 51..=100 take 2/3 (50 points).
        let v = average_precision(&pool(&[(0.9, true), (0.8, false), (0.7, true)], 2));
        let expected = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
        assert!((v.ap - expected).abs() < 1e-12, "{} vs {}", v.ap, expected);
    }

    #[test]
    fn aggregate_means_thresholds() {
        let all_one: BTreeMap<u32, f64> = IOU_THRESHOLDS_PCT.iter().map(|&p| (p, 1.0)).collect();
        assert_eq!(aggregate_coco(&all_one, SizeBuckets::default()).unwrap().ap_mean, 1.0);

        let mut first_only: BTreeMap<u32, f64> =
            IOU_THRESHOLDS_PCT.iter().map(|&p| (p, 0.0)).collect();
        first_only.insert(50, 1.0);
        let r = aggregate_coco(&first_only, SizeBuckets::default()).unwrap();
        assert!((r.ap_mean - 0.1).abs() < 1e-12);
    }

    #[test]
    fn aggregate_rejects_missing_threshold() {
        let mut m: BTreeMap<u32, f64> = IOU_THRESHOLDS_PCT.iter().map(|&p| (p, 1.0)).collect();
        m.remove(&75);
        assert!(aggregate_coco(&m, SizeBuckets::default()).is_err());
    }

    #[test]
    fn evaluate_empty_is_flagged_zero() {
        let r = evaluate_pairs(&[]);
        assert_eq!(r.ap_mean, 0.0);
        assert!(r.flags.iter().any(|f| f == "no_ground_truth"));
    }

    #[test]
    fn evaluate_perfect_predictions() {
        let gts = DetectionSet::new(0, vec![BBox::gt(0.0, 0.0, 10.0, 10.0, 0)]);
        let preds = DetectionSet::new(0, vec![BBox::pred(0.0, 0.0, 10.0, 10.0, 0, 0.9)]);
        let r = evaluate_pairs(&[EvalPair {
            preds: &preds,
            gts: &gts,
        }]);
        assert_eq!(r.ap_mean, 1.0);
        assert_eq!(r.ap_small, 1.0);
        assert!(r.flags.iter().any(|f| f == "empty_bucket_large"));
    }

    #[test]
    fn zero_gt_class_excluded_from_mean() {
        // class 1 has only a false positive and no gt: must not drag the mean down
        let gts = DetectionSet::new(0, vec![BBox::gt(0.0, 0.0, 10.0, 10.0, 0)]);
        let preds = DetectionSet::new(
            0,
            vec![
                BBox::pred(0.0, 0.0, 10.0, 10.0, 0, 0.9),
                BBox::pred(20.0, 20.0, 30.0, 30.0, 1, 0.95),
            ],
        );
        let r = evaluate_pairs(&[EvalPair {
            preds: &preds,
            gts: &gts,
        }]);
        assert_eq!(r.ap_mean, 1.0);
    }
}
