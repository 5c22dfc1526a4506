use super::bbox::BBox;
use crate::error::Result;

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

/// IoU without validation; degenerate inputs yield 0.
pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let ih = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || !union.is_finite() {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Result of matching one frame's predictions against its ground truth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Matching {
    /// `(pred_idx, gt_idx)` in score order; `None` marks a false positive.
    pub pairs: Vec<(usize, Option<usize>)>,
    pub unmatched_gts: Vec<usize>,
    /// Predictions that matched an ignored ground truth (or, when an area
    /// range is active, unmatched predictions outside it).
    pub ignored_preds: Vec<usize>,
}

impl Matching {
    pub fn matched_gt(&self, pred_idx: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|(p, _)| *p == pred_idx)
            .and_then(|(_, g)| *g)
    }

    pub fn true_positives(&self) -> usize {
        self.pairs.iter().filter(|(_, g)| g.is_some()).count()
    }
}

/// Indices of `boxes` in descending score order; ties keep insertion order.
pub(crate) fn score_order(boxes: &[BBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].rank_score().total_cmp(&boxes[a].rank_score()));
    order
}

/// Greedy class-aware matching in descending score order.
///
/// Each prediction takes the unmatched same-class ground truth with the
/// highest IoU, provided it reaches `iou_threshold`. Degenerate boxes never
/// match.
pub fn match_greedy(preds: &[BBox], gts: &[BBox], iou_threshold: f64) -> Matching {
    match_greedy_with_ignore(preds, gts, &vec![false; gts.len()], iou_threshold)
}

/// COCO-style variant where some ground truths are marked ignorable.
///
/// A prediction prefers a non-ignored ground truth; it only falls back to an
/// ignored one when no regular candidate qualifies, in which case the
/// prediction is reported in `ignored_preds` rather than as a pair.
pub fn match_greedy_with_ignore(
    preds: &[BBox],
    gts: &[BBox],
    gt_ignore: &[bool],
    iou_threshold: f64,
) -> Matching {
    debug_assert_eq!(gts.len(), gt_ignore.len());
    let mut taken = vec![false; gts.len()];
    let mut out = Matching::default();

    for p in score_order(preds) {
        let pred = &preds[p];
        let mut best: Option<(usize, f64)> = None;
        let mut best_ignored: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class_id != pred.class_id {
                continue;
            }
            let v = iou_unchecked(pred, gt);
            if v < iou_threshold {
                continue;
            }
            let slot = if gt_ignore[g] {
                &mut best_ignored
            } else {
                &mut best
            };
            if slot.is_none_or(|(_, b)| v > b) {
                *slot = Some((g, v));
            }
        }
        match (best, best_ignored) {
            (Some((g, _)), _) => {
                taken[g] = true;
                out.pairs.push((p, Some(g)));
            }
            (None, Some((g, _))) => {
                taken[g] = true;
                out.ignored_preds.push(p);
            }
            (None, None) => out.pairs.push((p, None)),
        }
    }
    out.unmatched_gts = (0..gts.len())
        .filter(|&g| !taken[g] && !gt_ignore[g])
        .collect();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::gt(x0, y0, x1, y1, 0)
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = b(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
    }

    #[test]
    fn iou_partial_overlap() {
        // inter = 2, union = 4 + 4 - 2 = 6
        let v = iou(&b(0.0, 0.0, 2.0, 2.0), &b(1.0, 0.0, 3.0, 2.0)).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_rejects_degenerate() {
        let flat = b(0.0, 0.0, 0.0, 1.0);
        assert!(iou(&flat, &b(0.0, 0.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn touching_edges_do_not_overlap() {
        assert_eq!(iou(&b(0.0, 0.0, 1.0, 1.0), &b(1.0, 0.0, 2.0, 1.0)).unwrap(), 0.0);
    }

    #[test]
    fn empty_predictions_leave_gt_unmatched() {
        let m = match_greedy(&[], &[b(0.0, 0.0, 1.0, 1.0)], 0.5);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_gts, vec![0]);
    }

    #[test]
    fn threshold_satisfied_matches() {
        // IoU = 6/10 = 0.6
        let gt = b(0.0, 0.0, 8.0, 1.0);
        let pred = BBox::pred(2.0, 0.0, 10.0, 1.0, 0, 0.9);
        let v = iou(&gt, &pred).unwrap();
        assert!((v - 0.6).abs() < 1e-12);
        let m = match_greedy(&[pred], &[gt], 0.5);
        assert_eq!(m.pairs, vec![(0, Some(0))]);
        assert!(m.unmatched_gts.is_empty());
    }

    #[test]
    fn higher_score_wins_single_gt() {
        let gt = b(0.0, 0.0, 10.0, 10.0);
        // Lower-score prediction listed first; the greedy pass still visits by score.
        let preds = [
            BBox::pred(0.0, 0.0, 10.0, 9.0, 0, 0.8),
            BBox::pred(0.0, 0.0, 10.0, 8.0, 0, 0.9),
        ];
        // Enumerate both visit orders: the one that is score-descending assigns
        // the gt to index 1.
        let m = match_greedy(&preds, &[gt], 0.5);
        assert_eq!(m.pairs, vec![(1, Some(0)), (0, None)]);
    }

    #[test]
    fn cross_class_never_matches() {
        let gt = BBox::gt(0.0, 0.0, 1.0, 1.0, 1);
        let pred = BBox::pred(0.0, 0.0, 1.0, 1.0, 0, 0.9);
        let m = match_greedy(&[pred], &[gt], 0.5);
        assert_eq!(m.pairs, vec![(0, None)]);
        assert_eq!(m.unmatched_gts, vec![0]);
    }

    #[test]
    fn equal_scores_keep_insertion_order() {
        let gt = b(0.0, 0.0, 1.0, 1.0);
        let preds = [
            BBox::pred(0.0, 0.0, 1.0, 1.0, 0, 0.5),
            BBox::pred(0.0, 0.0, 1.0, 1.0, 0, 0.5),
        ];
        let m = match_greedy(&preds, &[gt], 0.5);
        assert_eq!(m.pairs, vec![(0, Some(0)), (1, None)]);
    }

    #[test]
    fn picks_highest_iou_gt() {
        let gts = [b(0.0, 0.0, 10.0, 10.0), b(1.0, 0.0, 11.0, 10.0)];
        let pred = BBox::pred(1.0, 0.0, 11.0, 10.0, 0, 0.7);
        let m = match_greedy(&[pred], &gts, 0.5);
        assert_eq!(m.pairs, vec![(0, Some(1))]);
        assert_eq!(m.unmatched_gts, vec![0]);
    }

    #[test]
    fn ignored_gt_absorbs_prediction() {
        let gts = [b(0.0, 0.0, 10.0, 10.0)];
        let pred = BBox::pred(0.0, 0.0, 10.0, 10.0, 0, 0.7);
        let m = match_greedy_with_ignore(&[pred], &gts, &[true], 0.5);
        assert!(m.pairs.is_empty());
        assert_eq!(m.ignored_preds, vec![0]);
        assert!(m.unmatched_gts.is_empty());
    }
}
