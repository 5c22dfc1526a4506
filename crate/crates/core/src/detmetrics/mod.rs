//! Detection metrics: IoU, greedy matching, interpolated AP and COCO-style
//! aggregation. Everything here is a pure function of its inputs.

mod ap;
mod bbox;
mod matching;

pub use ap::{
    aggregate_coco, average_precision, evaluate_pairs, recall_level, threshold_value, APReport,
    ApValue, EvalPair, MatchPool, SizeBuckets, IOU_THRESHOLDS_PCT, MEDIUM_AREA_MAX,
    RECALL_POINTS, SMALL_AREA_MAX,
};
pub use bbox::{BBox, DetectionSet};
pub use matching::{iou, match_greedy, match_greedy_with_ignore, Matching};
pub(crate) use matching::iou_unchecked;
