//! Fixtures shared by the benchmarks.

use sapkit_core::detmetrics::{BBox, DetectionSet};

/// `frames` frames of `per_frame` ground truths on a jittered grid, with one
/// shifted prediction per ground truth plus a false positive.
pub fn synthetic_pairs(frames: usize, per_frame: usize) -> Vec<(DetectionSet, DetectionSet)> {
    (0..frames)
        .map(|f| {
            let mut gts = Vec::with_capacity(per_frame);
            let mut preds = Vec::with_capacity(per_frame + 1);
            for i in 0..per_frame {
                let x = (i % 8) as f64 * 40.0 + (f % 5) as f64;
                let y = (i / 8) as f64 * 40.0 + (f % 3) as f64;
                let class = (i % 3) as u32;
                gts.push(BBox::gt(x, y, x + 24.0, y + 20.0, class));
                let d = ((i * 7 + f) % 9) as f64 - 4.0;
                let score = 0.3 + 0.7 * (((i * 31 + f * 17) % 100) as f64 / 100.0);
                preds.push(BBox::pred(x + d, y - d, x + 24.0 + d, y + 20.0, class, score));
            }
            preds.push(BBox::pred(500.0, 500.0, 520.0, 520.0, 0, 0.95));
            (
                DetectionSet::new(f as i64, preds),
                DetectionSet::new(f as i64, gts),
            )
        })
        .collect()
}
