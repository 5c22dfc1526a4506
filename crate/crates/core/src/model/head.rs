use super::config::ModelConfig;
use super::forecaster::FeatureMap;
use super::params::{ModelParams, ParamVars};
use crate::detmetrics::{iou_unchecked, BBox, DetectionSet};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// Raw per-cell predictions `[H'·W', 5 + classes]` on the tape.
pub(crate) fn head_var(tape: &mut Tape, pv: &ParamVars, features: Var) -> Result<Var> {
    tape.linear(features, pv.get("head.w")?, pv.get("head.b")?)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Class-wise greedy NMS: boxes are visited by descending score and dropped
/// when their IoU with an already kept box of the same class exceeds
/// `iou_threshold`.
pub fn nms(boxes: &[BBox], iou_threshold: f64) -> Vec<BBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].rank_score().total_cmp(&boxes[a].rank_score()));
    let mut kept: Vec<BBox> = Vec::new();
    for i in order {
        let b = &boxes[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == b.class_id && iou_unchecked(k, b) > iou_threshold);
        if !suppressed {
            kept.push(*b);
        }
    }
    kept
}

/// Decode raw head outputs into thresholded, NMS-filtered boxes.
///
/// Cell `(r, c)` predicts its center as `((c + 0.5 + dx)·s, (r + 0.5 + dy)·s)`
/// and its extent as `(w·s, h·s)` where `s` is the patch stride.
pub fn decode_head(raw: &[f64], grid: (usize, usize), cfg: &ModelConfig, frame_index: i64) -> Result<DetectionSet> {
    let k = cfg.head_outputs();
    let (gh, gw) = grid;
    if raw.len() != gh * gw * k {
        return Err(Error::shape("decode_head", &[raw.len()], &[gh * gw * k]));
    }
    let s = cfg.patch as f64;
    let (img_w, img_h) = (gw as f64 * s, gh as f64 * s);
    let mut boxes = Vec::new();
    for cell in 0..gh * gw {
        let out = &raw[cell * k..(cell + 1) * k];
        let score = sigmoid(out[0]);
        if !(score >= cfg.score_threshold) {
            continue;
        }
        let (row, col) = ((cell / gw) as f64, (cell % gw) as f64);
        let cx = (col + 0.5 + out[1]) * s;
        let cy = (row + 0.5 + out[2]) * s;
        let (w, h) = (out[3] * s, out[4] * s);
        let x0 = (cx - 0.5 * w).clamp(0.0, img_w);
        let x1 = (cx + 0.5 * w).clamp(0.0, img_w);
        let y0 = (cy - 0.5 * h).clamp(0.0, img_h);
        let y1 = (cy + 0.5 * h).clamp(0.0, img_h);
        if !(x1 - x0 > 1e-6 && y1 - y0 > 1e-6) {
            continue;
        }
        let logits = &out[5..];
        let class_id = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0 as u32;
        boxes.push(BBox::pred(x0, y0, x1, y1, class_id, score));
    }
    Ok(DetectionSet::new(frame_index, nms(&boxes, cfg.nms_iou)))
}

/// Dense per-cell detector over one feature map.
pub fn toy_head(params: &ModelParams, feature: &FeatureMap) -> Result<DetectionSet> {
    let (gh, gw, c) = feature.dims();
    if c != params.config.channels {
        return Err(Error::shape("toy_head", feature.grid.shape(), &[gh, gw, params.config.channels]));
    }
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let f = tape.constant(feature.grid.reshape(&[gh * gw, c])?);
    let raw = head_var(&mut tape, &pv, f)?;
    decode_head(tape.value(raw).data(), (gh, gw), &params.config, feature.source_index)
}
