//! Detection loss and SGD updates for the forecaster.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::forecaster::{backbone_var, neck_var};
use super::head::head_var;
use super::params::{ModelParams, ParamVars};
use super::proposal::TemporalProposal;
use crate::detmetrics::BBox;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Weights of the loss terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Multiplier on the objectness BCE of cells that hold an object.
    pub obj_pos_weight: f64,
    pub box_weight: f64,
    pub class_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            obj_pos_weight: 1.0,
            box_weight: 1.0,
            class_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
    /// Rescale the gradient when its global L2 norm exceeds this.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.0,
            grad_clip: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be > 0".into()));
        }
        Ok(())
    }
}

/// One training example: past frames in `proposal.past` order, the current
/// frame and ground truth for every future offset.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub past: Vec<Tensor>,
    pub current: Tensor,
    pub proposal: TemporalProposal,
    pub targets: Vec<Vec<BBox>>,
}

/// Dense per-cell targets for one horizon; `N = H'·W'`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTargets {
    /// `[1, N]` 1 on cells that own an object.
    pub objectness: Tensor,
    /// `[1, N]`
    pub obj_weight: Tensor,
    /// `[4, N]` (dx, dy, w, h) in patch units.
    pub boxes: Tensor,
    /// `[4, N]` 1 on positive cells.
    pub box_mask: Tensor,
    /// `[N, classes]`, one-hot rows on positive cells.
    pub classes: Tensor,
    pub positives: usize,
}

/// Each box is owned by the cell containing its center; when two centers
/// share a cell the larger box wins.
pub fn assign_targets(boxes: &[BBox], grid: (usize, usize), cfg: &ModelConfig, loss: &LossConfig) -> Result<CellTargets> {
    let (gh, gw) = grid;
    let n = gh * gw;
    let s = cfg.patch as f64;
    let mut owner: Vec<Option<&BBox>> = vec![None; n];
    for b in boxes {
        b.validate()?;
        if b.class_id as usize >= cfg.num_classes {
            return Err(Error::Contract(format!("class {} out of range", b.class_id)));
        }
        let (cx, cy) = b.center();
        let col = ((cx / s).floor().max(0.0) as usize).min(gw - 1);
        let row = ((cy / s).floor().max(0.0) as usize).min(gh - 1);
        let slot = &mut owner[row * gw + col];
        if slot.is_none_or(|o| b.area() > o.area()) {
            *slot = Some(b);
        }
    }
    let mut obj = vec![0.0; n];
    let mut weight = vec![1.0; n];
    let mut tgt = vec![0.0; 4 * n];
    let mut mask = vec![0.0; 4 * n];
    let mut cls = vec![0.0; n * cfg.num_classes];
    let mut positives = 0;
    for (cell, b) in owner.iter().enumerate() {
        let Some(b) = b else { continue };
        positives += 1;
        let (row, col) = ((cell / gw) as f64, (cell % gw) as f64);
        let (cx, cy) = b.center();
        obj[cell] = 1.0;
        weight[cell] = loss.obj_pos_weight;
        let vals = [cx / s - (col + 0.5), cy / s - (row + 0.5), b.width() / s, b.height() / s];
        for (k, v) in vals.into_iter().enumerate() {
            tgt[k * n + cell] = v;
            mask[k * n + cell] = 1.0;
        }
        cls[cell * cfg.num_classes + b.class_id as usize] = 1.0;
    }
    Ok(CellTargets {
        objectness: Tensor::new(vec![1, n], obj)?,
        obj_weight: Tensor::new(vec![1, n], weight)?,
        boxes: Tensor::new(vec![4, n], tgt)?,
        box_mask: Tensor::new(vec![4, n], mask)?,
        classes: Tensor::new(vec![n, cfg.num_classes], cls)?,
        positives,
    })
}

/// L1 box term on positive cells: `sum |pred - target| / max(1, positives)`.
pub(crate) fn box_l1(tape: &mut Tape, pred: Var, targets: &CellTargets) -> Result<Var> {
    let t = tape.constant(targets.boxes.clone());
    let m = tape.constant(targets.box_mask.clone());
    let d = tape.sub(pred, t)?;
    let d = tape.abs(d)?;
    let d = tape.mul(d, m)?;
    let s = tape.sum(d)?;
    tape.scale(s, 1.0 / targets.positives.max(1) as f64)
}

/// Loss of one horizon from raw head outputs `[N, 5 + classes]`.
pub(crate) fn horizon_loss(
    tape: &mut Tape,
    raw: Var,
    targets: &CellTargets,
    cfg: &ModelConfig,
    loss: &LossConfig,
) -> Result<Var> {
    let k = cfg.head_outputs();
    let raw_t = tape.transpose_last(raw)?;
    let obj = tape.gather(raw_t, vec![Some(0)])?;
    let bce = tape.bce_with_logits(obj, targets.objectness.clone())?;
    let w = tape.constant(targets.obj_weight.clone());
    let bce = tape.mul(bce, w)?;
    let mut total = tape.mean(bce)?;

    let boxes = tape.gather(raw_t, (1..5).map(Some).collect())?;
    let l1 = box_l1(tape, boxes, targets)?;
    let l1 = tape.scale(l1, loss.box_weight)?;
    total = tape.add(total, l1)?;

    if cfg.num_classes > 1 {
        let cls = tape.gather(raw_t, (5..k).map(Some).collect())?;
        let cls = tape.transpose_last(cls)?;
        let logp = tape.log_softmax(cls)?;
        let onehot = tape.constant(targets.classes.clone());
        let picked = tape.mul(logp, onehot)?;
        let s = tape.sum(picked)?;
        let ce = tape.scale(s, -loss.class_weight / targets.positives.max(1) as f64)?;
        total = tape.add(total, ce)?;
    }
    Ok(total)
}

/// Mean loss over the sample's horizons.
pub(crate) fn sample_loss(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    loss: &LossConfig,
    sample: &TrainSample,
) -> Result<Var> {
    let prop = &sample.proposal;
    prop.validate()?;
    if sample.past.len() != prop.past.len() || sample.targets.len() != prop.future.len() {
        return Err(Error::Contract("training sample does not match its proposal".into()));
    }
    let (cur, grid) = backbone_var(tape, pv, cfg, &sample.current)?;
    let past = sample
        .past
        .iter()
        .map(|img| Ok(backbone_var(tape, pv, cfg, img)?.0))
        .collect::<Result<Vec<_>>>()?;
    let neck = neck_var(tape, pv, cfg, cur, &past, prop, grid)?;
    let raw = head_var(tape, pv, neck.out)?;
    let n = grid.0 * grid.1;
    let mut total: Option<Var> = None;
    for (j, boxes) in sample.targets.iter().enumerate() {
        let rows = tape.gather(raw, (j * n..(j + 1) * n).map(Some).collect())?;
        let targets = assign_targets(boxes, grid, cfg, loss)?;
        let l = horizon_loss(tape, rows, &targets, cfg, loss)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    tape.scale(total.expect("non-empty future"), 1.0 / prop.future.len() as f64)
}

fn batch_loss(tape: &mut Tape, pv: &ParamVars, cfg: &ModelConfig, loss: &LossConfig, batch: &[TrainSample]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut total: Option<Var> = None;
    for s in batch {
        let l = sample_loss(tape, pv, cfg, loss, s)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)
}

/// Mean loss over `batch` without updating anything.
pub fn evaluate_loss(params: &ModelParams, loss: &LossConfig, batch: &[TrainSample]) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let l = batch_loss(&mut tape, &pv, &params.config, loss, batch)?;
    Ok(tape.value(l).item())
}

/// SGD with optional momentum and global-norm clipping.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: OptimizerConfig,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: BTreeMap::new(),
        })
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let norm = grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm {norm}")));
        }
        let clip = match self.config.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let (lr, mu) = (self.config.lr, self.config.momentum);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if mu > 0.0 {
                let v = self
                    .velocity
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(g.shape()));
                for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                    *vi = mu * *vi + clip * gi;
                    *pi -= lr * *vi;
                }
            } else {
                for (pi, gi) in p.data_mut().iter_mut().zip(g.data()) {
                    *pi -= lr * clip * gi;
                }
            }
        }
        Ok(())
    }
}

/// Forward, backward and one optimizer update. Returns the batch loss
/// before the update.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut Sgd,
    loss: &LossConfig,
    batch: &[TrainSample],
    batch_id: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, true);
    let l = batch_loss(&mut tape, &pv, &params.config, loss, batch)?;
    let value = tape.value(l).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {value} at batch {batch_id}")));
    }
    let grads = tape.backward(l)?;
    let grads = params.collect_grads(&pv, &grads);
    opt.step(params, &grads)
        .map_err(|e| Error::Numeric(format!("batch {batch_id}: {e}")))?;
    Ok(value)
}
