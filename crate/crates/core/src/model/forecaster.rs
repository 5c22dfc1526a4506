//! Backbone, attention neck and forecast entry points.

use super::config::{ModelConfig, ValueMode};
use super::head::{decode_head, head_var};
use super::params::{ModelParams, ParamVars};
use super::proposal::TemporalProposal;
use super::rtpe::{self, RtpeGeometry};
use super::tat::{tat_layer_var, TatGeometry};
use crate::detmetrics::DetectionSet;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Backbone output for one frame, stored channel-last as `[H', W', C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// Frame index the features were computed from. Absolute inside buffers,
    /// relative to the current frame when passed to [`forecast`].
    pub source_index: i64,
    pub grid: Tensor,
}

impl FeatureMap {
    pub fn new(source_index: i64, grid: Tensor) -> Result<Self> {
        if grid.rank() != 3 {
            return Err(Error::shape("FeatureMap", grid.shape(), &[0, 0, 0]));
        }
        Ok(Self { source_index, grid })
    }

    /// `(H', W', C)`
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.grid.shape();
        (s[0], s[1], s[2])
    }

    pub fn with_source_index(&self, source_index: i64) -> Self {
        Self {
            source_index,
            grid: self.grid.clone(),
        }
    }
}

fn image_dims(cfg: &ModelConfig, image: &Tensor) -> Result<(usize, usize)> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape("image", image.shape(), &[cfg.image_channels, 0, 0]));
    };
    if c != cfg.image_channels {
        return Err(Error::shape("image", image.shape(), &[cfg.image_channels, h, w]));
    }
    if h == 0 || w == 0 || h % cfg.patch != 0 || w % cfg.patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not a positive multiple of patch {}",
            cfg.patch
        )));
    }
    Ok((h / cfg.patch, w / cfg.patch))
}

/// Pixel gather that turns a `[C, H, W]` image into `[P, C·s·s]` patch rows.
/// Within a patch the order is channel, then row, then column.
fn patch_index(cfg: &ModelConfig, h: usize, w: usize) -> Vec<Option<usize>> {
    let s = cfg.patch;
    let (gh, gw) = (h / s, w / s);
    let mut idx = Vec::with_capacity(gh * gw * cfg.patch_len());
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..cfg.image_channels {
                for dy in 0..s {
                    for dx in 0..s {
                        idx.push(Some(c * h * w + (py * s + dy) * w + (px * s + dx)));
                    }
                }
            }
        }
    }
    idx
}

/// Patch-embedding backbone on the tape; returns `[H'·W', C]` and the grid.
pub(crate) fn backbone_var(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    image: &Tensor,
) -> Result<(Var, (usize, usize))> {
    let (gh, gw) = image_dims(cfg, image)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let pixels = tape.constant(image.reshape(&[image.numel(), 1])?);
    let patches = tape.gather(pixels, patch_index(cfg, h, w))?;
    let patches = tape.reshape(patches, &[gh * gw, cfg.patch_len()])?;
    let f = tape.linear(patches, pv.get("backbone.w")?, pv.get("backbone.b")?)?;
    Ok((f, (gh, gw)))
}

/// Strided patch embedding: one linear map per non-overlapping `s×s` patch.
pub fn toy_backbone(params: &ModelParams, image: &Tensor) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let (f, (gh, gw)) = backbone_var(&mut tape, &pv, &params.config, image)?;
    let grid = tape.value(f).reshape(&[gh, gw, params.config.channels])?;
    FeatureMap::new(0, grid)
}

pub(crate) struct NeckOutput {
    /// `[|future|·H'·W', C]`, horizon-major.
    pub out: Var,
}

/// Neck on the tape. `past` follows `proposal.past` order; each entry and
/// `current` are `[H'·W', C]`.
pub(crate) fn neck_var(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    current: Var,
    past: &[Var],
    proposal: &TemporalProposal,
    grid: (usize, usize),
) -> Result<NeckOutput> {
    proposal.validate()?;
    if past.len() != proposal.past.len() {
        return Err(Error::Contract(format!(
            "{} past features for proposal {:?}",
            past.len(),
            proposal.past
        )));
    }
    let n = grid.0 * grid.1;
    let tq = proposal.future.len();
    let replicate: Vec<Option<usize>> = (0..tq).flat_map(|_| (0..n).map(Some)).collect();

    if !cfg.use_tat {
        let latest = *past.last().expect("validated non-empty");
        let motion = tape.sub(current, latest)?;
        let delta = tape.linear(motion, pv.get("fuse.w")?, pv.get("fuse.b")?)?;
        let fused = tape.add(current, delta)?;
        let out = tape.gather(fused, replicate)?;
        return Ok(NeckOutput { out });
    }

    let mut key_parts: Vec<Var> = past.to_vec();
    key_parts.push(current);
    let keys = tape.concat_rows(&key_parts)?;
    let mut value_parts = Vec::with_capacity(key_parts.len());
    for &f in &key_parts {
        value_parts.push(match cfg.value_mode {
            ValueMode::PresentMinusPast => tape.sub(current, f)?,
            ValueMode::PastMinusPresent => tape.sub(f, current)?,
        });
    }
    let values = tape.concat_rows(&value_parts)?;
    let mut key_times = proposal.past.clone();
    key_times.push(0);

    let geom = TatGeometry {
        grid,
        query_times: &proposal.future,
        key_times: &key_times,
    };
    let rg = RtpeGeometry::for_proposal(proposal, cfg.window)?;
    let mut x = tape.gather(current, replicate)?;
    for l in 0..cfg.layers {
        let table = if cfg.use_rtpe {
            Some(rtpe::table_var(tape, pv, l, &rg)?)
        } else {
            None
        };
        let layer = tat_layer_var(tape, pv, cfg, l, x, keys, values, &geom, table.map(|t| (t, &rg)))?;
        x = layer.out;
    }
    Ok(NeckOutput { out: x })
}

fn check_buffered(cfg: &ModelConfig, current: &FeatureMap, buffered: &[FeatureMap], proposal: &TemporalProposal) -> Result<()> {
    proposal.validate()?;
    let got: Vec<i64> = buffered.iter().map(|f| f.source_index).collect();
    if got != proposal.past {
        return Err(Error::Contract(format!(
            "buffered features {got:?} do not match proposal past {:?}",
            proposal.past
        )));
    }
    let (gh, gw, c) = current.dims();
    if c != cfg.channels {
        return Err(Error::shape("current features", current.grid.shape(), &[gh, gw, cfg.channels]));
    }
    for f in buffered {
        if f.grid.shape() != current.grid.shape() {
            return Err(Error::shape("buffered features", f.grid.shape(), current.grid.shape()));
        }
    }
    Ok(())
}

/// Forecast future feature maps from current and buffered features.
/// `buffered[i].source_index` must equal `proposal.past[i]`.
pub fn forecast_features(
    params: &ModelParams,
    current: &FeatureMap,
    buffered: &[FeatureMap],
    proposal: &TemporalProposal,
) -> Result<Vec<FeatureMap>> {
    let cfg = &params.config;
    check_buffered(cfg, current, buffered, proposal)?;
    let (gh, gw, c) = current.dims();
    let n = gh * gw;
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let cur = tape.constant(current.grid.reshape(&[n, c])?);
    let past: Vec<Var> = buffered
        .iter()
        .map(|f| Ok(tape.constant(f.grid.reshape(&[n, c])?)))
        .collect::<Result<_>>()?;
    let neck = neck_var(&mut tape, &pv, cfg, cur, &past, proposal, (gh, gw))?;
    let data = tape.value(neck.out).data();
    proposal
        .future
        .iter()
        .enumerate()
        .map(|(j, &f)| {
            let grid = Tensor::new(vec![gh, gw, c], data[j * n * c..(j + 1) * n * c].to_vec())?;
            FeatureMap::new(f, grid)
        })
        .collect()
}

/// Result of one forecasting pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// Backbone features of the current frame (source index 0).
    pub current: FeatureMap,
    /// One detection set per future offset, `frame_index` = offset.
    pub detections: Vec<DetectionSet>,
}

/// Full pass: backbone on `image`, neck over `buffered` features, head per
/// future offset.
pub fn forecast(
    params: &ModelParams,
    image: &Tensor,
    buffered: &[FeatureMap],
    proposal: &TemporalProposal,
) -> Result<Forecast> {
    let cfg = &params.config;
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let (cur, (gh, gw)) = backbone_var(&mut tape, &pv, cfg, image)?;
    let c = cfg.channels;
    let n = gh * gw;
    let current = FeatureMap::new(0, tape.value(cur).reshape(&[gh, gw, c])?)?;
    check_buffered(cfg, &current, buffered, proposal)?;
    let past: Vec<Var> = buffered
        .iter()
        .map(|f| Ok(tape.constant(f.grid.reshape(&[n, c])?)))
        .collect::<Result<_>>()?;
    let neck = neck_var(&mut tape, &pv, cfg, cur, &past, proposal, (gh, gw))?;
    let raw = head_var(&mut tape, &pv, neck.out)?;
    let k = cfg.head_outputs();
    let data = tape.value(raw).data();
    let detections = proposal
        .future
        .iter()
        .enumerate()
        .map(|(j, &f)| decode_head(&data[j * n * k..(j + 1) * n * k], (gh, gw), cfg, f))
        .collect::<Result<_>>()?;
    Ok(Forecast { current, detections })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::head::toy_head;
    use crate::model::window::WindowConfig;
    use crate::numerics::grad_check;

    fn image(cfg: &ModelConfig, h: usize, w: usize, seed: u64) -> Tensor {
        Tensor::from_fn(&[cfg.image_channels, h, w], |i| {
            (((i as u64 * 2654435761 + seed * 97) % 1000) as f64) / 1000.0
        })
    }

    fn features(params: &ModelParams, idx: i64, seed: u64) -> FeatureMap {
        let img = image(&params.config, 32, 40, seed);
        toy_backbone(params, &img).unwrap().with_source_index(idx)
    }

    #[test]
    fn backbone_matches_naive_loops() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::init(&cfg, 3).unwrap();
        let img = image(&cfg, 16, 24, 1);
        let fm = toy_backbone(&p, &img).unwrap();
        assert_eq!(fm.dims(), (2, 3, 8));
        let w = p.get("backbone.w").unwrap();
        let s = cfg.patch;
        for py in 0..2 {
            for px in 0..3 {
                for o in 0..cfg.channels {
                    let mut acc = 0.0;
                    let mut k = 0;
                    for c in 0..3 {
                        for dy in 0..s {
                            for dx in 0..s {
                                let pix = img.data()[c * 16 * 24 + (py * s + dy) * 24 + px * s + dx];
                                acc += pix * w.data()[k * cfg.channels + o];
                                k += 1;
                            }
                        }
                    }
                    let got = fm.grid.data()[(py * 3 + px) * cfg.channels + o];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backbone_rejects_bad_sizes() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::init(&cfg, 3).unwrap();
        assert!(toy_backbone(&p, &Tensor::zeros(&[3, 12, 16])).is_err());
        assert!(toy_backbone(&p, &Tensor::zeros(&[1, 16, 16])).is_err());
    }

    #[test]
    fn forecast_is_composition_of_stages() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg, 11).unwrap();
        let prop = TemporalProposal::new(vec![-4, -1], vec![1, 3]).unwrap();
        let img = image(&cfg, 32, 40, 9);
        let buffered = vec![features(&p, -4, 1), features(&p, -1, 2)];
        let out = forecast(&p, &img, &buffered, &prop).unwrap();
        let current = toy_backbone(&p, &img).unwrap();
        assert_eq!(out.current, current);
        let future = forecast_features(&p, &current, &buffered, &prop).unwrap();
        let manual: Vec<DetectionSet> = future.iter().map(|f| toy_head(&p, f).unwrap()).collect();
        assert_eq!(out.detections, manual);
        assert_eq!(out.detections.iter().map(|d| d.frame_index).collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn zeroed_residual_branches_pass_queries_through() {
        let mut p = ModelParams::init(&ModelConfig::default(), 4).unwrap();
        p.zero_residual_branches();
        let prop = TemporalProposal::new(vec![-3, -2, -1], vec![1, 2, 5]).unwrap();
        let cur = features(&p, 0, 7);
        let buf = vec![features(&p, -3, 1), features(&p, -2, 2), features(&p, -1, 3)];
        for f in forecast_features(&p, &cur, &buf, &prop).unwrap() {
            assert_eq!(f.grid, cur.grid);
        }
    }

    #[test]
    fn buffered_must_match_proposal() {
        let p = ModelParams::init(&ModelConfig::tiny(), 4).unwrap();
        let prop = TemporalProposal::new(vec![-2, -1], vec![1]).unwrap();
        let cur = features(&p, 0, 7);
        let buf = vec![features(&p, -1, 1), features(&p, -2, 2)];
        assert!(matches!(forecast_features(&p, &cur, &buf, &prop), Err(Error::Contract(_))));
    }

    #[test]
    fn queries_are_independent_across_horizons() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg, 8).unwrap();
        let cur = features(&p, 0, 7);
        let buf = vec![features(&p, -2, 1), features(&p, -1, 2)];
        let both = TemporalProposal::new(vec![-2, -1], vec![2, 4]).unwrap();
        let only = TemporalProposal::new(vec![-2, -1], vec![2]).unwrap();
        let a = forecast_features(&p, &cur, &buf, &both).unwrap();
        let b = forecast_features(&p, &cur, &buf, &only).unwrap();
        assert!(a[0].grid.max_abs_diff(&b[0].grid) < 1e-12);
    }

    #[test]
    fn future_keys_receive_zero_attention() {
        let mut cfg = ModelConfig::tiny();
        cfg.window = WindowConfig { t: 2, h: 2, w: 2 };
        let mut p = ModelParams::init(&cfg, 2).unwrap();
        for v in p.get_mut("neck.0.rtpe2.w").unwrap().data_mut() {
            *v = 0.3;
        }
        let (gh, gw) = (3, 3);
        let n = gh * gw;
        let mut tape = Tape::new();
        let pv = p.register(&mut tape, false);
        let q = tape.constant(Tensor::from_fn(&[2 * n, 8], |i| (i as f64 * 0.37).sin()));
        let k = tape.constant(Tensor::from_fn(&[3 * n, 8], |i| (i as f64 * 0.11).cos()));
        let v = tape.constant(Tensor::from_fn(&[3 * n, 8], |i| (i as f64 * 0.05).sin()));
        // key at +2 is later than the query at +1
        let qt = [1, 3];
        let kt = [-1, 0, 2];
        let geom = TatGeometry { grid: (gh, gw), query_times: &qt, key_times: &kt };
        let rg = RtpeGeometry::new(4, cfg.window).unwrap();
        let table = rtpe::table_var(&mut tape, &pv, 0, &rg).unwrap();
        let out = tat_layer_var(&mut tape, &pv, &cfg, 0, q, k, v, &geom, Some((table, &rg))).unwrap();
        let att = tape.value(out.attention);
        let (nwin, heads, nq, nk) = (att.shape()[0], att.shape()[1], att.shape()[2], att.shape()[3]);
        let mut checked = 0;
        for w in 0..nwin {
            for h in 0..heads {
                for qi in 0..nq {
                    let Some(qpos) = out.layout.slots[w * nq + qi] else { continue };
                    let q_time = qt[qpos / n];
                    let row = &att.data()[((w * heads + h) * nq + qi) * nk..][..nk];
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    for (ki, &a) in row.iter().enumerate() {
                        if let Some(kpos) = out.key_slots[w * nk + ki] {
                            if kt[kpos / n] > q_time {
                                assert_eq!(a, 0.0);
                                checked += 1;
                            }
                        } else {
                            assert_eq!(a, 0.0);
                        }
                    }
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn rtpe_range_overflow_is_config_error() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::init(&cfg, 2).unwrap();
        let q = Tensor::zeros(&[1, 2, 2, 8]);
        let k = Tensor::zeros(&[1, 2, 2, 8]);
        // explicit table too short for dt = 6
        let mut tape = Tape::new();
        let pv = p.register(&mut tape, false);
        let rg = RtpeGeometry::new(3, cfg.window).unwrap();
        let table = rtpe::table_var(&mut tape, &pv, 0, &rg).unwrap();
        let qv = tape.constant(q.reshape(&[4, 8]).unwrap());
        let kv = tape.constant(k.reshape(&[4, 8]).unwrap());
        let geom = TatGeometry { grid: (2, 2), query_times: &[4], key_times: &[-2] };
        let r = tat_layer_var(&mut tape, &pv, &cfg, 0, qv, kv, kv, &geom, Some((table, &rg)));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    /// Objective for gradient checks: weighted sum of the neck output so that
    /// every output coordinate contributes a distinct weight.
    fn neck_objective(p: &ModelParams, name: &str, x: Var, tape: &mut Tape) -> Result<Var> {
        let mut pv = p.register(tape, false);
        pv.replace(name, x);
        let cfg = &p.config;
        let prop = TemporalProposal::new(vec![-2, -1], vec![1, 2]).unwrap();
        let n = 4;
        let cur = tape.constant(Tensor::from_fn(&[n, 8], |i| (i as f64 * 0.7).sin()));
        let p1 = tape.constant(Tensor::from_fn(&[n, 8], |i| (i as f64 * 0.3).cos()));
        let p2 = tape.constant(Tensor::from_fn(&[n, 8], |i| (i as f64 * 0.2 + 1.0).sin()));
        let neck = neck_var(tape, &pv, cfg, cur, &[p1, p2], &prop, (2, 2))?;
        let raw = head_var(tape, &pv, neck.out)?;
        let shape = tape.shape(raw).to_vec();
        let w = tape.constant(Tensor::from_fn(&shape, |i| ((i * 7 % 13) as f64 - 6.0) / 6.0));
        let y = tape.mul(raw, w)?;
        let y = tape.gelu(y)?;
        tape.sum(y)
    }

    #[test]
    fn full_tiny_model_gradients_match_finite_differences() {
        let mut p = ModelParams::init(&ModelConfig::tiny(), 21).unwrap();
        // non-trivial bias tables and norms so every path carries gradient
        for (name, t) in p.tensors.iter_mut() {
            if name.contains("rtpe2") || name.contains("ln") || name.ends_with(".b") {
                let len = t.numel();
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v += 0.1 * ((i as f64 + len as f64) * 0.9).sin();
                }
            }
            for v in t.data_mut() {
                *v *= 10.0;
            }
        }
        let names: Vec<String> = p.tensors.keys().filter(|n| !n.starts_with("backbone") && !n.starts_with("fuse")).cloned().collect();
        for name in names {
            let x = p.get(&name).unwrap().clone();
            let err = grad_check(|tape, xv| neck_objective(&p, &name, xv, tape), &x, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
