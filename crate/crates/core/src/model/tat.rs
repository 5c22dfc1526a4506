//! Temporal cross-attention layer over 3D windows.
//!
//! Queries are future slots, keys/values are past+current slots. Each query
//! window attends to every key frame at the same spatial block; the logits
//! carry `QKᵀ/√d + E[dt, dh, dw]` and keys later than the query are masked.

use super::config::ModelConfig;
use super::params::{ModelParams, ParamVars};
use super::rtpe::{self, RtpeGeometry};
use super::window::{self, WindowLayout};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Temporal placement of query and key frames on the shared spatial grid.
#[derive(Debug, Clone, Copy)]
pub struct TatGeometry<'a> {
    pub grid: (usize, usize),
    /// Relative frame index of each query frame.
    pub query_times: &'a [i64],
    /// Relative frame index of each key frame.
    pub key_times: &'a [i64],
}

#[cfg_attr(not(test), allow(dead_code))]
pub(crate) struct TatOutput {
    pub out: Var,
    /// `[nWin, heads, nq, nk]` post-softmax weights.
    pub attention: Var,
    pub key_slots: Vec<Option<usize>>,
    pub layout: WindowLayout,
}

struct AttentionIndex {
    key_slots: Vec<Option<usize>>,
    bias_rows: Vec<Option<usize>>,
    mask: Vec<f64>,
    nk: usize,
}

fn attention_index(
    layout: &WindowLayout,
    geom: &TatGeometry<'_>,
    rtpe: Option<&RtpeGeometry>,
) -> Result<AttentionIndex> {
    let (gh, gw) = geom.grid;
    let win = layout.cfg;
    let tk = geom.key_times.len();
    let nk = tk * win.h * win.w;
    let nq = layout.tokens_per_window();
    let nwin = layout.num_windows();

    let mut key_slots = Vec::with_capacity(nwin * nk);
    for w in 0..nwin {
        let (_, bh, bw) = layout.block_of(w);
        for kt in 0..tk {
            for ih in 0..win.h {
                for iw in 0..win.w {
                    let (ph, pw) = (bh * win.h + ih, bw * win.w + iw);
                    key_slots.push((ph < gh && pw < gw).then(|| (kt * gh + ph) * gw + pw));
                }
            }
        }
    }

    let mut bias_rows = Vec::with_capacity(nwin * nq * nk);
    let mut mask = Vec::with_capacity(nwin * nq * nk);
    for w in 0..nwin {
        for qi in 0..nq {
            let q = layout.slots[w * nq + qi].map(|p| layout.pos_of(p));
            for ki in 0..nk {
                let Some(kflat) = key_slots[w * nk + ki] else {
                    bias_rows.push(None);
                    mask.push(f64::NEG_INFINITY);
                    continue;
                };
                let Some(q) = q else {
                    bias_rows.push(None);
                    mask.push(0.0);
                    continue;
                };
                let (kt, kh, kw) = (kflat / (gh * gw), (kflat / gw) % gh, kflat % gw);
                let dt = geom.query_times[q.t] - geom.key_times[kt];
                let dh = q.h as i64 - kh as i64;
                let dw = q.w as i64 - kw as i64;
                let row = match rtpe {
                    Some(g) => g.index(dt, dh, dw)?,
                    None => (dt >= 0).then_some(0),
                };
                match row {
                    Some(r) => {
                        bias_rows.push(rtpe.map(|_| r));
                        mask.push(0.0);
                    }
                    None => {
                        bias_rows.push(None);
                        mask.push(f64::NEG_INFINITY);
                    }
                }
            }
        }
    }
    Ok(AttentionIndex {
        key_slots,
        bias_rows,
        mask,
        nk,
    })
}

/// One attention layer on the tape. `queries` is `[Tq·H·W, C]`, `keys` and
/// `values` are `[Tk·H·W, C]`; returns updated queries of the same shape.
pub(crate) fn tat_layer_var(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    layer: usize,
    queries: Var,
    keys: Var,
    values: Var,
    geom: &TatGeometry<'_>,
    rtpe: Option<(Var, &RtpeGeometry)>,
) -> Result<TatOutput> {
    let (gh, gw) = geom.grid;
    let c = cfg.channels;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let tq = geom.query_times.len();
    let tk = geom.key_times.len();
    if tape.shape(queries) != [tq * gh * gw, c] {
        return Err(Error::shape("tat queries", tape.shape(queries), &[tq * gh * gw, c]));
    }
    for v in [keys, values] {
        if tape.shape(v) != [tk * gh * gw, c] {
            return Err(Error::shape("tat keys/values", tape.shape(v), &[tk * gh * gw, c]));
        }
    }

    let layout = WindowLayout::new(tq, gh, gw, cfg.window)?;
    let idx = attention_index(&layout, geom, rtpe.map(|(_, g)| g))?;
    let nwin = layout.num_windows();
    let nq = layout.tokens_per_window();
    let nk = idx.nk;
    let p = |s: &str| format!("neck.{layer}.{s}");

    let qn = tape.layer_norm(queries, pv.get(&p("ln1.g"))?, pv.get(&p("ln1.b"))?, cfg.ln_eps)?;
    let q = tape.linear(qn, pv.get(&p("q.w"))?, pv.get(&p("q.b"))?)?;
    let k = tape.linear(keys, pv.get(&p("k.w"))?, pv.get(&p("k.b"))?)?;
    let v = tape.linear(values, pv.get(&p("v.w"))?, pv.get(&p("v.b"))?)?;

    let q = window::partition_var(tape, q, &layout)?;
    let q = tape.reshape(q, &[nwin, nq, heads, dh])?;
    let q = tape.permute(q, &[0, 2, 1, 3])?;

    let k = tape.gather(k, idx.key_slots.clone())?;
    let k = tape.reshape(k, &[nwin, nk, heads, dh])?;
    let kt = tape.permute(k, &[0, 2, 3, 1])?;

    let v = tape.gather(v, idx.key_slots.clone())?;
    let v = tape.reshape(v, &[nwin, nk, heads, dh])?;
    let v = tape.permute(v, &[0, 2, 1, 3])?;

    let logits = tape.matmul(q, kt)?;
    let mut logits = tape.scale(logits, 1.0 / (dh as f64).sqrt())?;
    if let Some((table, _)) = rtpe {
        let bias = tape.gather(table, idx.bias_rows)?;
        let bias = tape.reshape(bias, &[nwin, nq, nk, heads])?;
        let bias = tape.permute(bias, &[0, 3, 1, 2])?;
        logits = tape.add(logits, bias)?;
    }
    if idx.mask.iter().any(|&m| m != 0.0) {
        let mut full = Vec::with_capacity(nwin * heads * nq * nk);
        for w in 0..nwin {
            let block = &idx.mask[w * nq * nk..(w + 1) * nq * nk];
            for _ in 0..heads {
                full.extend_from_slice(block);
            }
        }
        let mask = tape.constant(Tensor::new(vec![nwin, heads, nq, nk], full)?);
        logits = tape.add(logits, mask)?;
    }
    let attention = tape.softmax(logits)?;

    let ctx = tape.matmul(attention, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[nwin * nq, c])?;
    let ctx = window::reverse_var(tape, ctx, &layout)?;
    let o = tape.linear(ctx, pv.get(&p("o.w"))?, pv.get(&p("o.b"))?)?;
    let x = tape.add(queries, o)?;

    let h = tape.layer_norm(x, pv.get(&p("ln2.g"))?, pv.get(&p("ln2.b"))?, cfg.ln_eps)?;
    let h = tape.linear(h, pv.get(&p("mlp1.w"))?, pv.get(&p("mlp1.b"))?)?;
    let h = tape.gelu(h)?;
    let h = tape.linear(h, pv.get(&p("mlp2.w"))?, pv.get(&p("mlp2.b"))?)?;
    let out = tape.add(x, h)?;

    Ok(TatOutput {
        out,
        attention,
        key_slots: idx.key_slots,
        layout,
    })
}

/// Tensor-level attention layer.
///
/// `queries` is `[Tq, H', W', C]`, `keys`/`values` are `[Tk, H', W', C]`;
/// `query_times`/`key_times` give the relative frame index of each slice.
/// The bias table range is derived from the time lists.
pub fn tat_layer(
    params: &ModelParams,
    layer: usize,
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    query_times: &[i64],
    key_times: &[i64],
) -> Result<Tensor> {
    let cfg = &params.config;
    let &[tq, gh, gw, c] = queries.shape() else {
        return Err(Error::shape("tat_layer", queries.shape(), &[0, 0, 0, 0]));
    };
    if tq != query_times.len() || keys.shape()[0] != key_times.len() {
        return Err(Error::Contract("time lists do not match tensor extents".into()));
    }
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let q = tape.constant(queries.reshape(&[tq * gh * gw, c])?);
    let k = tape.constant(keys.reshape(&[keys.numel() / c, c])?);
    let v = tape.constant(values.reshape(&[values.numel() / c, c])?);
    let geom = TatGeometry {
        grid: (gh, gw),
        query_times,
        key_times,
    };
    let t_max = query_times.iter().max().copied().unwrap_or(0) - key_times.iter().min().copied().unwrap_or(0);
    let rg = RtpeGeometry::new(t_max.max(0), cfg.window)?;
    let table = if cfg.use_rtpe {
        Some(rtpe::table_var(&mut tape, &pv, layer, &rg)?)
    } else {
        None
    };
    let out = tat_layer_var(&mut tape, &pv, cfg, layer, q, k, v, &geom, table.map(|t| (t, &rg)))?;
    tape.value(out.out).reshape(queries.shape())
}
