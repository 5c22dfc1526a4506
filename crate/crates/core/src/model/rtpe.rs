//! Relative temporal positional embedding: a per-head attention bias
//! `E[dt, dh, dw]` produced by a small MLP over relative coordinates.
//!
//! Only `dt >= 0` (query at or after key) has an entry; other pairs are
//! masked out of attention.

use super::proposal::TemporalProposal;
use super::params::{ModelParams, ParamVars};
use super::window::WindowConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Range of relative coordinates covered by a bias table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RtpeGeometry {
    pub t_max: i64,
    pub win_h: usize,
    pub win_w: usize,
}

impl RtpeGeometry {
    pub fn new(t_max: i64, window: WindowConfig) -> Result<Self> {
        if t_max < 0 {
            return Err(Error::Config(format!("negative RTPE range {t_max}")));
        }
        Ok(Self {
            t_max,
            win_h: window.h,
            win_w: window.w,
        })
    }

    /// Table range for a proposal: the largest future offset minus the
    /// earliest past offset.
    pub fn for_proposal(proposal: &TemporalProposal, window: WindowConfig) -> Result<Self> {
        Self::new(proposal.max_temporal_difference(), window)
    }

    fn span_h(&self) -> usize {
        2 * self.win_h - 1
    }

    fn span_w(&self) -> usize {
        2 * self.win_w - 1
    }

    pub fn len(&self) -> usize {
        (self.t_max as usize + 1) * self.span_h() * self.span_w()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row of `(dt, dh, dw)` in the table. `None` for `dt < 0` (masked);
    /// spatial offsets outside the window and `dt > t_max` are errors.
    pub fn index(&self, dt: i64, dh: i64, dw: i64) -> Result<Option<usize>> {
        if dt < 0 {
            return Ok(None);
        }
        if dt > self.t_max {
            return Err(Error::Config(format!(
                "temporal difference {dt} exceeds RTPE range {}",
                self.t_max
            )));
        }
        let (rh, rw) = (self.win_h as i64 - 1, self.win_w as i64 - 1);
        if dh.abs() > rh || dw.abs() > rw {
            return Err(Error::Contract(format!("spatial offset ({dh},{dw}) outside window")));
        }
        let ih = (dh + rh) as usize;
        let iw = (dw + rw) as usize;
        Ok(Some((dt as usize * self.span_h() + ih) * self.span_w() + iw))
    }

    /// MLP input for each table row: log-spaced `(dt, dh, dw)`.
    pub fn coordinates(&self) -> Tensor {
        let (rh, rw) = (self.win_h as i64 - 1, self.win_w as i64 - 1);
        let mut data = Vec::with_capacity(self.len() * 3);
        for dt in 0..=self.t_max {
            for dh in -rh..=rh {
                for dw in -rw..=rw {
                    data.extend([log_coord(dt), log_coord(dh), log_coord(dw)]);
                }
            }
        }
        Tensor::new(vec![self.len(), 3], data).expect("coordinate table")
    }
}

/// `sign(x) * ln(1 + |x|)`
pub fn log_coord(x: i64) -> f64 {
    let v = x as f64;
    v.signum() * v.abs().ln_1p()
}

/// Bias table on the tape: `[len, heads]`.
pub(crate) fn table_var(tape: &mut Tape, pv: &ParamVars, layer: usize, geom: &RtpeGeometry) -> Result<Var> {
    let coords = tape.constant(geom.coordinates());
    let p = |s: &str| format!("neck.{layer}.{s}");
    let h = tape.linear(coords, pv.get(&p("rtpe1.w"))?, pv.get(&p("rtpe1.b"))?)?;
    let h = tape.gelu(h)?;
    tape.linear(h, pv.get(&p("rtpe2.w"))?, pv.get(&p("rtpe2.b"))?)
}

/// Materialized bias table for one layer and proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct RtpeTable {
    pub geometry: RtpeGeometry,
    pub heads: usize,
    /// `[len, heads]`, rows ordered by `(dt, dh, dw)`.
    pub bias: Tensor,
}

impl RtpeTable {
    /// Per-head bias for a query at `(t, h, w)` against a key at `(t, h, w)`;
    /// `None` when the key lies after the query.
    pub fn lookup(&self, query: (i64, i64, i64), key: (i64, i64, i64)) -> Result<Option<&[f64]>> {
        let row = self
            .geometry
            .index(query.0 - key.0, query.1 - key.1, query.2 - key.2)?;
        Ok(row.map(|r| &self.bias.data()[r * self.heads..(r + 1) * self.heads]))
    }
}

/// Evaluate the projector of `layer` over every coordinate the proposal needs.
pub fn build_rtpe(
    params: &ModelParams,
    layer: usize,
    proposal: &TemporalProposal,
    window: WindowConfig,
) -> Result<RtpeTable> {
    proposal.validate()?;
    let geometry = RtpeGeometry::for_proposal(proposal, window)?;
    let mut tape = Tape::new();
    let pv = params.register(&mut tape, false);
    let v = table_var(&mut tape, &pv, layer, &geometry)?;
    Ok(RtpeTable {
        geometry,
        heads: params.config.heads,
        bias: tape.value(v).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn zero_final_layer_gives_zero_table() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, 5).unwrap();
        let prop = TemporalProposal::new(vec![-4, -2, -1], vec![1, 3]).unwrap();
        let table = build_rtpe(&params, 0, &prop, cfg.window).unwrap();
        assert_eq!(table.geometry.t_max, 7);
        assert!(table.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negative_dt_is_masked() {
        let geom = RtpeGeometry::new(3, WindowConfig { t: 1, h: 3, w: 3 }).unwrap();
        assert_eq!(geom.index(-1, 0, 0).unwrap(), None);
        assert!(geom.index(4, 0, 0).is_err());
        assert!(geom.index(0, 3, 0).is_err());
        assert_eq!(geom.index(0, -2, -2).unwrap(), Some(0));
        assert_eq!(geom.index(3, 2, 2).unwrap(), Some(geom.len() - 1));
    }
}
