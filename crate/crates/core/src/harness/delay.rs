use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::strategy::ComponentDelays;

/// How per-loop delays are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayKind {
    /// Every loop takes `base`.
    Constant,
    /// Loop `n` takes `table[n % len]`; `base` is ignored.
    Table,
    /// `base`, multiplied by `burst_multiplier` with probability
    /// `burst_probability`.
    StochasticBurst,
}

/// Simulated inference time per loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DelayModel {
    pub kind: DelayKind,
    pub base: ComponentDelays,
    pub table: Vec<ComponentDelays>,
    pub burst_probability: f64,
    pub burst_multiplier: f64,
    /// Slow-device multiplier applied to every sampled delay.
    pub factor: f64,
    pub seed: u64,
}

impl Default for DelayModel {
    fn default() -> Self {
        Self::constant(ComponentDelays::new(0.012, 0.006, 0.002, 0.002))
    }
}

impl DelayModel {
    pub fn constant(base: ComponentDelays) -> Self {
        Self {
            kind: DelayKind::Constant,
            base,
            table: Vec::new(),
            burst_probability: 0.0,
            burst_multiplier: 1.0,
            factor: 1.0,
            seed: 0,
        }
    }

    /// Constant model whose whole delay sits in the backbone component.
    pub fn constant_total(seconds: f64) -> Self {
        Self::constant(ComponentDelays::new(seconds, 0.0, 0.0, 0.0))
    }

    pub fn table(table: Vec<ComponentDelays>) -> Self {
        Self {
            kind: DelayKind::Table,
            table,
            ..Self::constant(ComponentDelays::default())
        }
    }

    pub fn burst(base: ComponentDelays, probability: f64, multiplier: f64, seed: u64) -> Self {
        Self {
            kind: DelayKind::StochasticBurst,
            burst_probability: probability,
            burst_multiplier: multiplier,
            seed,
            ..Self::constant(base)
        }
    }

    pub fn with_factor(mut self, factor: f64) -> Self {
        self.factor = factor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.factor >= 1.0 && self.factor.is_finite()) {
            return Err(Error::Config(format!("delay factor must be >= 1, got {}", self.factor)));
        }
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.base.validate().map_err(cfg_err)?;
        match self.kind {
            DelayKind::Constant => {}
            DelayKind::Table => {
                if self.table.is_empty() {
                    return Err(Error::Config("delay table is empty".into()));
                }
                for row in &self.table {
                    row.validate().map_err(cfg_err)?;
                }
            }
            DelayKind::StochasticBurst => {
                if !(0.0..=1.0).contains(&self.burst_probability) {
                    return Err(Error::Config(format!(
                        "burst_probability must lie in [0, 1], got {}",
                        self.burst_probability
                    )));
                }
                if !(self.burst_multiplier >= 0.0 && self.burst_multiplier.is_finite()) {
                    return Err(Error::Config(format!(
                        "burst_multiplier must be >= 0, got {}",
                        self.burst_multiplier
                    )));
                }
            }
        }
        Ok(())
    }

    /// Delay before the factor is applied. Depends only on the seed and the
    /// loop number.
    pub fn sample_unscaled(&self, loop_index: usize) -> ComponentDelays {
        match self.kind {
            DelayKind::Constant => self.base,
            DelayKind::Table => self.table[loop_index % self.table.len()],
            DelayKind::StochasticBurst => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(loop_index as u64);
                if rng.random_bool(self.burst_probability) {
                    self.base.scaled(self.burst_multiplier)
                } else {
                    self.base
                }
            }
        }
    }

    pub fn sample(&self, loop_index: usize) -> ComponentDelays {
        self.sample_unscaled(loop_index).scaled(self.factor)
    }
}
