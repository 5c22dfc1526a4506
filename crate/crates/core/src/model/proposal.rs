use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive range of past offsets drawn during mixed-speed training.
pub const MIXED_PAST_RANGE: (i64, i64) = (-24, -1);
/// Inclusive range of future offsets drawn during mixed-speed training.
pub const MIXED_FUTURE_RANGE: (i64, i64) = (1, 16);

/// Relative frame offsets: which past features are supplied and which
/// future frames to forecast.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TemporalProposal {
    /// Strictly negative, ascending, no duplicates.
    pub past: Vec<i64>,
    /// Strictly positive, ascending, no duplicates.
    pub future: Vec<i64>,
}

impl TemporalProposal {
    /// Sorts and deduplicates, then validates signs and non-emptiness.
    pub fn new(mut past: Vec<i64>, mut future: Vec<i64>) -> Result<Self> {
        past.sort_unstable();
        past.dedup();
        future.sort_unstable();
        future.dedup();
        let p = Self { past, future };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.past.is_empty() || self.future.is_empty() {
            return Err(Error::Contract(format!("empty proposal side: {self:?}")));
        }
        if self.past.iter().any(|&p| p >= 0) || self.future.iter().any(|&f| f <= 0) {
            return Err(Error::Contract(format!("proposal signs violated: {self:?}")));
        }
        if !self.past.windows(2).all(|w| w[0] < w[1]) || !self.future.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Contract(format!("proposal not strictly ascending: {self:?}")));
        }
        Ok(())
    }

    /// Largest query−key temporal distance the proposal can produce.
    pub fn max_temporal_difference(&self) -> i64 {
        self.future.last().copied().unwrap_or(0) - self.past.first().copied().unwrap_or(0)
    }
}

fn sample_subset<R: Rng + ?Sized>(rng: &mut R, lo: i64, hi: i64, max_len: usize) -> Vec<i64> {
    let span = (hi - lo + 1) as usize;
    let len = rng.random_range(1..=max_len.min(span));
    let mut v: Vec<i64> = sample(rng, span, len).into_iter().map(|i| lo + i as i64).collect();
    v.sort_unstable();
    v
}

/// Draw a random proposal for mixed-speed training: between 1 and `max_past`
/// distinct offsets from [-24, -1] and between 1 and `max_future` distinct
/// offsets from [1, 16], each subset uniform given its size.
pub fn sample_mixed_speed<R: Rng + ?Sized>(
    rng: &mut R,
    max_past: usize,
    max_future: usize,
) -> Result<TemporalProposal> {
    if max_past < 1 || max_future < 1 {
        return Err(Error::Config(format!(
            "max_past and max_future must be >= 1 (got {max_past}, {max_future})"
        )));
    }
    let past = sample_subset(rng, MIXED_PAST_RANGE.0, MIXED_PAST_RANGE.1, max_past);
    let future = sample_subset(rng, MIXED_FUTURE_RANGE.0, MIXED_FUTURE_RANGE.1, max_future);
    Ok(TemporalProposal { past, future })
}

/// Same past sampling as [`sample_mixed_speed`] but a single fixed horizon.
pub fn sample_fixed_horizon<R: Rng + ?Sized>(
    rng: &mut R,
    max_past: usize,
    horizon: i64,
) -> Result<TemporalProposal> {
    if max_past < 1 || horizon < 1 {
        return Err(Error::Config(format!(
            "max_past must be >= 1 and horizon >= 1 (got {max_past}, {horizon})"
        )));
    }
    let past = sample_subset(rng, MIXED_PAST_RANGE.0, MIXED_PAST_RANGE.1, max_past);
    Ok(TemporalProposal {
        past,
        future: vec![horizon],
    })
}
