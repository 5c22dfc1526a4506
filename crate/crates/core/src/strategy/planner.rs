use serde::{Deserialize, Serialize};

use super::delay::DelayEstimate;
use crate::error::{Error, Result};
use crate::model::TemporalProposal;
use crate::timebase::ceil_frame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub max_past: usize,
    pub max_future: usize,
    /// Earliest relative frame index a proposal may reference.
    pub clip_min: i64,
    /// Latest relative frame index a proposal may reference.
    pub clip_max: i64,
    pub frame_rate: f64,
    /// Spacing between future targets. `None` derives it from the delay
    /// estimate as `max(1, round(total·k))`.
    pub future_stride: Option<i64>,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            max_past: 4,
            max_future: 4,
            clip_min: -29,
            clip_max: 19,
            frame_rate: 30.0,
            future_stride: None,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_min < 0 && self.clip_max > 0) {
            return Err(Error::Config(format!(
                "clip range must straddle 0, got [{}, {}]",
                self.clip_min, self.clip_max
            )));
        }
        if self.max_past == 0 || self.max_future == 0 {
            return Err(Error::Config("max_past and max_future must be >= 1".into()));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(Error::Config(format!("frame_rate must be > 0, got {}", self.frame_rate)));
        }
        if matches!(self.future_stride, Some(s) if s < 1) {
            return Err(Error::Config("future_stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Planner output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub proposal: TemporalProposal,
    /// No usable history: `past` is the stand-in `[-1]`, which the caller
    /// fills with the current features.
    pub synthetic_past: bool,
}

/// First future target and stride for an estimate (`None` = no history yet).
pub fn future_schedule(estimate: Option<&DelayEstimate>, cfg: &PlannerConfig) -> (i64, i64) {
    let (total, startup) = estimate.map_or((0.0, 0.0), |e| (e.total(), e.startup));
    let first = ceil_frame(total + startup, cfg.frame_rate).max(1);
    let stride = cfg
        .future_stride
        .unwrap_or_else(|| ((total * cfg.frame_rate).round() as i64).max(1));
    (first, stride)
}

/// Choose past and future offsets for the loop processing `now_frame`.
///
/// `available` holds absolute indices of frames whose features can be used.
/// Past offsets are the `max_past` latest of those; offsets older than
/// `clip_min` are dropped. Future offsets start at `⌈(Δt̂ + Δt^S)·k⌉`, are
/// spaced by the stride and clamped to `clip_max`.
pub fn plan(available: &[i64], estimate: Option<&DelayEstimate>, now_frame: i64, cfg: &PlannerConfig) -> Result<Plan> {
    cfg.validate()?;
    if let Some(&bad) = available.iter().find(|&&i| i >= now_frame) {
        return Err(Error::Contract(format!("buffered frame {bad} is not before frame {now_frame}")));
    }
    let mut rel: Vec<i64> = available
        .iter()
        .map(|&i| i - now_frame)
        .filter(|&r| r >= cfg.clip_min)
        .collect();
    rel.sort_unstable();
    rel.dedup();
    let keep = rel.len().saturating_sub(cfg.max_past);
    let mut past = rel.split_off(keep);
    let synthetic_past = past.is_empty();
    if synthetic_past {
        past = vec![-1];
    }

    let (first, stride) = future_schedule(estimate, cfg);
    let mut future: Vec<i64> = (0..cfg.max_future as i64)
        .map(|n| first.saturating_add(n.saturating_mul(stride)).min(cfg.clip_max))
        .collect();
    future.dedup();

    Ok(Plan {
        proposal: TemporalProposal::new(past, future)?,
        synthetic_past,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategy::ComponentDelays;
    use proptest::prelude::*;

    fn est(total: f64, startup: f64) -> DelayEstimate {
        DelayEstimate {
            components: ComponentDelays::new(total, 0.0, 0.0, 0.0),
            startup,
        }
    }

    #[test]
    fn latest_past_selection() {
        let cfg = PlannerConfig {
            max_past: 3,
            ..Default::default()
        };
        let p = plan(&[6, 8, 9, 10], None, 11, &cfg).unwrap();
        assert_eq!(p.proposal.past, vec![-3, -2, -1]);
        assert!(!p.synthetic_past);
    }

    #[test]
    fn first_target_rounds_up() {
        let cfg = PlannerConfig {
            max_future: 2,
            future_stride: Some(1),
            ..Default::default()
        };
        let p = plan(&[0], Some(&est(0.034, 0.0)), 1, &cfg).unwrap();
        assert_eq!(p.proposal.future, vec![2, 3]);
    }

    #[test]
    fn derived_stride_follows_estimate() {
        // 0.1 s at 30 fps: first 3, stride 3
        let cfg = PlannerConfig {
            max_future: 3,
            ..Default::default()
        };
        let p = plan(&[0], Some(&est(0.1, 0.0)), 1, &cfg).unwrap();
        assert_eq!(p.proposal.future, vec![3, 6, 9]);
    }

    #[test]
    fn clamps_and_dedups_future() {
        let cfg = PlannerConfig {
            max_future: 3,
            future_stride: Some(6),
            ..Default::default()
        };
        // first = 13, then 19, 25 -> 19
        let p = plan(&[0], Some(&est(13.0 / 30.0, 0.0)), 1, &cfg).unwrap();
        assert_eq!(p.proposal.future, vec![13, 19]);
    }

    #[test]
    fn old_history_is_dropped_and_cold_start_is_synthetic() {
        let cfg = PlannerConfig::default();
        let p = plan(&[], None, 5, &cfg).unwrap();
        assert!(p.synthetic_past);
        assert_eq!(p.proposal.past, vec![-1]);
        let p = plan(&[0, 40], None, 50, &cfg).unwrap();
        assert_eq!(p.proposal.past, vec![-10]);
        let p = plan(&[0], None, 50, &cfg).unwrap();
        assert!(p.synthetic_past);
    }

    #[test]
    fn skipped_frame_gives_gap_in_past_and_two_frame_spacing() {
        // frames -4, -2, -1 processed (-3 skipped), estimate ≈ 1 frame, stride 2
        let cfg = PlannerConfig {
            max_past: 3,
            max_future: 2,
            future_stride: Some(2),
            ..Default::default()
        };
        let p = plan(&[6, 8, 9], Some(&est(0.03, 0.0)), 10, &cfg).unwrap();
        assert_eq!(p.proposal.past, vec![-4, -2, -1]);
        assert_eq!(p.proposal.future, vec![1, 3]);
    }

    #[test]
    fn rejects_future_buffer_entries() {
        assert!(plan(&[3], None, 3, &PlannerConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn plan_respects_bounds(
            avail in proptest::collection::btree_set(-60i64..0, 0..12),
            total in 0.0f64..1.0,
            startup in 0.0f64..0.2,
            mp in 1usize..6,
            mf in 1usize..6,
        ) {
            let cfg = PlannerConfig { max_past: mp, max_future: mf, ..Default::default() };
            let avail: Vec<i64> = avail.into_iter().collect();
            let p = plan(&avail, Some(&est(total, startup)), 0, &cfg).unwrap().proposal;
            prop_assert!(p.past.len() <= mp && p.future.len() <= mf);
            prop_assert!(p.past.iter().all(|&v| (cfg.clip_min..0).contains(&v)));
            prop_assert!(p.future.iter().all(|&v| (1..=cfg.clip_max).contains(&v)));
            prop_assert!(p.past.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(p.future.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn first_target_is_ceil_of_delay(micros in 1u64..633_333) {
            // integer oracle for ⌈D·k⌉ with D in microseconds and k = 30
            let expected = (micros * 30).div_ceil(1_000_000) as i64;
            let d = micros as f64 * 1e-6;
            let p = plan(&[-1], Some(&est(d, 0.0)), 0, &PlannerConfig::default()).unwrap();
            prop_assert_eq!(p.proposal.future[0], expected.max(1));
        }
    }
}
