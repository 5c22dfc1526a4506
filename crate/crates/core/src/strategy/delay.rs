use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// EMA decay applied to every delay component.
pub const EMA_DECAY: f64 = 0.5;

/// Per-stage inference time in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComponentDelays {
    pub backbone: f64,
    pub neck: f64,
    pub head: f64,
    pub other: f64,
}

impl ComponentDelays {
    pub fn new(backbone: f64, neck: f64, head: f64, other: f64) -> Self {
        Self {
            backbone,
            neck,
            head,
            other,
        }
    }

    pub fn total(&self) -> f64 {
        self.backbone + self.neck + self.head + self.other
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.backbone, self.neck, self.head, self.other]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(
            self.backbone * factor,
            self.neck * factor,
            self.head * factor,
            self.other * factor,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Contract(format!("delays must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Smoothed component delays plus the last measured start-up lag.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DelayEstimate {
    pub components: ComponentDelays,
    /// Gap between the input frame's timestamp and the start of its loop.
    pub startup: f64,
}

impl DelayEstimate {
    /// Estimated inference time.
    pub fn total(&self) -> f64 {
        self.components.total()
    }
}

/// `new = 0.5·previous + 0.5·observed` per component; the first observation
/// is adopted as is. The start-up lag is measured, so it is replaced.
pub fn ema_update(previous: Option<&DelayEstimate>, observed: &ComponentDelays, startup: f64) -> Result<DelayEstimate> {
    observed.validate()?;
    if !(startup.is_finite() && startup >= 0.0) {
        return Err(Error::Contract(format!("start-up delay must be >= 0, got {startup}")));
    }
    let components = match previous {
        None => *observed,
        Some(p) => {
            let mix = |a: f64, b: f64| EMA_DECAY * a + (1.0 - EMA_DECAY) * b;
            let c = &p.components;
            ComponentDelays::new(
                mix(c.backbone, observed.backbone),
                mix(c.neck, observed.neck),
                mix(c.head, observed.head),
                mix(c.other, observed.other),
            )
        }
    };
    Ok(DelayEstimate { components, startup })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn only_backbone(v: f64) -> ComponentDelays {
        ComponentDelays::new(v, 0.0, 0.0, 0.0)
    }

    #[test]
    fn first_observation_is_adopted() {
        let e = ema_update(None, &only_backbone(0.010), 0.0).unwrap();
        assert_eq!(e.components.backbone, 0.010);
        assert_eq!(e.total(), 0.010);
    }

    #[test]
    fn half_decay() {
        let prev = ema_update(None, &only_backbone(0.020), 0.0).unwrap();
        let e = ema_update(Some(&prev), &only_backbone(0.030), 0.0).unwrap();
        assert!((e.components.backbone - 0.025).abs() < 1e-15);
    }

    #[test]
    fn negative_observation_rejected() {
        assert!(ema_update(None, &only_backbone(-0.001), 0.0).is_err());
        assert!(ema_update(None, &only_backbone(0.001), -1.0).is_err());
    }

    proptest! {
        #[test]
        fn constant_stream_is_fixed_point(x in 0.0f64..1.0, n in 1usize..40) {
            let obs = ComponentDelays::new(x, x / 2.0, x / 3.0, x / 4.0);
            let mut e = None;
            for _ in 0..n {
                e = Some(ema_update(e.as_ref(), &obs, 0.0).unwrap());
            }
            prop_assert_eq!(e.unwrap().components, obs);
        }
    }
}
