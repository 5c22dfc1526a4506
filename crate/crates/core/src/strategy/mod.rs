//! Adaptive scheduling around the forecaster: smoothed delay estimates, the
//! proposal planner, the historical feature buffer and the output buffer.

mod buffers;
mod delay;
mod planner;

pub use buffers::{Buffered, FeatureBuffer, OutputBuffer};
pub use delay::{ema_update, ComponentDelays, DelayEstimate, EMA_DECAY};
pub use planner::{future_schedule, plan, Plan, PlannerConfig};
