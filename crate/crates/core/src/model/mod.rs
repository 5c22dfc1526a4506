//! Windowed temporal cross-attention forecaster: patch backbone, attention
//! neck with relative temporal bias, dense per-cell head, and training.

mod config;
mod forecaster;
mod gradcheck;
mod head;
mod params;
mod proposal;
mod rtpe;
mod tat;
mod train;
mod window;

pub use config::{ModelConfig, ValueMode};
pub use forecaster::{forecast, forecast_features, toy_backbone, FeatureMap, Forecast};
pub use gradcheck::{gradcheck_config, run_gradient_check, run_gradient_checks, GradCheckResult, GRADIENT_CHECKS};
pub use head::{decode_head, nms, toy_head};
pub use params::{Checkpoint, ModelParams, ParamVars, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use proposal::{
    sample_fixed_horizon, sample_mixed_speed, TemporalProposal, MIXED_FUTURE_RANGE, MIXED_PAST_RANGE,
};
pub use rtpe::{build_rtpe, log_coord, RtpeGeometry, RtpeTable};
pub use tat::{tat_layer, TatGeometry};
pub use train::{
    assign_targets, evaluate_loss, train_step, CellTargets, LossConfig, OptimizerConfig, Sgd, TrainSample,
};
pub use window::{window_partition, window_reverse, GridPos, WindowConfig, WindowLayout};
