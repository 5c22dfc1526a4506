mod ablate;
mod evaluate;
mod gradcheck;
mod simulate;
mod sweep;
mod train;

pub use ablate::ablate;
pub use evaluate::evaluate;
pub use gradcheck::gradcheck;
pub use simulate::simulate;
pub use sweep::{sweep, SeriesRow};
pub use train::train;

use sapkit_core::harness::{generate_scenario, Scenario};

use crate::config::{config_err, RunConfig};

pub(crate) fn scenario(cfg: &RunConfig) -> anyhow::Result<Scenario> {
    generate_scenario(&cfg.scenario, cfg.seed).map_err(|e| config_err(format!("scenario: {e}")))
}
