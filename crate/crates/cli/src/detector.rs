use std::path::Path;

use anyhow::Context;
use sapkit_core::harness::{make_oracle, Detector, OracleKind, Scenario};
use sapkit_core::model::{Checkpoint, ModelParams};

use crate::config::{config_err, DetectorSpec, ModelToggles};

/// A detector with owned state, borrowed as a [`Detector`] per scenario.
#[derive(Debug, Clone)]
pub enum LoadedDetector {
    Oracle(OracleKind),
    Model(ModelParams),
}

pub fn load_checkpoint(path: &Path) -> anyhow::Result<ModelParams> {
    if !path.exists() {
        return Err(config_err(format!("checkpoint {} does not exist", path.display())));
    }
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(ck.params)
}

/// Reject toggles that ask for a neck the checkpoint was not trained with.
pub fn check_model_toggles(params: &ModelParams, t: ModelToggles, what: &str) -> anyhow::Result<()> {
    let cfg = &params.config;
    for (name, want, have) in [("rtpe", t.rtpe, cfg.use_rtpe), ("tat", t.tat, cfg.use_tat)] {
        if let Some(want) = want {
            if want != have {
                return Err(config_err(format!(
                    "{what} was trained with {name}={}, cannot evaluate with {name}={}",
                    on_off(have),
                    on_off(want)
                )));
            }
        }
    }
    Ok(())
}

pub fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

pub fn load_detector(spec: &DetectorSpec, toggles: ModelToggles) -> anyhow::Result<LoadedDetector> {
    match &spec.checkpoint {
        Some(path) => {
            let params = load_checkpoint(path)?;
            check_model_toggles(&params, toggles, &path.display().to_string())?;
            Ok(LoadedDetector::Model(params))
        }
        None => {
            if toggles.rtpe.is_some() || toggles.tat.is_some() {
                return Err(config_err("rtpe/tat toggles need a model checkpoint"));
            }
            Ok(LoadedDetector::Oracle(spec.oracle_or_default()))
        }
    }
}

impl LoadedDetector {
    pub fn bind<'a>(&'a self, scenario: &'a Scenario) -> anyhow::Result<Detector<'a>> {
        Ok(match self {
            LoadedDetector::Oracle(kind) => Detector::Oracle(make_oracle(kind, scenario).map_err(|e| config_err(format!("detector.oracle: {e}")))?),
            LoadedDetector::Model(params) => {
                if params.config.num_classes != scenario.spec.num_classes as usize {
                    return Err(config_err(format!(
                        "checkpoint predicts {} classes, scenario has {}",
                        params.config.num_classes, scenario.spec.num_classes
                    )));
                }
                Detector::Model(params)
            }
        })
    }
}
