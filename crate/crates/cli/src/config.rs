use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sapkit_core::harness::training::{SamplingMode, TrainConfig};
use sapkit_core::harness::{DelayModel, OracleKind, ScenarioSpec, StrategyToggles, StreamConfig, DEFAULT_OFFLINE_PAST};
use serde::{Deserialize, Serialize};

/// Bad configuration or arguments. Maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn at(key: &str, e: impl fmt::Display) -> anyhow::Error {
    config_err(format!("{key}: {e}"))
}

/// What produces detections: an oracle or a trained checkpoint.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSpec {
    pub oracle: Option<OracleKind>,
    pub checkpoint: Option<PathBuf>,
}

impl DetectorSpec {
    pub fn validate(&self, key: &str) -> anyhow::Result<()> {
        if self.oracle.is_some() && self.checkpoint.is_some() {
            return Err(at(key, "set either oracle or checkpoint, not both"));
        }
        Ok(())
    }

    /// Perfect-current oracle unless something else is configured.
    pub fn oracle_or_default(&self) -> OracleKind {
        self.oracle.clone().unwrap_or(OracleKind::PerfectCurrent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub include_warmup: bool,
    /// Past offsets for offline forecasting.
    pub past: Vec<i64>,
    /// Horizons `j` for mAP_j.
    pub horizons: Vec<i64>,
    /// Delay factors `d` for sAP_d.
    pub delay_factors: Vec<f64>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            include_warmup: false,
            past: DEFAULT_OFFLINE_PAST.to_vec(),
            horizons: vec![1, 2, 4, 8, 16],
            delay_factors: vec![1.0, 2.0, 4.0, 8.0, 16.0],
        }
    }
}

impl EvalSpec {
    fn validate(&self) -> anyhow::Result<()> {
        if let Some(j) = self.horizons.iter().find(|&&j| j < 1) {
            return Err(at("eval.horizons", format!("horizons must be >= 1, got {j}")));
        }
        if let Some(d) = self.delay_factors.iter().find(|&&d| !(d >= 1.0 && d.is_finite())) {
            return Err(at("eval.delay_factors", format!("delay factors must be >= 1, got {d}")));
        }
        if self.past.is_empty() || self.past.iter().any(|&p| p >= 0) {
            return Err(at("eval.past", "past offsets must be non-empty and negative"));
        }
        Ok(())
    }
}

/// One row of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    #[serde(default)]
    pub detector: DetectorSpec,
    /// Defaults to the top-level `stream.toggles`.
    #[serde(default)]
    pub toggles: Option<StrategyToggles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub workers: usize,
    /// Streaming sAP_d columns.
    pub streaming: bool,
    /// Offline mAP_j columns.
    pub offline: bool,
    /// Rows; empty means one row from the top-level detector.
    pub methods: Vec<MethodSpec>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            workers: 1,
            streaming: true,
            offline: true,
            methods: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSpec {
    /// Extra checkpoints for the offline rows, e.g. trained without the
    /// bias table or without the attention neck.
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub scenario: ScenarioSpec,
    pub delays: DelayModel,
    pub stream: StreamConfig,
    pub detector: DetectorSpec,
    pub eval: EvalSpec,
    pub train: TrainConfig,
    pub sweep: SweepSpec,
    pub ablate: AblateSpec,
}

/// `name=on|off` from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggle {
    pub name: ToggleName,
    pub on: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToggleName {
    Rtpe,
    Tat,
    Planner,
    Buffer,
    OutputBuffer,
}

impl FromStr for Toggle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, value) = s.split_once('=').ok_or_else(|| format!("expected name=on|off, got {s:?}"))?;
        let name = match name {
            "rtpe" => ToggleName::Rtpe,
            "tat" => ToggleName::Tat,
            "planner" => ToggleName::Planner,
            "buffer" => ToggleName::Buffer,
            "output_buffer" => ToggleName::OutputBuffer,
            other => {
                return Err(format!(
                    "unknown toggle {other:?}; expected rtpe, tat, planner, buffer or output_buffer"
                ))
            }
        };
        let on = match value {
            "on" => true,
            "off" => false,
            other => return Err(format!("toggle value must be on or off, got {other:?}")),
        };
        Ok(Toggle { name, on })
    }
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub delay_factor: Option<f64>,
    pub horizon: Option<i64>,
    pub checkpoint: Option<PathBuf>,
    pub toggles: Vec<Toggle>,
}

/// Model-side toggles requested on the command line.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ModelToggles {
    pub rtpe: Option<bool>,
    pub tat: Option<bool>,
}

impl Overrides {
    pub fn model_toggles(&self) -> ModelToggles {
        let mut m = ModelToggles::default();
        for t in &self.toggles {
            match t.name {
                ToggleName::Rtpe => m.rtpe = Some(t.on),
                ToggleName::Tat => m.tat = Some(t.on),
                _ => {}
            }
        }
        m
    }

    pub fn stream_toggles(&self) -> Vec<Toggle> {
        self.toggles
            .iter()
            .filter(|t| !matches!(t.name, ToggleName::Rtpe | ToggleName::Tat))
            .copied()
            .collect()
    }
}

pub fn apply_stream_toggles(toggles: &mut StrategyToggles, requested: &[Toggle]) {
    for t in requested {
        match t.name {
            ToggleName::Planner => toggles.planner = t.on,
            ToggleName::Buffer => toggles.feature_buffer = t.on,
            ToggleName::OutputBuffer => toggles.output_buffer = t.on,
            ToggleName::Rtpe | ToggleName::Tat => {}
        }
    }
}

/// Which command is loading; decides what `--horizon` means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Simulate,
    Train,
    Evaluate,
    Sweep,
    Ablate,
    Gradcheck,
}

/// Parse `text` (TOML), apply overrides, validate. `base` resolves
/// relative paths.
pub fn parse_config(text: &str, base: &Path, ov: &Overrides, kind: CommandKind) -> anyhow::Result<RunConfig> {
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| config_err(format!("config: {}", e.to_string().trim())))?;
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    if let Some(p) = &mut cfg.detector.checkpoint {
        resolve(p);
    }
    for m in &mut cfg.sweep.methods {
        if let Some(p) = &mut m.detector.checkpoint {
            resolve(p);
        }
    }
    for p in &mut cfg.ablate.checkpoints {
        resolve(p);
    }
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &ov.out_dir {
        cfg.out_dir = Some(dir.clone());
    }
    if let Some(d) = ov.delay_factor {
        cfg.delays.factor = d;
        cfg.eval.delay_factors = vec![d];
    }
    if let Some(path) = &ov.checkpoint {
        cfg.detector = DetectorSpec {
            oracle: None,
            checkpoint: Some(path.clone()),
        };
    }
    if let Some(h) = ov.horizon {
        match kind {
            CommandKind::Train => cfg.train.sampling = SamplingMode::Fixed { horizon: h },
            CommandKind::Simulate => {
                cfg.stream.fixed_proposal.future = vec![h];
                if let Some(OracleKind::PerfectForecast { horizon }) = &mut cfg.detector.oracle {
                    *horizon = h;
                }
            }
            _ => cfg.eval.horizons = vec![h],
        }
    }
    apply_stream_toggles(&mut cfg.stream.toggles, &ov.stream_toggles());
    let mt = ov.model_toggles();
    if kind == CommandKind::Train {
        if let Some(on) = mt.rtpe {
            cfg.train.model.use_rtpe = on;
        }
        if let Some(on) = mt.tat {
            cfg.train.model.use_tat = on;
            if !on && mt.rtpe.is_none() {
                cfg.train.model.use_rtpe = false;
            }
        }
    }
    // The run seed drives the scenario, the delay draws and training.
    cfg.delays.seed = cfg.seed;
    cfg.train.seed = cfg.seed;

    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> anyhow::Result<()> {
    cfg.scenario.validate().map_err(|e| at("scenario", e))?;
    cfg.delays.validate().map_err(|e| at("delays", e))?;
    cfg.stream.validate().map_err(|e| at("stream", e))?;
    cfg.detector.validate("detector")?;
    cfg.eval.validate()?;
    cfg.train.validate().map_err(|e| at("train", e))?;
    if cfg.sweep.workers == 0 {
        return Err(at("sweep.workers", "must be >= 1"));
    }
    for (i, m) in cfg.sweep.methods.iter().enumerate() {
        m.detector.validate(&format!("sweep.methods[{i}].detector"))?;
    }
    Ok(())
}

/// Load a config file (or defaults when `path` is `None`).
pub fn load_config(path: Option<&Path>, ov: &Overrides, kind: CommandKind) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
            let base = p.parent().unwrap_or(Path::new("."));
            parse_config(&text, base, ov, kind)
        }
        None => parse_config("", Path::new("."), ov, kind),
    }
}

pub const OUT_DIR_ENV: &str = "SAPKIT_OUT_DIR";

/// Flag or file value, else the environment, else `sapkit-out`.
pub fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("sapkit-out"))
}
