//! Training the forecaster on synthetic scenarios.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scenario::{generate_scenario, Scenario, ScenarioSpec};
use crate::error::{Error, Result};
use crate::model::{
    sample_fixed_horizon, sample_mixed_speed, train_step, LossConfig, ModelConfig, ModelParams, OptimizerConfig, Sgd,
    TemporalProposal, TrainSample,
};

/// How training proposals are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplingMode {
    /// Random past and future subsets every sample.
    Mixed,
    /// Random past subset, one fixed future offset.
    Fixed { horizon: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub scenario: ScenarioSpec,
    /// Number of distinct training clips.
    pub num_scenarios: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sampling: SamplingMode,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            scenario: ScenarioSpec::default(),
            num_scenarios: 8,
            steps: 200,
            batch_size: 4,
            seed: 0,
            sampling: SamplingMode::Mixed,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scenario.validate()?;
        self.optimizer.validate()?;
        if self.num_scenarios == 0 || self.batch_size == 0 {
            return Err(Error::Config("num_scenarios and batch_size must be >= 1".into()));
        }
        if let SamplingMode::Fixed { horizon } = self.sampling {
            if horizon < 1 {
                return Err(Error::Config(format!("fixed horizon must be >= 1, got {horizon}")));
            }
        }
        if self.scenario.num_classes as usize != self.model.num_classes {
            return Err(Error::Config(format!(
                "scenario has {} classes, model {}",
                self.scenario.num_classes, self.model.num_classes
            )));
        }
        Ok(())
    }
}

/// Loss and sampled proposals of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub proposals: Vec<TemporalProposal>,
}

/// Trained weights and the per-step log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub steps: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// Training clips are seeded `seed·1000 + i`, so evaluation clips seeded
/// from a different base never overlap them.
pub fn training_scenarios(cfg: &TrainConfig) -> Result<Vec<Scenario>> {
    (0..cfg.num_scenarios as u64)
        .map(|i| generate_scenario(&cfg.scenario, cfg.seed.wrapping_mul(1000).wrapping_add(i)))
        .collect()
}

fn draw_proposal(rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> Result<TemporalProposal> {
    match cfg.sampling {
        SamplingMode::Mixed => sample_mixed_speed(rng, cfg.model.max_past, cfg.model.max_future),
        SamplingMode::Fixed { horizon } => sample_fixed_horizon(rng, cfg.model.max_past, horizon),
    }
}

/// One training example: a random clip, proposal and anchor frame.
pub fn draw_sample(rng: &mut ChaCha8Rng, scenarios: &[Scenario], cfg: &TrainConfig) -> Result<TrainSample> {
    let s = &scenarios[rng.random_range(0..scenarios.len())];
    let proposal = draw_proposal(rng, cfg)?;
    let lo = -proposal.past[0];
    let hi = s.len() as i64 - 1 - proposal.future.last().copied().unwrap_or(0);
    if hi < lo {
        return Err(Error::Config(format!(
            "clip of {} frames too short for proposal {:?}",
            s.len(),
            proposal
        )));
    }
    let i = rng.random_range(lo..=hi);
    Ok(TrainSample {
        past: proposal.past.iter().map(|p| s.frames[(i + p) as usize].clone()).collect(),
        current: s.frames[i as usize].clone(),
        targets: proposal
            .future
            .iter()
            .map(|j| s.ground_truth[(i + j) as usize].boxes.clone())
            .collect(),
        proposal,
    })
}

/// Train from a fresh initialization.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = ModelParams::init(&cfg.model, cfg.seed)?;
    train_from(params, cfg)
}

/// Continue training `params` for `cfg.steps` steps.
pub fn train_from(mut params: ModelParams, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let scenarios = training_scenarios(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = Sgd::new(cfg.optimizer.clone())?;
    let mut steps = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| draw_sample(&mut rng, &scenarios, cfg))
            .collect::<Result<Vec<_>>>()?;
        let loss = train_step(&mut params, &mut opt, &cfg.loss, &batch, step as u64)?;
        steps.push(StepRecord {
            step,
            loss,
            proposals: batch.into_iter().map(|s| s.proposal).collect(),
        });
    }
    Ok(TrainOutcome { params, steps })
}
