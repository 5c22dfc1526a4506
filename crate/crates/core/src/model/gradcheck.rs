//! Named gradient checks covering every differentiable path of the model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ModelParams;
use super::proposal::TemporalProposal;
use super::rtpe::{self, RtpeGeometry};
use super::tat::{tat_layer_var, TatGeometry};
use super::train::{sample_loss, LossConfig, TrainSample};
use crate::detmetrics::BBox;
use crate::error::Result;
use crate::numerics::{grad_check, Tape, Tensor, Var, DEFAULT_STEP};

/// Worst relative error of one check, over every input it probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Number of scalar coordinates probed.
    pub coordinates: usize,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std > 0");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

/// Parameters far from initialization so that zero-initialized layers and
/// unit norm gains all carry gradient.
fn perturbed_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ModelParams> {
    let mut p = ModelParams::init(cfg, 0)?;
    let normal = Normal::new(0.0, 0.3).expect("std > 0");
    for t in p.tensors.values_mut() {
        for v in t.data_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok(p)
}

/// The config the model-level checks run at: `C=8`, one layer, one head.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        heads: 1,
        ..ModelConfig::tiny()
    }
}

fn softmax_cross_entropy(rng: &mut ChaCha8Rng) -> Result<GradCheckResult> {
    let logits = random(rng, &[3, 5], 1.5);
    let onehot = Tensor::from_fn(&[3, 5], |i| if i % 5 == (i / 5 * 2 + 1) % 5 { 1.0 } else { 0.0 });
    let err = grad_check(
        |t, x| {
            let ls = t.log_softmax(x)?;
            let y = t.constant(onehot.clone());
            let picked = t.mul(ls, y)?;
            let s = t.sum(picked)?;
            t.scale(s, -1.0 / 3.0)
        },
        &logits,
        DEFAULT_STEP,
    )?;
    Ok(GradCheckResult {
        name: "softmax_cross_entropy".into(),
        max_rel_error: err,
        coordinates: logits.numel(),
    })
}

fn layer_norm_mlp(rng: &mut ChaCha8Rng) -> Result<GradCheckResult> {
    let inputs = [
        random(rng, &[4, 6], 1.0),
        random(rng, &[6], 0.5),
        random(rng, &[6], 0.5),
        random(rng, &[6, 10], 0.5),
        random(rng, &[10], 0.5),
        random(rng, &[10, 6], 0.5),
        random(rng, &[6], 0.5),
    ];
    let weights = random(rng, &[4, 6], 1.0);
    let mut worst: f64 = 0.0;
    for probe in 0..inputs.len() {
        let err = grad_check(
            |t, x| {
                let v: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, a)| if i == probe { x } else { t.constant(a.clone()) })
                    .collect();
                let h = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let h = t.linear(h, v[3], v[4])?;
                let h = t.gelu(h)?;
                let h = t.linear(h, v[5], v[6])?;
                let w = t.constant(weights.clone());
                let y = t.mul(h, w)?;
                t.sum(y)
            },
            &inputs[probe],
            DEFAULT_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(GradCheckResult {
        name: "layer_norm_mlp".into(),
        max_rel_error: worst,
        coordinates: inputs.iter().map(Tensor::numel).sum(),
    })
}

fn tat_layer_rtpe(rng: &mut ChaCha8Rng) -> Result<GradCheckResult> {
    let cfg = gradcheck_config();
    let params = perturbed_params(&cfg, rng)?;
    let c = cfg.channels;
    let (gh, gw) = (3, 3);
    let n = gh * gw;
    let query_times = [1, 3];
    let key_times = [-2, -1, 0];
    let inputs = [
        random(rng, &[2 * n, c], 1.0),
        random(rng, &[3 * n, c], 1.0),
        random(rng, &[3 * n, c], 1.0),
    ];
    let weights = random(rng, &[2 * n, c], 1.0);
    let objective = |t: &mut Tape, probe: Probe, x: Var| -> Result<Var> {
        let mut pv = params.register(t, false);
        let mut v: Vec<Var> = inputs.iter().map(|a| t.constant(a.clone())).collect();
        match probe {
            Probe::Input(i) => v[i] = x,
            Probe::Param(name) => pv.replace(name, x),
        }
        let geom = TatGeometry {
            grid: (gh, gw),
            query_times: &query_times,
            key_times: &key_times,
        };
        let rg = RtpeGeometry::new(5, cfg.window)?;
        let table = rtpe::table_var(t, &pv, 0, &rg)?;
        let out = tat_layer_var(t, &pv, &cfg, 0, v[0], v[1], v[2], &geom, Some((table, &rg)))?;
        let w = t.constant(weights.clone());
        let y = t.mul(out.out, w)?;
        t.sum(y)
    };
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    for (i, x) in inputs.iter().enumerate() {
        worst = worst.max(grad_check(|t, v| objective(t, Probe::Input(i), v), x, DEFAULT_STEP)?);
        coordinates += x.numel();
    }
    for (name, x) in params.tensors.iter().filter(|(n, _)| n.starts_with("neck.")) {
        worst = worst.max(grad_check(|t, v| objective(t, Probe::Param(name), v), x, DEFAULT_STEP)?);
        coordinates += x.numel();
    }
    Ok(GradCheckResult {
        name: "tat_layer_rtpe".into(),
        max_rel_error: worst,
        coordinates,
    })
}

#[derive(Clone, Copy)]
enum Probe<'a> {
    Input(usize),
    Param(&'a str),
}

fn full_model(rng: &mut ChaCha8Rng) -> Result<GradCheckResult> {
    let cfg = gradcheck_config();
    let params = perturbed_params(&cfg, rng)?;
    // 32×32 images give a 4×4 feature grid
    let image = |rng: &mut ChaCha8Rng| random(rng, &[cfg.image_channels, 32, 32], 0.5);
    let sample = TrainSample {
        past: vec![image(rng), image(rng)],
        current: image(rng),
        proposal: TemporalProposal::new(vec![-3, -1], vec![1, 4])?,
        targets: vec![
            vec![BBox::gt(2.0, 3.0, 13.0, 11.0, 0), BBox::gt(18.0, 17.0, 29.0, 30.0, 1)],
            vec![BBox::gt(5.0, 4.0, 17.0, 12.0, 1)],
        ],
    };
    let loss = LossConfig {
        obj_pos_weight: 2.0,
        ..LossConfig::default()
    };
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    for (name, x) in &params.tensors {
        let err = grad_check(
            |t, v| {
                let mut pv = params.register(t, false);
                pv.replace(name, v);
                sample_loss(t, &pv, &cfg, &loss, &sample)
            },
            x,
            DEFAULT_STEP,
        )?;
        worst = worst.max(err);
        coordinates += x.numel();
    }
    Ok(GradCheckResult {
        name: "full_model".into(),
        max_rel_error: worst,
        coordinates,
    })
}

/// Names accepted by [`run_gradient_check`].
pub const GRADIENT_CHECKS: [&str; 4] = ["softmax_cross_entropy", "layer_norm_mlp", "tat_layer_rtpe", "full_model"];

/// Run one named check with inputs drawn from `seed`.
pub fn run_gradient_check(name: &str, seed: u64) -> Result<GradCheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match name {
        "softmax_cross_entropy" => softmax_cross_entropy(&mut rng),
        "layer_norm_mlp" => layer_norm_mlp(&mut rng),
        "tat_layer_rtpe" => tat_layer_rtpe(&mut rng),
        "full_model" => full_model(&mut rng),
        other => Err(crate::error::Error::Config(format!(
            "unknown gradient check {other:?}; expected one of {GRADIENT_CHECKS:?}"
        ))),
    }
}

/// Every check in [`GRADIENT_CHECKS`] order.
pub fn run_gradient_checks(seed: u64) -> Result<Vec<GradCheckResult>> {
    GRADIENT_CHECKS.iter().map(|n| run_gradient_check(n, seed)).collect()
}
