use sapkit_core::harness::training;
use sapkit_core::model::Checkpoint;
use serde::Serialize;

use crate::config::{out_dir, RunConfig};
use crate::report::OutDir;

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

/// Train a model; write `checkpoint.json`, `losses.csv` and `train_log.jsonl`.
pub fn train(cfg: &RunConfig) -> anyhow::Result<String> {
    let outcome = training::train(&cfg.train)?;
    let out = OutDir::create(out_dir(cfg))?;
    let ck = Checkpoint {
        params: outcome.params,
        meta: serde_json::json!({ "train": cfg.train }),
    };
    out.write("checkpoint.json", &ck.to_json()?)?;
    let rows: Vec<LossRow> = outcome.steps.iter().map(|s| LossRow { step: s.step, loss: s.loss }).collect();
    out.write_csv("losses.csv", &rows)?;
    out.write_jsonl("train_log.jsonl", &outcome.steps)?;
    let last = rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
    Ok(format!(
        "trained {} steps, final loss {last:.4}, {} parameters",
        rows.len(),
        ck.params.num_scalars()
    ))
}
