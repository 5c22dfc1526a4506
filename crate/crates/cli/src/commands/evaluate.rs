use std::path::Path;

use anyhow::Context;
use sapkit_core::harness::{evaluate_offline_map_j, evaluate_sap, EvalOptions, EvalResult, StreamTrace};

use crate::config::{config_err, out_dir, ModelToggles, RunConfig};
use crate::detector::load_detector;
use crate::report::{MetricRow, OutDir};

/// Offline mAP_j for every configured horizon, or the sAP of a saved trace.
pub fn evaluate(cfg: &RunConfig, toggles: ModelToggles, trace: Option<&Path>) -> anyhow::Result<String> {
    let scenario = super::scenario(cfg)?;
    let results: Vec<EvalResult> = match trace {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            let trace = StreamTrace::from_jsonl(&text).with_context(|| format!("parsing {}", path.display()))?;
            let opts = EvalOptions {
                include_warmup: cfg.eval.include_warmup,
            };
            vec![evaluate_sap(&trace, &scenario, opts).map_err(|e| config_err(format!("trace does not match the scenario: {e}")))?]
        }
        None => {
            if cfg.eval.horizons.is_empty() {
                return Err(config_err("eval.horizons: empty grid"));
            }
            let loaded = load_detector(&cfg.detector, toggles)?;
            let detector = loaded.bind(&scenario)?;
            cfg.eval
                .horizons
                .iter()
                .map(|&j| Ok(evaluate_offline_map_j(&detector, &scenario, j, &cfg.eval.past)?))
                .collect::<anyhow::Result<_>>()?
        }
    };
    let out = OutDir::create(out_dir(cfg))?;
    let records: Vec<_> = results.iter().map(|r| r.record()).collect();
    out.write_jsonl("results.jsonl", &records)?;
    let rows: Vec<MetricRow> = results.iter().map(MetricRow::from).collect();
    out.write_csv("results.csv", &rows)?;
    Ok(rows
        .iter()
        .map(|r| format!("{} = {:.4}", r.metric, r.ap))
        .collect::<Vec<_>>()
        .join(", "))
}
