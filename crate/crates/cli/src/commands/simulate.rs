use anyhow::bail;
use sapkit_core::harness::{evaluate_sap, run_stream, EvalOptions, StreamTrace};
use serde::Serialize;

use crate::config::{out_dir, ModelToggles, RunConfig};
use crate::detector::load_detector;
use crate::report::OutDir;

#[derive(Serialize)]
pub(crate) struct PairingRow {
    emission: usize,
    time: f64,
    target: i64,
    source_loop: usize,
    warmup: bool,
    frames: String,
}

pub(crate) fn pairing_rows(trace: &StreamTrace, pairing: &[sapkit_core::harness::PairingEntry]) -> Vec<PairingRow> {
    pairing
        .iter()
        .map(|p| {
            let e = &trace.emissions[p.emission];
            PairingRow {
                emission: p.emission,
                time: e.time,
                target: e.target,
                source_loop: e.source_loop,
                warmup: e.warmup,
                frames: p.frames.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(";"),
            }
        })
        .collect()
}

/// Run one stream, write `trace.jsonl`, `result.json` and `pairing.csv`.
pub fn simulate(cfg: &RunConfig, toggles: ModelToggles) -> anyhow::Result<String> {
    let scenario = super::scenario(cfg)?;
    let loaded = load_detector(&cfg.detector, toggles)?;
    let detector = loaded.bind(&scenario)?;
    let out = OutDir::create(out_dir(cfg))?;

    let trace = run_stream(&detector, &scenario, &cfg.delays, &cfg.stream)?;
    out.write("trace.jsonl", &trace.to_jsonl()?)?;
    if let Some(f) = &trace.failure {
        bail!("simulation failed at loop {} (frame {}): {}", f.loop_index, f.frame, f.message);
    }
    let result = evaluate_sap(
        &trace,
        &scenario,
        EvalOptions {
            include_warmup: cfg.eval.include_warmup,
        },
    )?;
    out.write_json("result.json", &result.record())?;
    out.write_csv("pairing.csv", &pairing_rows(&trace, &result.pairing))?;
    Ok(format!(
        "{} = {:.4} over {} loops, {} emissions, {} missed frames [{}]",
        result.metric,
        result.ap(),
        trace.loops.len(),
        trace.emissions.len(),
        result.misses.len(),
        result.fingerprint
    ))
}
