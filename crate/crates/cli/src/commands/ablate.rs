use std::path::PathBuf;

use anyhow::bail;
use sapkit_core::harness::{evaluate_offline_map_j, evaluate_sap, run_stream, EvalOptions, Scenario, StreamConfig};
use sapkit_core::model::ModelParams;
use serde::Serialize;

use crate::config::{config_err, out_dir, Overrides, RunConfig, ToggleName};
use crate::detector::{load_checkpoint, on_off, LoadedDetector};
use crate::report::{file_label, OutDir};

#[derive(Serialize)]
struct StreamingRow {
    planner: &'static str,
    buffer: &'static str,
    metric: String,
    ap: f64,
    ap50: f64,
    loops: usize,
    mean_delay: f64,
    mean_recompute: f64,
    fingerprint: String,
}

fn requested(ov: &Overrides, name: ToggleName) -> Option<bool> {
    ov.toggles.iter().rev().find(|t| t.name == name).map(|t| t.on)
}

fn streaming_rows(cfg: &RunConfig, scenario: &Scenario, params: &ModelParams, ov: &Overrides) -> anyhow::Result<Vec<StreamingRow>> {
    let det = LoadedDetector::Model(params.clone());
    let det = det.bind(scenario)?;
    let mut rows = Vec::new();
    for planner in [true, false] {
        for buffer in [true, false] {
            if requested(ov, ToggleName::Planner).is_some_and(|p| p != planner)
                || requested(ov, ToggleName::Buffer).is_some_and(|b| b != buffer)
            {
                continue;
            }
            let mut stream = StreamConfig { ..cfg.stream.clone() };
            stream.toggles.planner = planner;
            stream.toggles.feature_buffer = buffer;
            let trace = run_stream(&det, scenario, &cfg.delays, &stream)?;
            if let Some(f) = &trace.failure {
                bail!("planner={} buffer={}: loop {} failed: {}", on_off(planner), on_off(buffer), f.loop_index, f.message);
            }
            let r = evaluate_sap(
                &trace,
                scenario,
                EvalOptions {
                    include_warmup: cfg.eval.include_warmup,
                },
            )?;
            let n = trace.loops.len().max(1) as f64;
            rows.push(StreamingRow {
                planner: on_off(planner),
                buffer: on_off(buffer),
                metric: r.metric.clone(),
                ap: r.ap(),
                ap50: r.report.ap50(),
                loops: trace.loops.len(),
                mean_delay: trace.loops.iter().map(|l| l.total).sum::<f64>() / n,
                mean_recompute: trace.loops.iter().map(|l| l.recompute).sum::<f64>() / n,
                fingerprint: r.fingerprint,
            });
        }
    }
    Ok(rows)
}

/// Planner × buffer under streaming sAP on the main checkpoint, and one
/// offline mAP_j row per checkpoint variant (bias table, attention neck).
pub fn ablate(cfg: &RunConfig, ov: &Overrides) -> anyhow::Result<String> {
    let Some(primary) = &cfg.detector.checkpoint else {
        return Err(config_err("detector.checkpoint: ablate needs a trained checkpoint"));
    };
    if cfg.eval.horizons.is_empty() {
        return Err(config_err("eval.horizons: empty grid"));
    }
    let paths: Vec<PathBuf> = std::iter::once(primary.clone()).chain(cfg.ablate.checkpoints.iter().cloned()).collect();
    let models = paths.iter().map(|p| load_checkpoint(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let mt = ov.model_toggles();
    let offline: Vec<usize> = (0..models.len())
        .filter(|&i| {
            let c = &models[i].config;
            mt.rtpe.is_none_or(|r| r == c.use_rtpe) && mt.tat.is_none_or(|t| t == c.use_tat)
        })
        .collect();
    if offline.is_empty() {
        return Err(config_err(format!(
            "no checkpoint was trained with the requested toggles (rtpe={}, tat={})",
            mt.rtpe.map(on_off).unwrap_or("any"),
            mt.tat.map(on_off).unwrap_or("any")
        )));
    }

    let scenario = super::scenario(cfg)?;
    let out = OutDir::create(out_dir(cfg))?;
    let streaming = streaming_rows(cfg, &scenario, &models[0], ov)?;
    out.write_csv("ablation_streaming.csv", &streaming)?;

    let mut header = vec!["checkpoint".to_string(), "rtpe".into(), "tat".into()];
    header.extend(cfg.eval.horizons.iter().map(|j| format!("mAP_{j}")));
    let mut rows = Vec::new();
    for &i in &offline {
        let det = LoadedDetector::Model(models[i].clone());
        let det = det.bind(&scenario)?;
        let c = &models[i].config;
        let mut row = vec![file_label(&paths[i]), on_off(c.use_rtpe).into(), on_off(c.use_tat).into()];
        for &j in &cfg.eval.horizons {
            row.push(evaluate_offline_map_j(&det, &scenario, j, &cfg.eval.past)?.ap().to_string());
        }
        rows.push(row);
    }
    out.write_table("ablation_offline.csv", &header, &rows)?;
    Ok(streaming
        .iter()
        .map(|r| format!("planner={} buffer={}: {} {:.4}", r.planner, r.buffer, r.metric, r.ap))
        .collect::<Vec<_>>()
        .join("; "))
}
