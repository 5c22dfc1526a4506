use anyhow::bail;
use rayon::prelude::*;
use sapkit_core::harness::{evaluate_offline_map_j, evaluate_sap, run_stream, EvalOptions, EvalResult, Scenario, StreamConfig};
use serde::{Deserialize, Serialize};

use crate::config::{config_err, out_dir, MethodSpec, ModelToggles, RunConfig};
use crate::detector::{load_detector, LoadedDetector};
use crate::report::{MetricRow, OutDir};

#[derive(Debug, Clone, Copy)]
enum Axis {
    DelayFactor(f64),
    Horizon(i64),
}

struct Point {
    method: usize,
    axis: Axis,
}

/// One line of `series.csv`: plot-ready `(x, ap)` per method and metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub method: String,
    pub axis: String,
    pub x: f64,
    pub metric: String,
    pub ap: f64,
}

#[derive(Serialize)]
struct FailureRow {
    method: String,
    axis: String,
    x: f64,
    error: String,
}

fn axis_parts(a: Axis) -> (&'static str, f64) {
    match a {
        Axis::DelayFactor(d) => ("delay_factor", d),
        Axis::Horizon(j) => ("horizon", j as f64),
    }
}

fn run_point(cfg: &RunConfig, scenario: &Scenario, method: &MethodSpec, detector: &LoadedDetector, axis: Axis) -> anyhow::Result<EvalResult> {
    let det = detector.bind(scenario)?;
    match axis {
        Axis::DelayFactor(d) => {
            let delays = cfg.delays.clone().with_factor(d);
            let stream = StreamConfig {
                toggles: method.toggles.unwrap_or(cfg.stream.toggles),
                ..cfg.stream.clone()
            };
            let trace = run_stream(&det, scenario, &delays, &stream)?;
            if let Some(f) = &trace.failure {
                bail!("loop {} failed: {}", f.loop_index, f.message);
            }
            Ok(evaluate_sap(
                &trace,
                scenario,
                EvalOptions {
                    include_warmup: cfg.eval.include_warmup,
                },
            )?)
        }
        Axis::Horizon(j) => Ok(evaluate_offline_map_j(&det, scenario, j, &cfg.eval.past)?),
    }
}

/// Every method × delay factor (sAP_d) and × horizon (mAP_j).
pub fn sweep(cfg: &RunConfig, toggles: ModelToggles) -> anyhow::Result<String> {
    let methods: Vec<MethodSpec> = if cfg.sweep.methods.is_empty() {
        vec![MethodSpec {
            name: "default".into(),
            detector: cfg.detector.clone(),
            toggles: None,
        }]
    } else {
        cfg.sweep.methods.clone()
    };
    let mut axes = Vec::new();
    if cfg.sweep.streaming {
        axes.extend(cfg.eval.delay_factors.iter().map(|&d| Axis::DelayFactor(d)));
    }
    if cfg.sweep.offline {
        axes.extend(cfg.eval.horizons.iter().map(|&j| Axis::Horizon(j)));
    }
    if axes.is_empty() {
        return Err(config_err("sweep: empty grid (no delay factors or horizons selected)"));
    }
    let detectors = methods
        .iter()
        .map(|m| load_detector(&m.detector, toggles))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let scenario = super::scenario(cfg)?;
    for d in &detectors {
        d.bind(&scenario)?;
    }
    let points: Vec<Point> = (0..methods.len())
        .flat_map(|m| axes.iter().map(move |&axis| Point { method: m, axis }))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.sweep.workers).build()?;
    let outcomes: Vec<anyhow::Result<EvalResult>> = pool.install(|| {
        points
            .par_iter()
            .map(|p| run_point(cfg, &scenario, &methods[p.method], &detectors[p.method], p.axis))
            .collect()
    });

    let out = OutDir::create(out_dir(cfg))?;
    let mut records = Vec::new();
    let mut series = Vec::new();
    let mut failures = Vec::new();
    let mut columns: Vec<String> = Vec::new();
    let mut cells: Vec<Vec<Option<f64>>> = vec![Vec::new(); methods.len()];
    for (p, outcome) in points.iter().zip(&outcomes) {
        let name = &methods[p.method].name;
        let (axis, x) = axis_parts(p.axis);
        match outcome {
            Ok(r) => {
                let mut rec = r.record();
                rec.insert("method".into(), serde_json::json!(name));
                rec.insert(axis.into(), serde_json::json!(x));
                records.push(rec);
                series.push(SeriesRow {
                    method: name.clone(),
                    axis: axis.into(),
                    x,
                    metric: r.metric.clone(),
                    ap: r.ap(),
                });
                if !columns.contains(&r.metric) {
                    columns.push(r.metric.clone());
                }
                let col = columns.iter().position(|c| *c == r.metric).expect("just inserted");
                let row = &mut cells[p.method];
                row.resize(row.len().max(col + 1), None);
                row[col] = Some(r.ap());
            }
            Err(e) => failures.push(FailureRow {
                method: name.clone(),
                axis: axis.into(),
                x,
                error: format!("{e:#}"),
            }),
        }
    }
    out.write_jsonl("results.jsonl", &records)?;
    out.write_csv("series.csv", &series)?;
    let header: Vec<String> = std::iter::once("method".to_string()).chain(columns.iter().cloned()).collect();
    let rows: Vec<Vec<String>> = methods
        .iter()
        .zip(&cells)
        .map(|(m, row)| {
            std::iter::once(m.name.clone())
                .chain((0..columns.len()).map(|c| row.get(c).copied().flatten().map(|v| v.to_string()).unwrap_or_default()))
                .collect()
        })
        .collect();
    out.write_table("sweep.csv", &header, &rows)?;
    let metric_rows: Vec<MetricRow> = outcomes.iter().filter_map(|o| o.as_ref().ok()).map(MetricRow::from).collect();
    out.write_csv("results.csv", &metric_rows)?;
    if !failures.is_empty() {
        out.write_csv("failures.csv", &failures)?;
        bail!("{} of {} grid points failed; see failures.csv", failures.len(), points.len());
    }
    Ok(format!("{} methods × {} grid points written", methods.len(), axes.len()))
}
