use anyhow::bail;
use sapkit_core::model::run_gradient_checks;
use serde::Serialize;

use crate::config::{out_dir, RunConfig};
use crate::report::OutDir;

/// Largest relative error accepted by the checks.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Serialize)]
struct Row {
    check: String,
    max_rel_error: f64,
    coordinates: usize,
    pass: bool,
}

pub fn gradcheck(cfg: &RunConfig) -> anyhow::Result<String> {
    let rows: Vec<Row> = run_gradient_checks(cfg.seed)?
        .into_iter()
        .map(|r| Row {
            pass: r.max_rel_error < TOLERANCE,
            check: r.name,
            max_rel_error: r.max_rel_error,
            coordinates: r.coordinates,
        })
        .collect();
    let out = OutDir::create(out_dir(cfg))?;
    out.write_csv("gradcheck.csv", &rows)?;
    let summary = rows
        .iter()
        .map(|r| format!("{} {:.1e}", r.check, r.max_rel_error))
        .collect::<Vec<_>>()
        .join(", ");
    if let Some(bad) = rows.iter().find(|r| !r.pass) {
        bail!("gradient check {} failed: {:.3e} >= {TOLERANCE:e} ({summary})", bad.check, bad.max_rel_error);
    }
    Ok(summary)
}
