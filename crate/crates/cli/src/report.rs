use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use sapkit_core::harness::EvalResult;
use serde::Serialize;

pub struct OutDir(PathBuf);

impl OutDir {
    pub fn create(path: PathBuf) -> anyhow::Result<Self> {
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self(path))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> anyhow::Result<PathBuf> {
        let p = self.path(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> anyhow::Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, &text)
    }

    pub fn write_jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> anyhow::Result<PathBuf> {
        let mut text = String::new();
        for r in rows {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        self.write(name, &text)
    }

    pub fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> anyhow::Result<PathBuf> {
        let p = self.path(name);
        let mut w = csv::Writer::from_path(&p).with_context(|| format!("writing {}", p.display()))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(p)
    }

    /// CSV with a dynamic header.
    pub fn write_table(&self, name: &str, header: &[String], rows: &[Vec<String>]) -> anyhow::Result<PathBuf> {
        let p = self.path(name);
        let mut w = csv::Writer::from_path(&p).with_context(|| format!("writing {}", p.display()))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(p)
    }
}

/// One row per metric in results CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    pub fingerprint: String,
}

impl From<&EvalResult> for MetricRow {
    fn from(r: &EvalResult) -> Self {
        Self {
            metric: r.metric.clone(),
            ap: r.report.ap_mean,
            ap50: r.report.ap50(),
            ap75: r.report.ap75(),
            ap_small: r.report.ap_small,
            ap_medium: r.report.ap_medium,
            ap_large: r.report.ap_large,
            fingerprint: r.fingerprint.clone(),
        }
    }
}

/// Parent directory and file name, for display in reports; keeps output
/// free of machine-specific prefixes.
pub fn file_label(p: &Path) -> String {
    let name = p.file_name().map(|n| n.to_string_lossy().into_owned());
    let parent = p.parent().and_then(|d| d.file_name()).map(|n| n.to_string_lossy().into_owned());
    match (parent, name) {
        (Some(d), Some(n)) => format!("{d}/{n}"),
        (None, Some(n)) => n,
        _ => p.display().to_string(),
    }
}
