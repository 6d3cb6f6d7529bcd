//! Metric rows and atomic CSV emission.
//!
//! Schema: `variant,nfe,step,metric,value,n` with shortest round-trip float
//! formatting, so identical runs produce byte-identical files.

use anyhow::{bail, Context, Result};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub variant: String,
    pub nfe: usize,
    /// Step index, or "terminal" for end-of-trajectory metrics.
    pub step: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

impl MetricsRow {
    pub fn terminal(variant: &str, nfe: usize, metric: &str, value: f64, n: usize) -> Self {
        MetricsRow {
            variant: variant.to_string(),
            nfe,
            step: "terminal".to_string(),
            metric: metric.to_string(),
            value,
            n,
        }
    }

    pub fn at_step(variant: &str, nfe: usize, step: usize, metric: &str, value: f64, n: usize) -> Self {
        MetricsRow {
            variant: variant.to_string(),
            nfe,
            step: step.to_string(),
            metric: metric.to_string(),
            value,
            n,
        }
    }
}

pub fn render_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut out = String::from("variant,nfe,step,metric,value,n\n");
    for row in rows {
        if !row.value.is_finite() {
            bail!(
                "non-finite value for metric {} ({} step {})",
                row.metric,
                row.variant,
                row.step
            );
        }
        writeln!(
            out,
            "{},{},{},{},{},{}",
            row.variant, row.nfe, row.step, row.metric, row.value, row.n
        )?;
    }
    Ok(out)
}

/// Whole-file atomic write: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, body).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_atomic(path, &render_csv(rows)?)
}
