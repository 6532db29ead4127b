//! Experiments and diagnostics: the length-generalization comparison, the
//! per-step ablation against oracle partials, attention export, uncertainty
//! traces, and the metrics they share.
//!
//! Reports are JSON; plot series are CSV files whose headers carry units.

mod ablation;
mod attention;
mod generalization;
mod metrics;
mod trace;

use std::path::Path;

use serde::Serialize;

pub use ablation::{run_ablation, write_ablation, AblationBundle, ProbeComparison};
pub use attention::{export_attention, percentile, AttentionSummary, BandConfig};
pub use generalization::{
    generalization_report, improvement, metrics, predict_all, run_generalization, ExperimentReport,
    GeneralizationRun, ReportContext, ReportOptions, Seeds, VariantMetrics, VariantReport,
};
pub use metrics::{mean_nll, rmse};
pub use trace::{uncertainty_trace, TraceStep, UncertaintyTrace};

use crate::error::{Error, Result};

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::invalid(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let to_io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(to_io)?;
    w.write_record(header).map_err(to_io)?;
    for r in rows {
        w.write_record(r).map_err(to_io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
