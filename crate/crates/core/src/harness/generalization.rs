use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tracing::info;

use super::metrics::{mean_nll, rmse};
use super::{write_csv, write_json};
use crate::dataset::{Dataset, Record};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PredictionDistribution, Variant};
use crate::parallel;
use crate::profile::lateral_grid;
use crate::training::{train_ensemble, Ensemble, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub rmse_measured_um: f64,
    pub rmse_clean_um: f64,
    pub mean_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub test: VariantMetrics,
    pub train: VariantMetrics,
    pub ensemble_size: usize,
    pub member_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub dataset: Option<u64>,
    pub oracle: Option<u64>,
    pub members: BTreeMap<String, Vec<u64>>,
}

/// Everything needed to reproduce and compare one generalization run.
/// Contains no timing so identical inputs give an identical file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Name of the metric used as the headline score.
    pub headline_metric: String,
    pub train_records: usize,
    pub test_records: usize,
    pub test_step_counts: Vec<usize>,
    pub variants: BTreeMap<String, VariantReport>,
    /// `(baseline − variant) / baseline` for each metric, per non-baseline variant.
    pub improvement_vs_baseline: BTreeMap<String, VariantMetrics>,
    pub seeds: Seeds,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    /// Test recipes written to the profile-overlay series.
    pub overlay_recipes: usize,
    pub histogram_bins: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { overlay_recipes: 8, histogram_bins: 41 }
    }
}

/// Reproducibility inputs echoed into the report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportContext {
    pub dataset_seed: Option<u64>,
    pub oracle_seed: Option<u64>,
    pub config: serde_json::Value,
}

/// Mixture predictions of `ensemble` for every record, in record order.
pub fn predict_all(ensemble: &Ensemble, records: &[Record]) -> Result<Vec<PredictionDistribution>> {
    parallel::try_map(records, |r| Ok(ensemble.predict(&r.recipe)?.mixture))
}

pub fn metrics(preds: &[PredictionDistribution], records: &[Record]) -> Result<VariantMetrics> {
    let mean: Vec<Vec<f64>> = preds.iter().map(|p| p.mean_um.clone()).collect();
    let var: Vec<Vec<f64>> = preds.iter().map(|p| p.variance_um2.clone()).collect();
    let measured: Vec<Vec<f64>> = records.iter().map(|r| r.profile_measured_um.clone()).collect();
    let clean: Vec<Vec<f64>> = records.iter().map(|r| r.profile_clean_um.clone()).collect();
    Ok(VariantMetrics {
        rmse_measured_um: rmse(&mean, &measured)?,
        rmse_clean_um: rmse(&mean, &clean)?,
        mean_nll: mean_nll(&mean, &var, &measured)?,
    })
}

fn ratio(base: f64, variant: f64) -> f64 {
    (base - variant) / base
}

pub fn improvement(base: &VariantMetrics, variant: &VariantMetrics) -> VariantMetrics {
    VariantMetrics {
        rmse_measured_um: ratio(base.rmse_measured_um, variant.rmse_measured_um),
        rmse_clean_um: ratio(base.rmse_clean_um, variant.rmse_clean_um),
        mean_nll: ratio(base.mean_nll, variant.mean_nll),
    }
}

/// Evaluates every ensemble on the identical train and test records and
/// writes `report.json`, `profile_overlay.csv` and `error_histogram.csv`
/// into `out_dir`. One ensemble must be the baseline.
pub fn generalization_report(
    data: &Dataset,
    ensembles: &[&Ensemble],
    ctx: &ReportContext,
    opts: &ReportOptions,
    out_dir: &Path,
) -> Result<ExperimentReport> {
    if data.test.is_empty() || data.train.is_empty() {
        return Err(Error::invalid("generalization needs non-empty train and test splits"));
    }
    if !ensembles.iter().any(|e| e.variant() == Variant::Baseline) {
        return Err(Error::invalid("generalization report needs a baseline ensemble"));
    }
    let mut variants = BTreeMap::new();
    let mut seeds = BTreeMap::new();
    let mut test_preds = Vec::new();
    for ens in ensembles {
        let name = ens.variant().name().to_string();
        if variants.contains_key(&name) {
            return Err(Error::invalid(format!("variant `{name}` given twice")));
        }
        let test = predict_all(ens, &data.test)?;
        let test_metrics = metrics(&test, &data.test)?;
        let train_metrics = metrics(&predict_all(ens, &data.train)?, &data.train)?;
        info!(variant = %name, ?test_metrics, ?train_metrics, "evaluated");
        let member_seeds: Vec<u64> = ens.summaries().iter().map(|s| s.seed).collect();
        seeds.insert(name.clone(), member_seeds.clone());
        variants.insert(
            name.clone(),
            VariantReport { test: test_metrics, train: train_metrics, ensemble_size: ens.len(), member_seeds },
        );
        test_preds.push((name, test));
    }
    let base = variants[Variant::Baseline.name()].test;
    let improvement_vs_baseline = variants
        .iter()
        .filter(|(n, _)| n.as_str() != Variant::Baseline.name())
        .map(|(n, r)| (n.clone(), improvement(&base, &r.test)))
        .collect();

    let mut steps: Vec<usize> = data.test.iter().map(|r| r.recipe.len()).collect();
    steps.sort_unstable();
    steps.dedup();
    let report = ExperimentReport {
        headline_metric: "rmse_measured_um".into(),
        train_records: data.train.len(),
        test_records: data.test.len(),
        test_step_counts: steps,
        variants,
        improvement_vs_baseline,
        seeds: Seeds { dataset: ctx.dataset_seed, oracle: ctx.oracle_seed, members: seeds },
        config: ctx.config.clone(),
    };

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join("report.json"), &report)?;
    write_overlay(&out_dir.join("profile_overlay.csv"), &data.test, &test_preds, opts.overlay_recipes)?;
    write_histogram(&out_dir.join("error_histogram.csv"), &data.test, &test_preds, opts.histogram_bins)?;
    Ok(report)
}

fn write_overlay(
    path: &Path,
    records: &[Record],
    preds: &[(String, Vec<PredictionDistribution>)],
    n: usize,
) -> Result<()> {
    let mut header: Vec<String> = ["recipe_id", "x_norm", "clean_um", "measured_um"].map(String::from).to_vec();
    for (name, _) in preds {
        header.push(format!("{name}_mean_um"));
        header.push(format!("{name}_sigma_um"));
    }
    let mut rows = Vec::new();
    for (i, rec) in records.iter().enumerate().take(n) {
        let grid = lateral_grid(rec.grid_size);
        for (g, x) in grid.iter().enumerate() {
            let mut row = vec![
                rec.recipe.id.clone(),
                x.to_string(),
                rec.profile_clean_um[g].to_string(),
                rec.profile_measured_um[g].to_string(),
            ];
            for (_, p) in preds {
                row.push(p[i].mean_um[g].to_string());
                row.push(p[i].variance_um2[g].sqrt().to_string());
            }
            rows.push(row);
        }
    }
    write_csv(path, &header, &rows)
}

/// Histogram of signed errors `mean − measured` over all test grid points,
/// on a shared symmetric bin range.
fn write_histogram(
    path: &Path,
    records: &[Record],
    preds: &[(String, Vec<PredictionDistribution>)],
    bins: usize,
) -> Result<()> {
    let bins = bins.max(1);
    let errors: Vec<Vec<f64>> = preds
        .iter()
        .map(|(_, p)| {
            p.iter()
                .zip(records)
                .flat_map(|(p, r)| p.mean_um.iter().zip(&r.profile_measured_um).map(|(m, y)| m - y))
                .collect()
        })
        .collect();
    let span = errors.iter().flatten().fold(0.0f64, |a, e| a.max(e.abs())).max(1e-12);
    let width = 2.0 * span / bins as f64;
    let mut counts = vec![vec![0usize; bins]; preds.len()];
    for (v, errs) in errors.iter().enumerate() {
        for e in errs {
            let b = (((e + span) / width) as usize).min(bins - 1);
            counts[v][b] += 1;
        }
    }
    let mut header: Vec<String> = vec!["bin_low_um".into(), "bin_high_um".into()];
    header.extend(preds.iter().map(|(n, _)| format!("{n}_count")));
    let rows: Vec<Vec<String>> = (0..bins)
        .map(|b| {
            let lo = -span + b as f64 * width;
            let mut row = vec![lo.to_string(), (lo + width).to_string()];
            row.extend(counts.iter().map(|c| c[b].to_string()));
            row
        })
        .collect();
    write_csv(path, &header, &rows)
}

/// Output of [`run_generalization`].
#[derive(Debug, Clone)]
pub struct GeneralizationRun {
    pub report: ExperimentReport,
    pub baseline: Ensemble,
    pub weibull: Ensemble,
    pub wall_clock_s: f64,
}

/// Trains baseline and weibull ensembles on `data.train` (early stopping on
/// `data.val`) and reports both on `data.test`. Wall-clock time is written
/// to `timing.json`, kept apart from the deterministic report.
pub fn run_generalization(
    data: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    ctx: &ReportContext,
    opts: &ReportOptions,
    out_dir: &Path,
) -> Result<GeneralizationRun> {
    let start = Instant::now();
    let mut trained = Vec::new();
    for variant in [Variant::Baseline, Variant::Weibull] {
        let cfg = ModelConfig { variant, ..model_cfg.clone() };
        let ens = train_ensemble(&data.train, &data.val, &cfg, train_cfg)?;
        ens.save(&out_dir.join("checkpoints").join(variant.name()), Some(train_cfg))?;
        trained.push(ens);
    }
    let report = generalization_report(data, &[&trained[0], &trained[1]], ctx, opts, out_dir)?;
    let wall_clock_s = start.elapsed().as_secs_f64();
    write_json(&out_dir.join("timing.json"), &serde_json::json!({ "wall_clock_s": wall_clock_s }))?;
    let weibull = trained.pop().expect("two ensembles");
    let baseline = trained.pop().expect("two ensembles");
    Ok(GeneralizationRun { report, baseline, weibull, wall_clock_s })
}
