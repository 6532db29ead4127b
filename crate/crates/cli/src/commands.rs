use std::path::Path;

use anyhow::{bail, ensure, Context};
use etch_core::dataset::{generate_dataset, load_dataset};
use etch_core::harness::{
    export_attention, generalization_report, run_ablation, uncertainty_trace, write_ablation, write_csv, write_json,
    ReportContext,
};
use etch_core::model::{ModelConfig, PredictionDistribution, Variant};
use etch_core::oracle::simulate;
use etch_core::profile::lateral_grid;
use etch_core::recipe::Recipe;
use etch_core::training::{train_ensemble, Ensemble};
use tracing::info;

use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::{plot, Command, Common};

pub fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData { common, out } => gen_data(&common, &out),
        Command::Train { common, data, variants, out } => train(&common, &data, &variants, &out),
        Command::Predict { common, ckpt, recipe, variant, out } => {
            predict(&common, &ckpt, &recipe, variant, out.as_deref())
        }
        Command::Eval { common, data, ckpt, out } => eval(&common, &data, &ckpt, &out),
        Command::Ablation { common, data, ckpt, probes, out } => ablation(&common, &data, &ckpt, probes, &out),
        Command::Attention { common, ckpt, recipe, out } => attention(&common, &ckpt, &recipe, &out),
        Command::Trace { common, ckpt, recipe, variant, out } => trace(&common, &ckpt, &recipe, variant, &out),
        Command::Plot { common, inputs, out } => {
            RunConfig::load(common.config.as_deref())?;
            plot::render(&inputs, &out)
        }
        Command::Serve { common, ckpts, bind, static_dir } => {
            RunConfig::load(common.config.as_deref())?;
            let state = etch_service::AppState::load(&ckpts)?;
            let rt = tokio::runtime::Runtime::new().context("starting async runtime")?;
            rt.block_on(etch_service::serve(state, bind, static_dir))
        }
    }
}

fn read_recipe(path: &Path) -> anyhow::Result<Recipe> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading recipe {}", path.display()))?;
    let recipe: Recipe =
        serde_json::from_str(&text).with_context(|| format!("parsing recipe {}", path.display()))?;
    recipe.validate()?;
    Ok(recipe)
}

/// The configuration a dataset directory was generated with, when recorded.
fn dataset_config(dir: &Path) -> anyhow::Result<Option<RunConfig>> {
    let path = dir.join(RESOLVED_CONFIG);
    if !path.is_file() {
        return Ok(None);
    }
    RunConfig::load(Some(&path)).map(Some)
}

/// Loads `ckpt` if it is an ensemble directory, otherwise its `variant` subdirectory.
fn load_ensemble(ckpt: &Path, variant: Option<Variant>, fallback: Variant) -> anyhow::Result<Ensemble> {
    let dir = if ckpt.join("manifest.json").is_file() {
        ckpt.to_path_buf()
    } else {
        ckpt.join(variant.unwrap_or(fallback).name())
    };
    let ens = Ensemble::load(&dir).with_context(|| format!("loading ensemble {}", dir.display()))?;
    if let Some(v) = variant {
        ensure!(ens.variant() == v, "{} holds a {} ensemble, not {v}", dir.display(), ens.variant());
    }
    Ok(ens)
}

fn load_all(ckpt: &Path) -> anyhow::Result<Vec<Ensemble>> {
    let mut out = Vec::new();
    for v in Variant::ALL {
        let dir = ckpt.join(v.name());
        if dir.join("manifest.json").is_file() {
            out.push(Ensemble::load(&dir).with_context(|| format!("loading ensemble {}", dir.display()))?);
        }
    }
    if out.is_empty() {
        bail!("no ensemble subdirectories found in {}", ckpt.display());
    }
    Ok(out)
}

fn gen_data(common: &Common, out: &Path) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.dataset.seed = s;
    }
    let data = generate_dataset(&cfg.dataset, &cfg.oracle, out)?;
    cfg.write(out)?;
    println!(
        "wrote {} train, {} val, {} test records to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

fn train(common: &Common, data_dir: &Path, variants: &[Variant], out: &Path) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.train.base_seed = s;
    }
    let data = load_dataset(data_dir)?;
    let grid = data.train.first().map_or(0, |r| r.grid_size);
    ensure!(
        grid == cfg.model.grid_size,
        "dataset grid size {grid} differs from model.grid_size {}",
        cfg.model.grid_size
    );
    let variants = if variants.is_empty() { vec![Variant::Baseline, Variant::Weibull] } else { variants.to_vec() };
    cfg.write(out)?;
    for v in variants {
        let model_cfg = ModelConfig { variant: v, ..cfg.model.clone() };
        info!(variant = %v, members = cfg.train.ensemble_size, "training");
        let ens = train_ensemble(&data.train, &data.val, &model_cfg, &cfg.train)?;
        ens.save(&out.join(v.name()), Some(&cfg.train))?;
        for s in ens.summaries() {
            println!(
                "{v}: member seed {} best epoch {}/{} val NLL {:.6}",
                s.seed, s.best_epoch, s.epochs_run, s.best_val_nll
            );
        }
    }
    Ok(())
}

/// Mixture prediction with per-step partials filled in for the baseline by
/// prefix re-evaluation.
fn full_prediction(ens: &Ensemble, recipe: &Recipe) -> anyhow::Result<PredictionDistribution> {
    let mut p = ens.predict(recipe)?.mixture;
    if !ens.variant().accumulates() {
        let trace = uncertainty_trace(ens, recipe)?;
        p.per_step_mean_um = trace.steps.iter().map(|s| s.mean_um.clone()).collect();
        p.per_step_variance_um2 =
            trace.steps.iter().map(|s| s.sigma_um.iter().map(|v| v * v).collect()).collect();
    }
    Ok(p)
}

fn predict(
    common: &Common,
    ckpt: &Path,
    recipe_path: &Path,
    variant: Option<Variant>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    RunConfig::load(common.config.as_deref())?;
    let ens = load_ensemble(ckpt, variant, Variant::Weibull)?;
    let recipe = read_recipe(recipe_path)?;
    for (step, knob) in recipe.out_of_range(&ens.config().knob_ranges) {
        eprintln!("warning: steps[{step}].{knob} is outside the training range");
    }
    let p = full_prediction(&ens, &recipe)?;
    println!("{}", serde_json::to_string(&p)?);
    if let Some(out) = out {
        write_json(&out.join("prediction.json"), &p)?;
    }
    Ok(())
}

fn eval(common: &Common, data_dir: &Path, ckpt: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let data = load_dataset(data_dir)?;
    let ensembles = load_all(ckpt)?;
    let data_cfg = dataset_config(data_dir)?;
    let models: serde_json::Map<String, serde_json::Value> = ensembles
        .iter()
        .map(|e| Ok((e.variant().name().to_string(), serde_json::to_value(e.config())?)))
        .collect::<anyhow::Result<_>>()?;
    let ctx = ReportContext {
        dataset_seed: data_cfg.as_ref().map(|c| c.dataset.seed),
        oracle_seed: data_cfg.as_ref().map(|c| c.oracle.seed),
        config: serde_json::json!({
            "dataset": data_cfg.as_ref().map(|c| &c.dataset),
            "oracle": data_cfg.as_ref().map(|c| &c.oracle),
            "report": cfg.report,
            "models": models,
        }),
    };
    let refs: Vec<&Ensemble> = ensembles.iter().collect();
    let report = generalization_report(&data, &refs, &ctx, &cfg.report, out)?;
    cfg.write(out)?;
    for (name, r) in &report.variants {
        println!(
            "{name}: test RMSE {:.6} um (clean {:.6} um), mean NLL {:.6}; train RMSE {:.6} um",
            r.test.rmse_measured_um, r.test.rmse_clean_um, r.test.mean_nll, r.train.rmse_measured_um
        );
    }
    for (name, imp) in &report.improvement_vs_baseline {
        println!("{name}: RMSE improvement vs baseline {:.2}%", 100.0 * imp.rmse_measured_um);
    }
    Ok(())
}

fn ablation(common: &Common, data_dir: &Path, ckpt: &Path, probes: Option<usize>, out: &Path) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(n) = probes {
        cfg.ablation.probes = n;
    }
    let oracle = dataset_config(data_dir)?.map_or_else(|| cfg.oracle.clone(), |c| c.oracle);
    let data = load_dataset(data_dir)?;
    let recipes: Vec<Recipe> = data.test.iter().take(cfg.ablation.probes).map(|r| r.recipe.clone()).collect();
    let weibull = load_ensemble(ckpt, Some(Variant::Weibull), Variant::Weibull)?;
    let accum = load_ensemble(ckpt, Some(Variant::AccumOnly), Variant::AccumOnly)?;
    let bundle = run_ablation(&recipes, &weibull, &accum, &oracle)?;
    write_ablation(&bundle, out)?;
    cfg.write(out)?;
    println!(
        "mean per-step partial RMSE over {} probes: weibull {:.6} um, accum_only {:.6} um",
        recipes.len(),
        bundle.weibull_mean_step_rmse_um,
        bundle.accum_only_mean_step_rmse_um
    );
    Ok(())
}

fn attention(common: &Common, ckpt: &Path, recipe_path: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let ens = load_ensemble(ckpt, Some(Variant::Baseline), Variant::Baseline)?;
    let recipe = read_recipe(recipe_path)?;
    let clean = simulate(&recipe, &cfg.oracle, false)?.clean.depths_um;
    let summary = export_attention(&ens, &recipe, &clean, &cfg.attention)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("attention.json"), &summary)?;
    let mut header = vec!["x_norm".to_string()];
    header.extend((1..=recipe.len()).map(|t| format!("step_{t}_weight")));
    let rows: Vec<Vec<String>> = lateral_grid(summary.matrix.len())
        .iter()
        .zip(&summary.matrix)
        .map(|(x, row)| std::iter::once(x.to_string()).chain(row.iter().map(f64::to_string)).collect())
        .collect();
    write_csv(&out.join("attention_matrix.csv"), &header, &rows)?;
    cfg.write(out)?;
    println!(
        "bottom band attends most to step {} of {}{}",
        summary.bottom_peak_step,
        recipe.len(),
        if summary.bottom_peaks_at_last_step { " (the last step)" } else { "" }
    );
    Ok(())
}

fn trace(common: &Common, ckpt: &Path, recipe_path: &Path, variant: Option<Variant>, out: &Path) -> anyhow::Result<()> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let ens = load_ensemble(ckpt, variant, Variant::Weibull)?;
    let recipe = read_recipe(recipe_path)?;
    let t = uncertainty_trace(&ens, &recipe)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("trace.json"), &t)?;
    let header = ["step", "x_norm", "mean_um", "sigma_um"].map(String::from);
    let mut rows = Vec::new();
    for s in &t.steps {
        for (g, x) in lateral_grid(s.mean_um.len()).iter().enumerate() {
            rows.push(vec![s.step.to_string(), x.to_string(), s.mean_um[g].to_string(), s.sigma_um[g].to_string()]);
        }
    }
    write_csv(&out.join("trace.csv"), &header, &rows)?;
    cfg.write(out)?;
    for (i, s) in t.mean_sigma_um.iter().enumerate() {
        println!("step {}: mean sigma {s:.6} um", i + 1);
    }
    Ok(())
}
