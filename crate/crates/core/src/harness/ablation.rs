use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::info;

use super::metrics::rmse;
use super::{write_csv, write_json};
use crate::error::{Error, Result};
use crate::model::Variant;
use crate::oracle::{simulate, OracleConfig};
use crate::parallel;
use crate::profile::lateral_grid;
use crate::recipe::Recipe;
use crate::training::Ensemble;

/// Per-step comparison of one probe recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeComparison {
    pub recipe_id: String,
    /// Noise-free accumulated profile after each step.
    pub oracle_partials_um: Vec<Vec<f64>>,
    pub weibull_partials_um: Vec<Vec<f64>>,
    pub accum_only_partials_um: Vec<Vec<f64>>,
    pub weibull_step_rmse_um: Vec<f64>,
    pub accum_only_step_rmse_um: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationBundle {
    pub probes: Vec<ProbeComparison>,
    /// Mean over probes and steps of the per-step partial-profile RMSE.
    pub weibull_mean_step_rmse_um: f64,
    pub accum_only_mean_step_rmse_um: f64,
    /// Whether every model partial sequence was non-decreasing in step index.
    pub partials_monotone: bool,
}

fn monotone(partials: &[Vec<f64>]) -> bool {
    partials.windows(2).all(|w| w[0].iter().zip(&w[1]).all(|(a, b)| b >= a))
}

fn step_rmse(model: &[Vec<f64>], oracle: &[Vec<f64>]) -> Result<Vec<f64>> {
    model
        .iter()
        .zip(oracle)
        .map(|(m, o)| rmse(std::slice::from_ref(m), std::slice::from_ref(o)))
        .collect()
}

/// Compares ensemble-mean per-step partial profiles of the weibull and
/// accum_only variants against the oracle's noise-free partials.
pub fn run_ablation(
    probes: &[Recipe],
    weibull: &Ensemble,
    accum_only: &Ensemble,
    oracle: &OracleConfig,
) -> Result<AblationBundle> {
    for (ens, want) in [(weibull, Variant::Weibull), (accum_only, Variant::AccumOnly)] {
        if ens.variant() != want {
            return Err(Error::VariantMismatch { expected: want.to_string(), found: ens.variant().to_string() });
        }
        if ens.config().grid_size != oracle.grid_size {
            return Err(Error::invalid("ensemble and oracle grid sizes differ"));
        }
    }
    if probes.is_empty() {
        return Err(Error::invalid("ablation needs at least one probe recipe"));
    }
    let comparisons = parallel::try_map(probes, |recipe| {
        let oracle_partials_um: Vec<Vec<f64>> =
            simulate(recipe, oracle, false)?.per_step.into_iter().map(|p| p.depths_um).collect();
        let weibull_partials_um = weibull.predict(recipe)?.mixture.per_step_mean_um;
        let accum_only_partials_um = accum_only.predict(recipe)?.mixture.per_step_mean_um;
        Ok(ProbeComparison {
            recipe_id: recipe.id.clone(),
            weibull_step_rmse_um: step_rmse(&weibull_partials_um, &oracle_partials_um)?,
            accum_only_step_rmse_um: step_rmse(&accum_only_partials_um, &oracle_partials_um)?,
            oracle_partials_um,
            weibull_partials_um,
            accum_only_partials_um,
        })
    })?;

    let mean = |f: fn(&ProbeComparison) -> &Vec<f64>| {
        let all: Vec<f64> = comparisons.iter().flat_map(|c| f(c).iter().copied()).collect();
        all.iter().sum::<f64>() / all.len() as f64
    };
    let weibull_mean = mean(|c| &c.weibull_step_rmse_um);
    let accum_mean = mean(|c| &c.accum_only_step_rmse_um);
    let partials_monotone = comparisons
        .iter()
        .all(|c| monotone(&c.weibull_partials_um) && monotone(&c.accum_only_partials_um));
    info!(weibull_mean, accum_mean, partials_monotone, probes = probes.len(), "ablation");
    Ok(AblationBundle {
        probes: comparisons,
        weibull_mean_step_rmse_um: weibull_mean,
        accum_only_mean_step_rmse_um: accum_mean,
        partials_monotone,
    })
}

/// Writes `ablation.json` and a long-format `ablation_partials.csv`.
pub fn write_ablation(bundle: &AblationBundle, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join("ablation.json"), bundle)?;
    let header = ["recipe_id", "step", "x_norm", "oracle_um", "weibull_um", "accum_only_um"].map(String::from);
    let mut rows = Vec::new();
    for c in &bundle.probes {
        for (t, oracle) in c.oracle_partials_um.iter().enumerate() {
            for (g, x) in lateral_grid(oracle.len()).iter().enumerate() {
                rows.push(vec![
                    c.recipe_id.clone(),
                    (t + 1).to_string(),
                    x.to_string(),
                    oracle[g].to_string(),
                    c.weibull_partials_um[t][g].to_string(),
                    c.accum_only_partials_um[t][g].to_string(),
                ]);
            }
        }
    }
    write_csv(&out_dir.join("ablation_partials.csv"), &header, &rows)
}
