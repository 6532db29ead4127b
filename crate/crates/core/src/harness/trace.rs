use serde::{Deserialize, Serialize};
use tracing::info;

use crate::error::Result;
use crate::recipe::Recipe;
use crate::training::{mixture_moments, Ensemble};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// 1-based.
    pub step: usize,
    pub mean_um: Vec<f64>,
    /// Mixture standard deviation of the partial profile.
    pub sigma_um: Vec<f64>,
    /// Each member's partial variance.
    pub member_variance_um2: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyTrace {
    pub recipe_id: String,
    pub steps: Vec<TraceStep>,
    /// Grid-averaged mixture σ at each step.
    pub mean_sigma_um: Vec<f64>,
    /// Every member's partial variance is non-decreasing in step index at every grid point.
    pub member_variance_monotone: bool,
}

/// Partial mean and mixture σ after each step. Accumulating variants use
/// their partial sums; the baseline is re-evaluated on each prefix.
pub fn uncertainty_trace(ensemble: &Ensemble, recipe: &Recipe) -> Result<UncertaintyTrace> {
    let per_member = ensemble
        .members()
        .iter()
        .map(|m| m.step_profiles(recipe))
        .collect::<Result<Vec<_>>>()?;
    let mut steps = Vec::with_capacity(recipe.len());
    for t in 0..recipe.len() {
        let means: Vec<&[f64]> = per_member.iter().map(|p| p[t].mean_um.as_slice()).collect();
        let vars: Vec<&[f64]> = per_member.iter().map(|p| p[t].variance_um2.as_slice()).collect();
        let (mean_um, var) = mixture_moments(&means, &vars);
        steps.push(TraceStep {
            step: t + 1,
            mean_um,
            sigma_um: var.iter().map(|v| v.sqrt()).collect(),
            member_variance_um2: vars.iter().map(|v| v.to_vec()).collect(),
        });
    }
    let member_variance_monotone = per_member.iter().all(|p| {
        p.windows(2)
            .all(|w| w[0].variance_um2.iter().zip(&w[1].variance_um2).all(|(a, b)| b >= a))
    });
    let mean_sigma_um: Vec<f64> = steps
        .iter()
        .map(|s| s.sigma_um.iter().sum::<f64>() / s.sigma_um.len() as f64)
        .collect();
    info!(recipe = %recipe.id, ?mean_sigma_um, member_variance_monotone, "uncertainty trace");
    Ok(UncertaintyTrace { recipe_id: recipe.id.clone(), steps, mean_sigma_um, member_variance_monotone })
}
