use serde::{Deserialize, Serialize};
use tracing::info;

use crate::error::{Error, Result};
use crate::model::Variant;
use crate::profile::lateral_grid;
use crate::recipe::Recipe;
use crate::training::Ensemble;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandConfig {
    /// Grid points shallower than this percentile of the reference depth form the top band.
    pub top_depth_percentile: f64,
    /// Grid points with `x ≤ bottom_x_max` form the bottom band.
    pub bottom_x_max: f64,
}

impl Default for BandConfig {
    fn default() -> Self {
        Self { top_depth_percentile: 25.0, bottom_x_max: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    /// `G × T`, averaged over heads and members. Rows sum to one.
    pub matrix: Vec<Vec<f64>>,
    pub top_band_points: Vec<usize>,
    pub bottom_band_points: Vec<usize>,
    /// Mean attention row over each band, length `T`.
    pub top_band: Vec<f64>,
    pub bottom_band: Vec<f64>,
    /// 1-based step receiving the most bottom-band attention.
    pub bottom_peak_step: usize,
    pub bottom_peaks_at_last_step: bool,
}

/// Linear-interpolated percentile of `values`, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn band_mean(matrix: &[Vec<f64>], points: &[usize]) -> Vec<f64> {
    let t = matrix[0].len();
    (0..t)
        .map(|s| points.iter().map(|&g| matrix[g][s]).sum::<f64>() / points.len() as f64)
        .collect()
}

/// Member-averaged cross-attention of a baseline ensemble with band summaries.
/// `reference_depth_um` selects the top band, normally the oracle's clean profile.
pub fn export_attention(
    ensemble: &Ensemble,
    recipe: &Recipe,
    reference_depth_um: &[f64],
    bands: &BandConfig,
) -> Result<AttentionSummary> {
    if ensemble.variant() != Variant::Baseline {
        return Err(Error::VariantMismatch {
            expected: Variant::Baseline.to_string(),
            found: ensemble.variant().to_string(),
        });
    }
    let g = ensemble.config().grid_size;
    if reference_depth_um.len() != g {
        return Err(Error::Shape { op: "export_attention", lhs: vec![g], rhs: vec![reference_depth_um.len()] });
    }
    let matrix = ensemble
        .predict(recipe)?
        .mixture
        .attention
        .cross_attention
        .ok_or_else(|| Error::invalid("baseline prediction carried no cross-attention"))?;

    let cut = percentile(reference_depth_um, bands.top_depth_percentile);
    let mut top: Vec<usize> = (0..g).filter(|&i| reference_depth_um[i] < cut).collect();
    if top.is_empty() {
        // Flat profile: fall back to the shallowest points.
        let min = reference_depth_um.iter().copied().fold(f64::INFINITY, f64::min);
        top = (0..g).filter(|&i| reference_depth_um[i] == min).collect();
    }
    let grid = lateral_grid(g);
    let bottom: Vec<usize> = (0..g).filter(|&i| grid[i] <= bands.bottom_x_max).collect();
    if bottom.is_empty() {
        return Err(Error::invalid(format!("no grid point has x ≤ {}", bands.bottom_x_max)));
    }
    let top_band = band_mean(&matrix, &top);
    let bottom_band = band_mean(&matrix, &bottom);
    let bottom_peak_step = bottom_band
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(1, |(i, _)| i + 1);
    let bottom_peaks_at_last_step = bottom_peak_step == recipe.len();
    info!(recipe = %recipe.id, bottom_peak_step, bottom_peaks_at_last_step, "attention bands");
    Ok(AttentionSummary {
        matrix,
        top_band_points: top,
        bottom_band_points: bottom,
        top_band,
        bottom_band,
        bottom_peak_step,
        bottom_peaks_at_last_step,
    })
}
