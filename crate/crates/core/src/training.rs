//! Gaussian-NLL training of single predictors and deep ensembles.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::dataset::Record;
use crate::error::{Error, Result};
use crate::model::{
    bind, forward, gaussian_nll, load_checkpoint, save_checkpoint, AttentionMaps, Model, ModelConfig,
    PredictionDistribution, Variant,
};
use crate::numerics::Graph;
use crate::parallel;
use crate::profile::WeibullStepParams;
use crate::recipe::Recipe;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub ensemble_size: usize,
    pub base_seed: u64,
    /// Records per gradient work unit. Fixed so the summation order, and
    /// therefore the result, does not depend on the thread count.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
            ensemble_size: 5,
            base_seed: 0,
            chunk_size: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.ensemble_size == 0 {
            return Err(Error::invalid("ensemble_size must be at least 1"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::invalid("patience must not exceed max_epochs"));
        }
        if self.batch_size == 0 || self.chunk_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch_size, chunk_size and max_epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Mean over grid points of `½·ln(2πσ²) + (y − μ)² / (2σ²)`.
pub fn nll_loss(pred: &PredictionDistribution, target: &[f64]) -> Result<f64> {
    gaussian_nll_values(&pred.mean_um, &pred.variance_um2, target)
}

pub fn gaussian_nll_values(mean: &[f64], variance: &[f64], target: &[f64]) -> Result<f64> {
    if mean.len() != target.len() || variance.len() != target.len() {
        return Err(Error::Shape {
            op: "nll_loss",
            lhs: vec![mean.len(), variance.len()],
            rhs: vec![target.len()],
        });
    }
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    let mut total = 0.0;
    for ((&m, &v), &y) in mean.iter().zip(variance).zip(target) {
        if !(m.is_finite() && v.is_finite() && y.is_finite()) || v <= 0.0 {
            return Err(Error::NonFinite(format!("nll_loss input (mean {m}, variance {v}, target {y})")));
        }
        total += half_log_2pi + 0.5 * v.ln() + (y - m) * (y - m) / (2.0 * v);
    }
    Ok(total / target.len() as f64)
}

/// Sum of per-record NLL over `records` and its gradient with respect to every
/// parameter, flattened in registration order.
pub fn loss_and_gradient(model: &Model, records: &[&Record], chunk_size: usize) -> Result<(f64, Vec<f64>)> {
    let chunks: Vec<&[&Record]> = records.chunks(chunk_size.max(1)).collect();
    let parts = parallel::try_map(&chunks, |chunk| chunk_gradient(model, chunk))?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.params().numel()];
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

fn chunk_gradient(model: &Model, records: &[&Record]) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let p = bind(&mut g, model.params(), true);
    let mut total = None;
    for rec in records {
        let out = forward(&mut g, model.config(), model.layout(), &p, &rec.recipe)?;
        let l = gaussian_nll(&mut g, out.mean, out.variance, &rec.profile_measured_um)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let Some(total) = total else {
        return Ok((0.0, vec![0.0; model.params().numel()]));
    };
    let loss = g.scalar_value(total);
    g.backward(total)?;
    let mut grad = Vec::with_capacity(model.params().numel());
    for (&v, t) in p.iter().zip(model.params().tensors()) {
        match g.grad(v) {
            Some(d) => grad.extend_from_slice(d),
            None => grad.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }
    Ok((loss, grad))
}

/// Mean NLL of `model` over `records` against their measured profiles.
pub fn mean_nll(model: &Model, records: &[Record]) -> Result<f64> {
    let losses = parallel::try_map(records, |r| nll_loss(&model.predict(&r.recipe)?, &r.profile_measured_um))?;
    Ok(losses.iter().sum::<f64>() / records.len().max(1) as f64)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberSummary {
    pub seed: u64,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_nll: f64,
    pub epochs_run: usize,
    pub curve: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainedMember {
    pub model: Model,
    pub summary: MemberSummary,
}

/// Mini-batch Adam on the measured-profile NLL with early stopping on the
/// validation NLL. Returns the best-validation parameters. Deterministic
/// given `seed`.
pub fn train_member(
    train: &[Record],
    val: &[Record],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedMember> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let mut model = Model::init(model_cfg.clone(), seed)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    order_rng.set_stream(1);

    let mut adam = Adam::new(model.params().numel());
    let mut flat = model.params().flatten();
    let mut best = (f64::INFINITY, 0usize, flat.clone());
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let records: Vec<&Record> = batch.iter().map(|&i| &train[i]).collect();
            let (loss, mut grad) = loss_and_gradient(&model, &records, cfg.chunk_size)?;
            let scale = 1.0 / records.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::Divergence { epoch, batch: batch_idx, loss });
            }
            if norm > cfg.grad_clip {
                let s = cfg.grad_clip / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
            adam.update(&mut flat, &grad, cfg);
            model.params_mut().assign_flat(&flat);
            epoch_loss += loss;
        }
        let train_nll = epoch_loss / train.len() as f64;
        let val_nll = mean_nll(&model, val)?;
        if !val_nll.is_finite() {
            return Err(Error::Divergence { epoch, batch: usize::MAX, loss: val_nll });
        }
        curve.push(EpochRecord { epoch, train_nll, val_nll });
        debug!(seed, epoch, train_nll, val_nll, "epoch");

        if val_nll < best.0 {
            best = (val_nll, epoch, flat.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let (best_val_nll, best_epoch, best_flat) = best;
    model.params_mut().assign_flat(&best_flat);
    let epochs_run = curve.len();
    Ok(TrainedMember {
        model,
        summary: MemberSummary { seed, best_epoch, best_val_nll, epochs_run, curve },
    })
}

pub const ENSEMBLE_VERSION: u32 = 1;

/// Independently initialized members sharing one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: Vec<Model>,
    summaries: Vec<MemberSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleManifest {
    pub format_version: u32,
    pub variant: Variant,
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub members: Vec<ManifestMember>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestMember {
    pub file: String,
    pub summary: Option<MemberSummary>,
}

/// Trains `M = cfg.ensemble_size` members on the full training set, member
/// `m` with seed `base_seed + m`. Members may run concurrently; the result is
/// the same either way.
pub fn train_ensemble(train: &[Record], val: &[Record], model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Ensemble> {
    cfg.validate()?;
    let trained = parallel::map_range(cfg.ensemble_size, |m| {
        train_member(train, val, model_cfg, cfg, cfg.base_seed.wrapping_add(m as u64))
    });
    let mut members = Vec::with_capacity(trained.len());
    let mut summaries = Vec::with_capacity(trained.len());
    for t in trained {
        let t = t?;
        members.push(t.model);
        summaries.push(t.summary);
    }
    Ok(Ensemble { members, summaries })
}

/// Mixture prediction together with the per-member predictions it combines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePrediction {
    /// Mixture mean and variance. Per-step rows combine each member's partial
    /// sums the same way; step parameters and attention are member averages.
    pub mixture: PredictionDistribution,
    pub members: Vec<PredictionDistribution>,
}

/// Moment-matched Gaussian mixture of equally weighted members:
/// `μ* = mean(μ_m)` and `σ*² = mean(σ_m²) + mean((μ_m − μ*)²)`, which equals
/// `mean(σ_m² + μ_m²) − μ*²`.
pub fn mixture_moments(means: &[&[f64]], variances: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let m = means.len() as f64;
    let n = means.first().map_or(0, |v| v.len());
    let mut mu = vec![0.0; n];
    let mut var = vec![0.0; n];
    for g in 0..n {
        let mean = means.iter().map(|v| v[g]).sum::<f64>() / m;
        let within = variances.iter().map(|v| v[g]).sum::<f64>() / m;
        let between = means.iter().map(|v| (v[g] - mean) * (v[g] - mean)).sum::<f64>() / m;
        mu[g] = mean;
        var[g] = within + between;
    }
    (mu, var)
}

fn average_rows(rows: &[&Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let m = rows.len() as f64;
    let Some(first) = rows.first() else { return Vec::new() };
    first
        .iter()
        .enumerate()
        .map(|(i, r)| {
            (0..r.len())
                .map(|j| rows.iter().map(|x| x[i][j]).sum::<f64>() / m)
                .collect()
        })
        .collect()
}

fn average_params(members: &[PredictionDistribution]) -> Vec<WeibullStepParams> {
    let m = members.len() as f64;
    let t = members.first().map_or(0, |p| p.step_params.len());
    (0..t)
        .map(|s| WeibullStepParams {
            k: members.iter().map(|p| p.step_params[s].k).sum::<f64>() / m,
            lambda: members.iter().map(|p| p.step_params[s].lambda).sum::<f64>() / m,
            amplitude: members.iter().map(|p| p.step_params[s].amplitude).sum::<f64>() / m,
        })
        .collect()
}

/// Combines member predictions into the ensemble prediction.
pub fn combine(members: Vec<PredictionDistribution>) -> Result<EnsemblePrediction> {
    if members.is_empty() {
        return Err(Error::invalid("cannot combine zero member predictions"));
    }
    let means: Vec<&[f64]> = members.iter().map(|p| p.mean_um.as_slice()).collect();
    let vars: Vec<&[f64]> = members.iter().map(|p| p.variance_um2.as_slice()).collect();
    let (mean_um, variance_um2) = mixture_moments(&means, &vars);

    let steps = members[0].per_step_mean_um.len();
    let mut per_step_mean_um = Vec::with_capacity(steps);
    let mut per_step_variance_um2 = Vec::with_capacity(steps);
    for t in 0..steps {
        let means: Vec<&[f64]> = members.iter().map(|p| p.per_step_mean_um[t].as_slice()).collect();
        let vars: Vec<&[f64]> = members.iter().map(|p| p.per_step_variance_um2[t].as_slice()).collect();
        let (m, v) = mixture_moments(&means, &vars);
        per_step_mean_um.push(m);
        per_step_variance_um2.push(v);
    }

    let layers = members[0].attention.self_attention.len();
    let self_attention = (0..layers)
        .map(|l| {
            let maps: Vec<&Vec<Vec<f64>>> = members.iter().map(|p| &p.attention.self_attention[l]).collect();
            average_rows(&maps)
        })
        .collect();
    let cross_attention = if members[0].attention.cross_attention.is_some() {
        let maps: Vec<&Vec<Vec<f64>>> = members
            .iter()
            .filter_map(|p| p.attention.cross_attention.as_ref())
            .collect();
        Some(average_rows(&maps))
    } else {
        None
    };

    let mixture = PredictionDistribution {
        mean_um,
        variance_um2,
        per_step_mean_um,
        per_step_variance_um2,
        step_params: average_params(&members),
        attention: AttentionMaps { self_attention, cross_attention },
    };
    Ok(EnsemblePrediction { mixture, members })
}

impl Ensemble {
    /// Members must agree on variant, grid size and knob normalization.
    pub fn from_members(members: Vec<Model>) -> Result<Self> {
        Self::with_summaries(members, Vec::new())
    }

    fn with_summaries(members: Vec<Model>, summaries: Vec<MemberSummary>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::invalid("an ensemble needs at least one member"))?
            .config()
            .clone();
        for m in &members[1..] {
            let c = m.config();
            if c.variant != first.variant {
                return Err(Error::VariantMismatch {
                    expected: first.variant.to_string(),
                    found: c.variant.to_string(),
                });
            }
            if c.grid_size != first.grid_size || c.knob_ranges != first.knob_ranges {
                return Err(Error::invalid("ensemble members disagree on grid size or knob ranges"));
            }
        }
        Ok(Self { members, summaries })
    }

    pub fn members(&self) -> &[Model] {
        &self.members
    }

    pub fn summaries(&self) -> &[MemberSummary] {
        &self.summaries
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn variant(&self) -> Variant {
        self.members[0].variant()
    }

    pub fn config(&self) -> &ModelConfig {
        self.members[0].config()
    }

    /// Mixture prediction over all members.
    pub fn predict(&self, recipe: &Recipe) -> Result<EnsemblePrediction> {
        let preds = self
            .members
            .iter()
            .map(|m| m.predict(recipe))
            .collect::<Result<Vec<_>>>()?;
        combine(preds)
    }

    /// Writes `manifest.json` plus one checkpoint per member into `dir`.
    pub fn save(&self, dir: &Path, train_config: Option<&TrainConfig>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.members.len());
        for (i, m) in self.members.iter().enumerate() {
            let file = format!("member_{i}.json");
            save_checkpoint(m, &dir.join(&file))?;
            entries.push(ManifestMember { file, summary: self.summaries.get(i).cloned() });
        }
        let manifest = EnsembleManifest {
            format_version: ENSEMBLE_VERSION,
            variant: self.variant(),
            model_config: self.config().clone(),
            train_config: train_config.cloned(),
            members: entries,
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::invalid(format!("serializing manifest: {e}")))?;
        let path = dir.join("manifest.json");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let corrupt = |reason: String| Error::CorruptCheckpoint { path: PathBuf::from(&path), reason };
        let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
        let version = raw.get("format_version").and_then(serde_json::Value::as_u64);
        if version != Some(u64::from(ENSEMBLE_VERSION)) {
            return Err(Error::VersionMismatch {
                found: version.and_then(|v| v.try_into().ok()).unwrap_or(0),
                expected: ENSEMBLE_VERSION,
            });
        }
        let manifest: EnsembleManifest = serde_json::from_value(raw).map_err(|e| corrupt(e.to_string()))?;
        let mut members = Vec::with_capacity(manifest.members.len());
        let mut summaries = Vec::new();
        for entry in &manifest.members {
            let m = load_checkpoint(&dir.join(&entry.file))?;
            if m.variant() != manifest.variant {
                return Err(Error::VariantMismatch {
                    expected: manifest.variant.to_string(),
                    found: m.variant().to_string(),
                });
            }
            members.push(m);
            summaries.extend(entry.summary.clone());
        }
        Self::with_summaries(members, summaries)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::dataset::{generate, DatasetSpec};
    use crate::oracle::OracleConfig;

    fn dist(mean: Vec<f64>, var: Vec<f64>) -> PredictionDistribution {
        PredictionDistribution {
            mean_um: mean,
            variance_um2: var,
            per_step_mean_um: vec![],
            per_step_variance_um2: vec![],
            step_params: vec![],
            attention: AttentionMaps::default(),
        }
    }

    #[test]
    fn nll_closed_forms() {
        let y = vec![1.0, 2.0, 3.0];
        let zero = nll_loss(&dist(y.clone(), vec![1.0 / (2.0 * PI); 3]), &y).unwrap();
        assert!(zero.abs() < 1e-15);
        let unit = nll_loss(&dist(y.clone(), vec![1.0; 3]), &y).unwrap();
        assert!((unit - 0.9189385332046727).abs() < 1e-12);
        assert!(nll_loss(&dist(vec![f64::NAN; 3], vec![1.0; 3]), &y).is_err());
    }

    #[test]
    fn nll_gradient_wrt_mean() {
        // ∂/∂μ of the per-point term is −(y − μ)/σ²; the grid mean divides by G.
        let mut g = Graph::new();
        let mu = g.variable(crate::numerics::Tensor::vector(vec![0.0, 1.0]));
        let var = g.constant(crate::numerics::Tensor::vector(vec![2.0, 2.0]));
        let l = gaussian_nll(&mut g, mu, var, &[1.0, 2.0]).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(mu).unwrap(), &[-0.25, -0.25]);
    }

    #[test]
    fn two_member_mixture_by_hand() {
        let (mu, var) = mixture_moments(&[&[0.0], &[2.0]], &[&[1.0], &[1.0]]);
        assert!((mu[0] - 1.0).abs() < 1e-12);
        assert!((var[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn variant_mismatch_is_rejected() {
        let a = Model::init(ModelConfig::with_variant(Variant::Weibull), 0).unwrap();
        let b = Model::init(ModelConfig::with_variant(Variant::Baseline), 0).unwrap();
        assert!(matches!(Ensemble::from_members(vec![a, b]), Err(Error::VariantMismatch { .. })));
    }

    #[test]
    fn singleton_and_identical_ensembles_reproduce_the_member() {
        let model = Model::init(ModelConfig::default(), 3).unwrap();
        let recipe = crate::dataset::sample_recipe(
            &mut ChaCha8Rng::seed_from_u64(1),
            "r".into(),
            [4, 4],
            &Default::default(),
        );
        let single = model.predict(&recipe).unwrap();
        let one = Ensemble::from_members(vec![model.clone()]).unwrap().predict(&recipe).unwrap();
        assert_eq!(one.mixture, single);

        let two = Ensemble::from_members(vec![model.clone(), model]).unwrap().predict(&recipe).unwrap();
        assert_eq!(two.mixture.mean_um, single.mean_um);
        for (a, b) in two.mixture.variance_um2.iter().zip(&single.variance_um2) {
            assert!((a - b).abs() <= 1e-15 * b.abs());
        }
    }

    proptest! {
        #[test]
        fn mixture_variance_dominates_mean_member_variance(
            members in prop::collection::vec((-5.0f64..5.0, 1e-6f64..4.0), 1..8),
        ) {
            let means: Vec<[f64; 1]> = members.iter().map(|m| [m.0]).collect();
            let vars: Vec<[f64; 1]> = members.iter().map(|m| [m.1]).collect();
            let mr: Vec<&[f64]> = means.iter().map(|v| v.as_slice()).collect();
            let vr: Vec<&[f64]> = vars.iter().map(|v| v.as_slice()).collect();
            let (mu, var) = mixture_moments(&mr, &vr);
            let avg = members.iter().map(|m| m.1).sum::<f64>() / members.len() as f64;
            let min = members.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
            prop_assert!(var[0] >= avg - 1e-12);
            prop_assert!(var[0] >= min);
            // Same value as the raw-moment form.
            let raw = members.iter().map(|m| m.1 + m.0 * m.0).sum::<f64>() / members.len() as f64 - mu[0] * mu[0];
            prop_assert!((var[0] - raw).abs() < 1e-9 * (1.0 + raw.abs()));
        }

        #[test]
        fn nll_is_translation_consistent(
            pts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.01f64..4.0), 1..10),
            c in -100.0f64..100.0,
        ) {
            let mean: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let var: Vec<f64> = pts.iter().map(|p| p.2).collect();
            let base = gaussian_nll_values(&mean, &var, &y).unwrap();
            let ms: Vec<f64> = mean.iter().map(|m| m + c).collect();
            let ys: Vec<f64> = y.iter().map(|v| v + c).collect();
            let shifted = gaussian_nll_values(&ms, &var, &ys).unwrap();
            prop_assert!((base - shifted).abs() < 1e-9 * (1.0 + base.abs()));
        }
    }

    fn tiny_data(seed: u64, n_train: usize) -> crate::dataset::Dataset {
        let spec = DatasetSpec { n_train, n_val: 4, n_test: 2, seed, ..Default::default() };
        generate(&spec, &OracleConfig { grid_size: 16, ..Default::default() }).unwrap()
    }

    fn tiny_cfg(variant: Variant) -> ModelConfig {
        ModelConfig { variant, d_model: 8, d_ffn: 16, grid_size: 16, ..Default::default() }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let data = tiny_data(1, 12);
        let cfg = TrainConfig { max_epochs: 3, patience: 3, batch_size: 5, chunk_size: 2, ..Default::default() };
        let a = train_member(&data.train, &data.val, &tiny_cfg(Variant::Weibull), &cfg, 9).unwrap();
        let b = train_member(&data.train, &data.val, &tiny_cfg(Variant::Weibull), &cfg, 9).unwrap();
        let bits = |m: &Model| m.params().flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.model), bits(&b.model));
        assert_eq!(a.summary, b.summary);
    }

    #[test]
    fn chunking_changes_nothing_but_rounding() {
        let data = tiny_data(2, 10);
        let model = Model::init(tiny_cfg(Variant::Baseline), 4).unwrap();
        let recs: Vec<&Record> = data.train.iter().collect();
        let (l1, g1) = loss_and_gradient(&model, &recs, 1).unwrap();
        let (l2, g2) = loss_and_gradient(&model, &recs, 100).unwrap();
        assert!((l1 - l2).abs() < 1e-9 * l1.abs());
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn early_stopping_keeps_the_best_epoch() {
        let data = tiny_data(3, 8);
        // A large step size makes validation NLL bounce so patience triggers.
        let cfg = TrainConfig { lr: 0.05, max_epochs: 40, patience: 3, batch_size: 4, ..Default::default() };
        let t = train_member(&data.train, &data.val, &tiny_cfg(Variant::AccumOnly), &cfg, 1).unwrap();
        let s = &t.summary;
        assert!(s.epochs_run <= 40);
        let best = s.curve.iter().map(|e| e.val_nll).fold(f64::INFINITY, f64::min);
        assert_eq!(s.best_val_nll, best);
        assert_eq!(s.curve[s.best_epoch - 1].val_nll, best);
        if s.epochs_run < 40 {
            assert_eq!(s.epochs_run, s.best_epoch + 3);
        }
        let recomputed = mean_nll(&t.model, &data.val).unwrap();
        assert_eq!(recomputed, best);
    }

    #[test]
    fn ensemble_members_differ_and_round_trip() {
        let data = tiny_data(4, 6);
        let cfg = TrainConfig { max_epochs: 2, patience: 2, ensemble_size: 2, base_seed: 10, ..Default::default() };
        let ens = train_ensemble(&data.train, &data.val, &tiny_cfg(Variant::Weibull), &cfg).unwrap();
        assert_eq!(ens.len(), 2);
        assert_eq!(ens.summaries()[0].seed, 10);
        assert_eq!(ens.summaries()[1].seed, 11);
        assert_ne!(ens.members()[0].params(), ens.members()[1].params());

        let dir = tempfile::tempdir().unwrap();
        ens.save(dir.path(), Some(&cfg)).unwrap();
        let loaded = Ensemble::load(dir.path()).unwrap();
        assert_eq!(loaded, ens);

        // Members trained alone match members trained as part of the ensemble.
        let solo = train_member(&data.train, &data.val, &tiny_cfg(Variant::Weibull), &cfg, 11).unwrap();
        assert_eq!(&solo.model, &ens.members()[1]);
    }

    #[test]
    fn divergence_is_reported() {
        let data = tiny_data(5, 4);
        let cfg = TrainConfig { lr: f64::MAX, max_epochs: 3, patience: 1, ..Default::default() };
        let r = train_member(&data.train, &data.val, &tiny_cfg(Variant::Baseline), &cfg, 0);
        assert!(matches!(r, Err(Error::Divergence { .. }) | Err(Error::NonFinite(_))), "{r:?}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { ensemble_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { patience: 500, ..Default::default() }.validate().is_err());
    }
}
