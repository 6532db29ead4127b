//! Transformer recipe encoder with three output heads.
//!
//! * [`Variant::Baseline`] decodes the final profile directly through learned
//!   grid queries; nothing forces depth to be positive or to grow per step.
//! * [`Variant::AccumOnly`] predicts a free-form non-negative increment per
//!   step and sums them.
//! * [`Variant::Weibull`] predicts `(k, λ, A)` per step, turns each into a
//!   Weibull-shaped increment `A·exp(−(x/λ)^k)` and sums them.
//!
//! Every variant outputs a per-grid-point Gaussian (mean and variance). For
//! the accumulating variants the variance is itself a sum of non-negative
//! per-step contributions, so partial uncertainty can only grow.

mod checkpoint;
mod forward;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointFile, CHECKPOINT_VERSION};
pub use forward::{loss_grad_check, weibull_activation, ForwardOutput};
pub(crate) use forward::{bind, forward, gaussian_nll};

pub use params::{NamedTensor, ParamStore};
pub(crate) use params::Layout;

use crate::error::{Error, Result};
use crate::profile::WeibullStepParams;
use crate::recipe::{Equipment, KnobRanges, Recipe, WaferLocation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    AccumOnly,
    Weibull,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::AccumOnly, Variant::Weibull];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::AccumOnly => "accum_only",
            Variant::Weibull => "weibull",
        }
    }

    /// Whether predictions are sums of non-negative per-step increments.
    pub fn accumulates(self) -> bool {
        !matches!(self, Variant::Baseline)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}` (expected baseline, accum_only or weibull)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub grid_size: usize,
    pub k_floor: f64,
    pub lambda_floor: f64,
    pub variance_floor: f64,
    pub layer_norm_eps: f64,
    pub positional_encoding: bool,
    pub knob_ranges: KnobRanges,
    pub equipment_vocab: Vec<String>,
    pub location_vocab: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Weibull,
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ffn: 64,
            grid_size: 64,
            k_floor: 0.5,
            lambda_floor: 0.05,
            variance_floor: 1e-6,
            layer_norm_eps: 1e-5,
            positional_encoding: true,
            knob_ranges: KnobRanges::default(),
            equipment_vocab: Equipment::ALL.iter().map(|e| e.name().to_string()).collect(),
            location_vocab: WaferLocation::ALL.iter().map(|l| l.name().to_string()).collect(),
        }
    }
}

impl ModelConfig {
    pub fn with_variant(variant: Variant) -> Self {
        Self { variant, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ffn == 0 || self.grid_size < 2 {
            return Err(Error::invalid("d_ffn must be positive and grid_size at least 2"));
        }
        for (name, v) in [
            ("k_floor", self.k_floor),
            ("lambda_floor", self.lambda_floor),
            ("variance_floor", self.variance_floor),
        ] {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("{name} must be strictly positive, got {v}")));
            }
        }
        if self.equipment_vocab.is_empty() || self.location_vocab.is_empty() {
            return Err(Error::invalid("category vocabularies must be non-empty"));
        }
        self.knob_ranges.validate()
    }

    fn equipment_index(&self, e: Equipment) -> Result<usize> {
        self.equipment_vocab
            .iter()
            .position(|v| v == e.name())
            .ok_or_else(|| Error::UnknownCategory {
                vocabulary: "equipment",
                value: e.name().into(),
            })
    }

    fn location_index(&self, l: WaferLocation) -> Result<usize> {
        self.location_vocab
            .iter()
            .position(|v| v == l.name())
            .ok_or_else(|| Error::UnknownCategory {
                vocabulary: "wafer_location",
                value: l.name().into(),
            })
    }
}

/// Attention weights exposed for inspection. Every row is a probability vector.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionMaps {
    /// Head-averaged encoder self-attention per layer, each `T × T`.
    pub self_attention: Vec<Vec<Vec<f64>>>,
    /// Head-averaged grid-query cross-attention, `G × T` (baseline only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_attention: Option<Vec<Vec<f64>>>,
}

/// Per-grid-point Gaussian prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDistribution {
    pub mean_um: Vec<f64>,
    pub variance_um2: Vec<f64>,
    /// Accumulated mean after each step (empty for the baseline).
    pub per_step_mean_um: Vec<Vec<f64>>,
    /// Accumulated variance after each step (empty for the baseline).
    pub per_step_variance_um2: Vec<Vec<f64>>,
    /// Per-step Weibull parameters (weibull variant only).
    pub step_params: Vec<WeibullStepParams>,
    pub attention: AttentionMaps,
}

impl PredictionDistribution {
    pub fn grid_size(&self) -> usize {
        self.mean_um.len()
    }
}

/// Configuration plus parameters of one trained or freshly initialized predictor.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl Model {
    /// Seeded initialization: uniform `±1/√fan_in` projections, zero biases,
    /// `N(0, 0.02)` embeddings and grid queries, unit layer-norm scales.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = Layout::new(&config);
        let params = layout.initialize(&mut rng);
        Ok(Self { config, params, layout })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        layout.matches(&params).map_err(Error::invalid)?;
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Full predictive distribution for `recipe`.
    pub fn predict(&self, recipe: &Recipe) -> Result<PredictionDistribution> {
        forward::predict(self, recipe)
    }

    /// Accumulated mean profile after each step. Accumulating variants read
    /// their partial sums; the baseline is re-run on each recipe prefix.
    pub fn step_profiles(&self, recipe: &Recipe) -> Result<Vec<PredictionStep>> {
        if self.variant().accumulates() {
            let p = self.predict(recipe)?;
            Ok(p.per_step_mean_um
                .into_iter()
                .zip(p.per_step_variance_um2)
                .map(|(mean_um, variance_um2)| PredictionStep { mean_um, variance_um2 })
                .collect())
        } else {
            (1..=recipe.len())
                .map(|t| {
                    let p = self.predict(&recipe.prefix(t))?;
                    Ok(PredictionStep {
                        mean_um: p.mean_um,
                        variance_um2: p.variance_um2,
                    })
                })
                .collect()
        }
    }
}

/// Mean and variance of the profile after some number of steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionStep {
    pub mean_um: Vec<f64>,
    pub variance_um2: Vec<f64>,
}
