use std::path::Path;

use anyhow::Context;
use etch_core::dataset::DatasetSpec;
use etch_core::harness::{BandConfig, ReportOptions};
use etch_core::model::ModelConfig;
use etch_core::oracle::OracleConfig;
use etch_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Leading test records used as probes.
    pub probes: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { probes: 64 }
    }
}

/// Every tunable of a run. Missing sections and keys take their defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub oracle: OracleConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub report: ReportOptions,
    pub attention: BandConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.dataset.validate()?;
        self.oracle.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        anyhow::ensure!(
            self.model.grid_size == self.oracle.grid_size,
            "model.grid_size ({}) must equal oracle.grid_size ({})",
            self.model.grid_size,
            self.oracle.grid_size
        );
        Ok(())
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_CONFIG);
        let text = toml::to_string(self).context("serializing resolved config")?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
