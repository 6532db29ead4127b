use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, NamedTensor, ParamStore, Variant};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk form of one model. JSON text; floats are written in shortest
/// round-trip form so reloading is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointFile {
    pub format_version: u32,
    pub variant: Variant,
    pub config: ModelConfig,
    pub params: Vec<NamedTensor>,
}

impl CheckpointFile {
    pub fn from_model(model: &Model) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            variant: model.variant(),
            config: model.config().clone(),
            params: model.params().to_named(),
        }
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&CheckpointFile::from_model(model))
        .map_err(|e| Error::invalid(format!("serializing checkpoint: {e}")))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: String| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason,
    };

    // Check the version before the full schema so an old or future file
    // reports the version rather than a field-level parse error.
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| corrupt("missing format_version".into()))?;
    if version != u64::from(CHECKPOINT_VERSION) {
        return Err(Error::VersionMismatch {
            found: version.try_into().unwrap_or(u32::MAX),
            expected: CHECKPOINT_VERSION,
        });
    }

    let file: CheckpointFile = serde_json::from_value(raw).map_err(|e| corrupt(e.to_string()))?;
    if file.variant != file.config.variant {
        return Err(corrupt(format!(
            "variant field `{}` disagrees with config `{}`",
            file.variant, file.config.variant
        )));
    }
    let mut names = Vec::with_capacity(file.params.len());
    let mut tensors = Vec::with_capacity(file.params.len());
    for p in file.params {
        let t = Tensor::new(p.shape, p.values).map_err(|e| corrupt(format!("{}: {e}", p.name)))?;
        names.push(p.name);
        tensors.push(t);
    }
    Model::from_parts(file.config, ParamStore::from_parts(names, tensors)).map_err(|e| corrupt(e.to_string()))
}
