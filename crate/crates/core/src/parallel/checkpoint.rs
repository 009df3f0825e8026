use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DenseParams, ParamShard, ToyTransformerConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub file: String,
    pub shape: Vec<usize>,
    pub shard: ParamShard,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ToyTransformerConfig,
    parameters: BTreeMap<String, CheckpointEntry>,
}

/// Writes one tensor file per parameter plus `manifest.json`.
pub fn save_checkpoint<T: Scalar>(dir: &Path, config: &ToyTransformerConfig, dense: &DenseParams<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut parameters = BTreeMap::new();
    for spec in config.param_specs() {
        let t = dense
            .get(&spec.name)
            .ok_or_else(|| Error::Config(format!("missing parameter {}", spec.name)))?;
        let file = format!("{}.tensor", spec.name);
        t.save(dir.join(&file))?;
        parameters.insert(
            spec.name,
            CheckpointEntry {
                file,
                shape: spec.shape,
                shard: spec.shard,
            },
        );
    }
    let m = Manifest {
        config: config.clone(),
        parameters,
    };
    fs::write(dir.join(CHECKPOINT_MANIFEST), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(ToyTransformerConfig, DenseParams<T>)> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?)?;
    let mut dense = BTreeMap::new();
    for (name, e) in m.parameters {
        let t: Tensor<T> = Tensor::load(dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Format(format!(
                "{name}: file shape {:?} disagrees with manifest {:?}",
                t.shape(),
                e.shape
            )));
        }
        dense.insert(name, t);
    }
    Ok((m.config, dense))
}
