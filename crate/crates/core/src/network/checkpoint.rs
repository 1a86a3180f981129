// Checkpoint directory: `<name>.npy` per parameter plus `manifest.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelParams, NetworkConfig, NetworkError};
use crate::tensor::npy::{read_tensor, write_tensor};
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    /// `student`, `teacher` or `finetuned`.
    pub tag: String,
    pub step: u64,
    pub config: NetworkConfig,
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub class_names: Vec<String>,
    pub final_norm: bool,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Float> {
    pub params: ModelParams<T>,
    pub manifest: CheckpointManifest,
}

fn io(path: &Path, e: impl std::fmt::Display) -> NetworkError {
    NetworkError::Checkpoint(format!("{}: {e}", path.display()))
}

pub fn save_checkpoint<T: Float>(
    dir: &Path,
    params: &ModelParams<T>,
    tag: &str,
    step: u64,
    class_names: &[String],
) -> Result<CheckpointManifest, NetworkError> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    for (info, t) in params.info.iter().zip(&params.tensors) {
        write_tensor(&dir.join(format!("{}.npy", info.name)), t)?;
    }
    let manifest = CheckpointManifest {
        tag: tag.into(),
        step,
        config: params.config.clone(),
        num_classes: params.num_classes,
        class_names: class_names.to_vec(),
        final_norm: params.config.final_norm,
        names: params.info.iter().map(|p| p.name.clone()).collect(),
        shapes: params.info.iter().map(|p| p.shape.clone()).collect(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| io(&path, e))?;
    std::fs::write(&path, text).map_err(|e| io(&path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint<T: Float>(dir: &Path) -> Result<Checkpoint<T>, NetworkError> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| io(&path, e))?;
    if manifest.final_norm != manifest.config.final_norm {
        return Err(io(&path, "final_norm flag disagrees with config"));
    }
    let mut named = Vec::with_capacity(manifest.names.len());
    for (name, shape) in manifest.names.iter().zip(&manifest.shapes) {
        let t = read_tensor::<T>(&dir.join(format!("{name}.npy")))?;
        if t.shape() != shape.as_slice() {
            return Err(io(
                dir,
                format!("{name}: file shape {:?}, manifest {shape:?}", t.shape()),
            ));
        }
        named.push((name.clone(), t));
    }
    let params = ModelParams::from_named(&manifest.config, manifest.num_classes, named)?;
    if !params.all_finite() {
        return Err(io(dir, "non-finite parameter values"));
    }
    Ok(Checkpoint { params, manifest })
}
