// On-disk layout: `features.npy` (num_jets, capacity, 4) float,
// `labels.npy` (num_jets,) integer, and a `dataset.json` manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Jet, JetDataset, Particle, FEATURES};
use crate::tensor::npy::{read_integers, read_tensor, write_i64, write_tensor};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub num_jets: usize,
    pub capacity: usize,
    pub class_names: Vec<String>,
    pub class_counts: Vec<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub features: String,
    pub labels: String,
}

/// Reads a features/labels pair. Particles are canonicalized on ingest;
/// `class_names` defaults to `c0..c{max}` when not given.
pub fn load_npy_dataset(
    features_path: &Path,
    labels_path: &Path,
    class_names: Option<Vec<String>>,
) -> Result<JetDataset, DataError> {
    let features: Tensor<f64> = read_tensor(features_path)?;
    let shape = features.shape().to_vec();
    if shape.len() != 3 || shape[2] != FEATURES {
        return Err(DataError::FeatureShape { found: shape });
    }
    let (n, capacity) = (shape[0], shape[1]);
    let (lshape, labels) = read_integers(labels_path)?;
    let n_labels = lshape.iter().product::<usize>();
    if lshape.len() != 1 || n_labels != n {
        return Err(DataError::LengthMismatch {
            features: n,
            labels: n_labels,
        });
    }
    let class_names = match class_names {
        Some(c) => c,
        None => {
            let max = labels.iter().copied().max().unwrap_or(0).max(0);
            (0..=max).map(|c| format!("c{c}")).collect()
        }
    };
    let data = features.data();
    let mut jets = Vec::with_capacity(n);
    for (j, &label) in labels.iter().enumerate() {
        if label < 0 || label as usize >= class_names.len() {
            return Err(DataError::UnknownLabel { jet: j, label });
        }
        let mut particles = Vec::with_capacity(capacity);
        for i in 0..capacity {
            let f = &data[(j * capacity + i) * FEATURES..(j * capacity + i + 1) * FEATURES];
            if f.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite {
                    jet: j,
                    particle: i,
                });
            }
            let valid = match f[3] {
                v if v == 1.0 => true,
                v if v == 0.0 => false,
                v => {
                    return Err(DataError::InvalidParticle {
                        jet: j,
                        particle: i,
                        reason: format!("valid flag {v} is not 0 or 1"),
                    })
                }
            };
            if valid && f[2] <= 0.0 {
                return Err(DataError::InvalidParticle {
                    jet: j,
                    particle: i,
                    reason: format!("valid particle with pt_rel {}", f[2]),
                });
            }
            particles.push(Particle {
                eta: f[0],
                phi: f[1],
                pt: f[2],
                valid,
            });
        }
        let mut jet = Jet {
            particles,
            label: label as usize,
        };
        jet.canonicalize();
        jets.push(jet);
    }
    JetDataset::new(jets, class_names, capacity)
}

/// Writes `features.npy`, `labels.npy` and `dataset.json` into `dir`.
/// Features are stored as `<f8` so a reload is bit-exact.
pub fn save_dataset(
    d: &JetDataset,
    dir: &Path,
    seed: Option<u64>,
) -> Result<DatasetManifest, DataError> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut data = Vec::with_capacity(d.len() * d.capacity * FEATURES);
    for jet in &d.jets {
        for p in &jet.particles {
            data.extend_from_slice(&p.features());
        }
    }
    let features = Tensor::new(vec![d.len(), d.capacity, FEATURES], data)?;
    write_tensor(&dir.join("features.npy"), &features)?;
    let labels: Vec<i64> = d.jets.iter().map(|j| j.label as i64).collect();
    write_i64(&dir.join("labels.npy"), &[d.len()], &labels)?;
    let manifest = DatasetManifest {
        num_jets: d.len(),
        capacity: d.capacity,
        class_names: d.class_names.clone(),
        class_counts: d.class_counts(),
        seed,
        features: "features.npy".into(),
        labels: "labels.npy".into(),
    };
    let path = dir.join("dataset.json");
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    std::fs::write(&path, text).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(manifest)
}

/// Loads a directory written by [`save_dataset`] (or any directory holding a
/// `dataset.json` whose file paths are relative to it).
pub fn load_dataset_dir(dir: &Path) -> Result<JetDataset, DataError> {
    let path = dir.join("dataset.json");
    let text = std::fs::read_to_string(&path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    let resolve = |p: &str| -> PathBuf {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            dir.join(p)
        }
    };
    let d = load_npy_dataset(
        &resolve(&m.features),
        &resolve(&m.labels),
        Some(m.class_names.clone()),
    )?;
    if d.len() != m.num_jets || d.capacity != m.capacity {
        return Err(DataError::Manifest(format!(
            "manifest says {} jets x {} slots, files hold {} x {}",
            m.num_jets,
            m.capacity,
            d.len(),
            d.capacity
        )));
    }
    Ok(d)
}
