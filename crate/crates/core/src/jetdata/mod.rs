//! Jet data model: fixed-capacity constituent lists, datasets, stratified
//! splitting, `.npy` ingestion and a synthetic multi-prong jet generator.

mod io;
mod synthetic;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::rng::{stream_rng, Stream};
use crate::tensor::TensorError;

pub use io::{load_dataset_dir, load_npy_dataset, save_dataset, DatasetManifest};
pub use synthetic::{generate_class, generate_synthetic, SyntheticClass, SyntheticSpec};

/// Per-particle feature count: `(eta_rel, phi_rel, pt_rel, valid)`.
pub const FEATURES: usize = 4;
pub const DEFAULT_CAPACITY: usize = 30;
pub const JETNET_CLASSES: [&str; 5] = ["q", "g", "W", "Z", "t"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Npy(#[from] TensorError),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("features array has shape {found:?}, expected (num_jets, capacity, {FEATURES})")]
    FeatureShape { found: Vec<usize> },
    #[error("{features} jets in features but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("jet {jet}: unknown label id {label}")]
    UnknownLabel { jet: usize, label: i64 },
    #[error("jet {jet}, particle {particle}: non-finite feature")]
    NonFinite { jet: usize, particle: usize },
    #[error("jet {jet}, particle {particle}: {reason}")]
    InvalidParticle {
        jet: usize,
        particle: usize,
        reason: String,
    },
    #[error("{0}")]
    InvalidArgument(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Particle {
    pub eta: f64,
    pub phi: f64,
    pub pt: f64,
    pub valid: bool,
}

impl Particle {
    pub fn new(eta: f64, phi: f64, pt: f64) -> Self {
        Self {
            eta,
            phi,
            pt,
            valid: true,
        }
    }

    pub fn features(&self) -> [f64; FEATURES] {
        [
            self.eta,
            self.phi,
            self.pt,
            if self.valid { 1.0 } else { 0.0 },
        ]
    }

    /// Angular distance to the jet axis.
    pub fn delta_r(&self) -> f64 {
        self.eta.hypot(self.phi)
    }
}

/// A jet: `capacity` particle slots (valid particles first, padding zeroed)
/// and a class id.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    pub particles: Vec<Particle>,
    pub label: usize,
}

impl Jet {
    /// Builds a canonical jet from valid particles, padding up to `capacity`.
    pub fn from_valid(
        valid: Vec<Particle>,
        capacity: usize,
        label: usize,
    ) -> Result<Self, DataError> {
        if valid.len() > capacity {
            return Err(DataError::InvalidArgument(format!(
                "{} particles exceed capacity {capacity}",
                valid.len()
            )));
        }
        let mut particles = valid;
        for p in &mut particles {
            p.valid = true;
        }
        particles.resize(capacity, Particle::default());
        let jet = Self { particles, label };
        jet.validate(0)?;
        Ok(jet)
    }

    pub fn capacity(&self) -> usize {
        self.particles.len()
    }

    pub fn valid_count(&self) -> usize {
        self.particles.iter().filter(|p| p.valid).count()
    }

    pub fn valid(&self) -> impl Iterator<Item = &Particle> {
        self.particles.iter().filter(|p| p.valid)
    }

    /// Sum of `pt_rel` over valid particles.
    pub fn total_pt(&self) -> f64 {
        self.valid().map(|p| p.pt).sum()
    }

    /// Stable partition of valid particles to the front; padded slots zeroed.
    pub fn canonicalize(&mut self) {
        let capacity = self.particles.len();
        let mut ordered: Vec<Particle> =
            self.particles.iter().copied().filter(|p| p.valid).collect();
        ordered.resize(capacity, Particle::default());
        self.particles = ordered;
    }

    pub fn is_canonical(&self) -> bool {
        let n = self.valid_count();
        self.particles[..n].iter().all(|p| p.valid)
            && self.particles[n..]
                .iter()
                .all(|p| *p == Particle::default())
    }

    /// Checks every invariant; `index` is used in error messages.
    pub fn validate(&self, index: usize) -> Result<(), DataError> {
        for (i, p) in self.particles.iter().enumerate() {
            if !(p.eta.is_finite() && p.phi.is_finite() && p.pt.is_finite()) {
                return Err(DataError::NonFinite {
                    jet: index,
                    particle: i,
                });
            }
            if p.valid && p.pt <= 0.0 {
                return Err(DataError::InvalidParticle {
                    jet: index,
                    particle: i,
                    reason: format!("valid particle with pt_rel {}", p.pt),
                });
            }
        }
        if !self.is_canonical() {
            return Err(DataError::InvalidParticle {
                jet: index,
                particle: self.valid_count(),
                reason: "jet is not in canonical valid-first order".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JetDataset {
    pub jets: Vec<Jet>,
    pub class_names: Vec<String>,
    pub capacity: usize,
}

/// Train / validation / test partition of a dataset.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: JetDataset,
    pub val: JetDataset,
    pub test: JetDataset,
}

impl JetDataset {
    pub fn new(
        jets: Vec<Jet>,
        class_names: Vec<String>,
        capacity: usize,
    ) -> Result<Self, DataError> {
        for (i, j) in jets.iter().enumerate() {
            if j.capacity() != capacity {
                return Err(DataError::InvalidArgument(format!(
                    "jet {i} has capacity {}, dataset capacity is {capacity}",
                    j.capacity()
                )));
            }
            if j.label >= class_names.len() {
                return Err(DataError::UnknownLabel {
                    jet: i,
                    label: j.label as i64,
                });
            }
            j.validate(i)?;
        }
        Ok(Self {
            jets,
            class_names,
            capacity,
        })
    }

    pub fn len(&self) -> usize {
        self.jets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jets.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.jets.iter().map(|j| j.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for j in &self.jets {
            counts[j.label] += 1;
        }
        counts
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    /// Subset of jets by index, same class list.
    pub fn subset(&self, indices: &[usize]) -> JetDataset {
        JetDataset {
            jets: indices.iter().map(|&i| self.jets[i].clone()).collect(),
            class_names: self.class_names.clone(),
            capacity: self.capacity,
        }
    }

    /// Keeps only the named classes and relabels them `0..names.len()` in the
    /// order given.
    pub fn filter_classes(&self, names: &[String]) -> Result<JetDataset, DataError> {
        let mut remap = vec![None; self.class_names.len()];
        for (new, name) in names.iter().enumerate() {
            let old = self.class_index(name).ok_or_else(|| {
                DataError::InvalidArgument(format!(
                    "class {name:?} not in dataset {:?}",
                    self.class_names
                ))
            })?;
            remap[old] = Some(new);
        }
        let jets = self
            .jets
            .iter()
            .filter_map(|j| {
                remap[j.label].map(|label| Jet {
                    particles: j.particles.clone(),
                    label,
                })
            })
            .collect();
        Ok(JetDataset {
            jets,
            class_names: names.to_vec(),
            capacity: self.capacity,
        })
    }

    /// Concatenation of two datasets with identical class lists.
    pub fn concat(&self, other: &JetDataset) -> Result<JetDataset, DataError> {
        if self.class_names != other.class_names || self.capacity != other.capacity {
            return Err(DataError::InvalidArgument(
                "datasets have different classes or capacity".into(),
            ));
        }
        let mut jets = self.jets.clone();
        jets.extend(other.jets.iter().cloned());
        Ok(JetDataset {
            jets,
            class_names: self.class_names.clone(),
            capacity: self.capacity,
        })
    }
}

/// Stratified split: each class is shuffled independently and cut at the
/// requested fractions, so per-class counts are within one jet of target.
/// FNV-1a of a class name. Split streams are keyed by name so a class is
/// split the same way whether or not other classes were filtered out.
fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn split_dataset(
    d: &JetDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Splits, DataError> {
    let (a, b, c) = fractions;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 {
        return Err(DataError::InvalidArgument(format!(
            "split fractions must be positive, got {fractions:?}"
        )));
    }
    if ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidArgument(format!(
            "split fractions must sum to 1, got {fractions:?}"
        )));
    }
    let mut parts: [Vec<usize>; 3] = Default::default();
    for class in 0..d.num_classes() {
        let mut members: Vec<usize> = (0..d.len()).filter(|&i| d.jets[i].label == class).collect();
        let mut rng = stream_rng(seed, Stream::Split, &[name_key(&d.class_names[class])]);
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        let n_train = (n * a).round() as usize;
        let n_val = ((n * (a + b)).round() as usize)
            .saturating_sub(n_train)
            .min(members.len() - n_train);
        parts[0].extend_from_slice(&members[..n_train]);
        parts[1].extend_from_slice(&members[n_train..n_train + n_val]);
        parts[2].extend_from_slice(&members[n_train + n_val..]);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(Splits {
        train: d.subset(&parts[0]),
        val: d.subset(&parts[1]),
        test: d.subset(&parts[2]),
    })
}
