//! TOML run configuration. A preset expands to the small/base model, and
//! individual `[network]` keys override it. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anomaly::{AnomalyConfig, GmmConfig};
use crate::augment::AugmentConfig;
use crate::distill::DistillConfig;
use crate::downstream::{FinetuneConfig, FinetuneGrid, LinearProbeConfig, DEFAULT_K};
use crate::jetdata::{
    load_dataset_dir, load_npy_dataset, split_dataset, DataError, JetDataset, Splits,
    SyntheticClass, SyntheticSpec, DEFAULT_CAPACITY,
};
use crate::network::{NetworkConfig, Preset};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Optional per-field overrides on top of the preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkOverrides {
    pub d_model: Option<usize>,
    pub n_blocks: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub d_proj: Option<usize>,
    pub proj_hidden: Option<(usize, usize)>,
    pub dropout: Option<f64>,
    pub final_norm: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated jets; `classes` are preset names (`q`, `g`, `w`, `t`).
    Synthetic {
        classes: Vec<String>,
        jets_per_class: usize,
        seed: u64,
    },
    /// A features/labels `.npy` pair.
    Npy {
        features: PathBuf,
        labels: PathBuf,
        class_names: Option<Vec<String>>,
    },
    /// A directory written by `generate` or `save_dataset`.
    Dir { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            classes: vec!["q".into(), "w".into(), "t".into()],
            jets_per_class: 667,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Keep only these classes (relabelled in this order) before splitting.
    pub class_filter: Option<Vec<String>>,
    pub split: (f64, f64, f64),
    /// Seed of the train/val/test split; the run seed when unset.
    pub split_seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::default(),
            class_filter: None,
            split: (0.8, 0.1, 0.1),
            split_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub k: usize,
    pub normalize: bool,
    pub linear: LinearProbeConfig,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            normalize: true,
            linear: LinearProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub llrd_decay: f64,
    pub base_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grid: FinetuneGrid,
    /// Fraction of the training split with labels, drawn per class.
    pub label_fraction: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let r = FinetuneConfig::default();
        Self {
            llrd_decay: r.llrd_decay,
            base_lr: r.base_lr,
            epochs: r.epochs,
            batch_size: r.batch_size,
            weight_decay: r.weight_decay,
            grid: FinetuneGrid::default(),
            label_fraction: 1.0,
        }
    }
}

impl FinetuneSection {
    pub fn run(&self, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            llrd_decay: self.llrd_decay,
            base_lr: self.base_lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnomalySection {
    /// Classes treated as background; every other class is a signal.
    pub background: Vec<String>,
    pub k: usize,
    pub tau: f64,
    pub reg: f64,
    pub max_reference: usize,
    pub gmm: GmmConfig,
}

impl Default for AnomalySection {
    fn default() -> Self {
        let a = AnomalyConfig::default();
        Self {
            background: vec!["q".into(), "g".into()],
            k: a.k,
            tau: a.tau,
            reg: a.reg,
            max_reference: a.max_reference,
            gmm: a.gmm,
        }
    }
}

impl AnomalySection {
    pub fn scoring(&self) -> AnomalyConfig {
        AnomalyConfig {
            k: self.k,
            tau: self.tau,
            reg: self.reg,
            max_reference: self.max_reference,
            gmm: self.gmm.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub network: NetworkOverrides,
    pub data: DataConfig,
    pub distill: DistillConfig,
    pub augment: AugmentConfig,
    pub probe: ProbeSection,
    pub finetune: FinetuneSection,
    pub anomaly: AnomalySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Small,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            network: NetworkOverrides::default(),
            data: DataConfig::default(),
            distill: DistillConfig::default(),
            augment: AugmentConfig::default(),
            probe: ProbeSection::default(),
            finetune: FinetuneSection::default(),
            anomaly: AnomalySection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let cfg = Self::from_toml(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Preset dims, then explicit overrides. `d_ff`, `d_proj` and
    /// `proj_hidden` follow a `d_model` override unless set themselves.
    pub fn network(&self) -> NetworkConfig {
        let o = &self.network;
        let base = NetworkConfig::preset(self.preset);
        let mut n = NetworkConfig::with_dims(
            o.d_model.unwrap_or(base.d_model),
            o.n_blocks.unwrap_or(base.n_blocks),
            o.n_heads.unwrap_or(base.n_heads),
        );
        if let Some(v) = o.d_ff {
            n.d_ff = v;
        }
        if let Some(v) = o.d_proj {
            n.d_proj = v;
        }
        if let Some(v) = o.proj_hidden {
            n.proj_hidden = v;
        }
        if let Some(v) = o.dropout {
            n.dropout = v;
        }
        if let Some(v) = o.final_norm {
            n.final_norm = v;
        }
        n
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |what: &str, e: &dyn std::fmt::Display| {
            Err(ConfigError::Invalid(format!("[{what}] {e}")))
        };
        if let Err(e) = self.network().validate() {
            return bad("network", &e);
        }
        if let Err(e) = self.distill.validate() {
            return bad("distill", &e);
        }
        if let Err(e) = self.augment.validate() {
            return bad("augment", &e);
        }
        if let DataSource::Synthetic {
            classes,
            jets_per_class,
            ..
        } = &self.data.source
        {
            if *jets_per_class == 0 {
                return bad("data.source", &"jets_per_class must be positive");
            }
            for c in classes {
                if synthetic_class(c).is_none() {
                    return bad(
                        "data.source",
                        &format!("unknown synthetic class {c:?}; use q, g, w or t"),
                    );
                }
            }
        }
        let f = self.finetune.label_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return bad(
                "finetune",
                &format!("label_fraction must lie in (0, 1], got {f}"),
            );
        }
        if self.probe.k == 0 || self.anomaly.k == 0 {
            return bad("probe/anomaly", &"k must be positive");
        }
        Ok(())
    }

    /// Loads or generates the dataset and applies the class filter.
    pub fn dataset(&self) -> Result<JetDataset, ConfigError> {
        let d = match &self.data.source {
            DataSource::Synthetic {
                classes,
                jets_per_class,
                seed,
            } => {
                let spec = SyntheticSpec {
                    classes: classes
                        .iter()
                        .map(|c| {
                            synthetic_class(c)
                                .ok_or_else(|| ConfigError::Invalid(format!("unknown class {c}")))
                        })
                        .collect::<Result<_, _>>()?,
                    capacity: DEFAULT_CAPACITY,
                };
                crate::jetdata::generate_synthetic(&spec, *jets_per_class, *seed)?
            }
            DataSource::Npy {
                features,
                labels,
                class_names,
            } => load_npy_dataset(features, labels, class_names.clone())?,
            DataSource::Dir { path } => load_dataset_dir(path)?,
        };
        Ok(match &self.data.class_filter {
            Some(names) => d.filter_classes(names)?,
            None => d,
        })
    }

    pub fn splits(&self) -> Result<Splits, ConfigError> {
        Ok(split_dataset(
            &self.dataset()?,
            self.data.split,
            self.data.split_seed.unwrap_or(self.seed),
        )?)
    }
}

/// Preset class by short name.
pub fn synthetic_class(name: &str) -> Option<SyntheticClass> {
    match name {
        "q" => Some(SyntheticClass::quark()),
        "g" => Some(SyntheticClass::gluon()),
        "w" => Some(SyntheticClass::w_boson()),
        "t" => Some(SyntheticClass::top()),
        _ => None,
    }
}
