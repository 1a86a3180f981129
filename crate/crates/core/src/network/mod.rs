//! Particle transformer: linear tokenizer, learnable `[CLS]`/`[MASK]` tokens,
//! pre-norm encoder blocks with padding-masked attention, a projection head
//! shared by `[CLS]` and particle tokens, and an optional classifier head.

mod checkpoint;
mod forward;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jetdata::FEATURES;
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Float, Tensor, TensorError};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest};
pub use forward::{
    bind, classify, encode, encoder_cls, extract_cls_attention, project, project_rows, tokenize,
    tokenize_graph, Batch, Bound, EncoderOutput, ForwardMode, PROJ_EPS,
};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("jet {jet}: mask selects padded slot {slot}")]
    MaskOnPadding { jet: usize, slot: usize },
    #[error("{0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Small,
    Base,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_proj: usize,
    pub proj_hidden: (usize, usize),
    pub dropout: f64,
    #[serde(default = "default_true")]
    pub final_norm: bool,
}

fn default_true() -> bool {
    true
}

impl NetworkConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Small => Self::with_dims(32, 2, 4),
            Preset::Base => Self::with_dims(64, 4, 6),
        }
    }

    /// Derived widths: `d_ff = 4 d`, `d_proj = d / 2`, hidden `(8 d_proj, d_proj)`.
    pub fn with_dims(d_model: usize, n_blocks: usize, n_heads: usize) -> Self {
        let d_proj = d_model / 2;
        Self {
            d_model,
            n_blocks,
            n_heads,
            d_ff: 4 * d_model,
            d_proj,
            proj_hidden: (8 * d_proj, d_proj),
            dropout: 0.2,
            final_norm: true,
        }
    }

    /// Per-head width; `d_model` need not be divisible by `n_heads`.
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let dims = [
            self.d_model,
            self.n_blocks,
            self.n_heads,
            self.d_ff,
            self.d_proj,
            self.proj_hidden.0,
            self.proj_hidden.1,
        ];
        if dims.contains(&0) {
            return Err(NetworkError::Config(format!(
                "all dimensions must be positive: {self:?}"
            )));
        }
        if self.head_dim() == 0 {
            return Err(NetworkError::Config(format!(
                "{} heads do not fit in d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NetworkError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// How a parameter is treated by the optimizer and layer-wise decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Token,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Distance from the output for layer-wise LR decay: heads 0, last
    /// block and final norm 1, ..., tokenizer and tokens `n_blocks + 1`.
    pub depth: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Norm {
    pub g: usize,
    pub b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockLayout {
    pub ln1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
}

/// Parameter indices of every module, in storage order.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub embed: Linear,
    pub cls: usize,
    pub mask: usize,
    pub blocks: Vec<BlockLayout>,
    pub final_ln: Option<Norm>,
    pub proj: [Linear; 3],
    pub classifier: Option<[Linear; 3]>,
}

struct LayoutBuilder {
    infos: Vec<ParamInfo>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: ParamKind, depth: usize) -> usize {
        self.infos.push(ParamInfo {
            name,
            shape,
            kind,
            depth,
        });
        self.infos.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, depth: usize) -> Linear {
        Linear {
            w: self.push(
                format!("{name}.weight"),
                vec![fan_in, fan_out],
                ParamKind::Weight,
                depth,
            ),
            b: self.push(
                format!("{name}.bias"),
                vec![fan_out],
                ParamKind::Bias,
                depth,
            ),
        }
    }

    fn norm(&mut self, name: &str, d: usize, depth: usize) -> Norm {
        Norm {
            g: self.push(format!("{name}.gamma"), vec![d], ParamKind::Norm, depth),
            b: self.push(format!("{name}.beta"), vec![d], ParamKind::Norm, depth),
        }
    }
}

pub(crate) fn build_layout(
    cfg: &NetworkConfig,
    num_classes: Option<usize>,
) -> (Layout, Vec<ParamInfo>) {
    let d = cfg.d_model;
    let inner = cfg.n_heads * cfg.head_dim();
    let nb = cfg.n_blocks;
    let mut lb = LayoutBuilder { infos: Vec::new() };
    let embed = lb.linear("embed", FEATURES, d, nb + 1);
    let cls = lb.push("cls_token".into(), vec![d], ParamKind::Token, nb + 1);
    let mask = lb.push("mask_token".into(), vec![d], ParamKind::Token, nb + 1);
    let blocks = (0..nb)
        .map(|i| {
            let depth = nb - i;
            let p = format!("blocks.{i}");
            BlockLayout {
                ln1: lb.norm(&format!("{p}.ln1"), d, depth),
                q: lb.linear(&format!("{p}.attn.q"), d, inner, depth),
                k: lb.linear(&format!("{p}.attn.k"), d, inner, depth),
                v: lb.linear(&format!("{p}.attn.v"), d, inner, depth),
                o: lb.linear(&format!("{p}.attn.out"), inner, d, depth),
                ln2: lb.norm(&format!("{p}.ln2"), d, depth),
                ff1: lb.linear(&format!("{p}.ff.0"), d, cfg.d_ff, depth),
                ff2: lb.linear(&format!("{p}.ff.1"), cfg.d_ff, d, depth),
            }
        })
        .collect();
    let final_ln = cfg.final_norm.then(|| lb.norm("final_ln", d, 1));
    let (h1, h2) = cfg.proj_hidden;
    let proj = [
        lb.linear("proj.0", d, h1, 0),
        lb.linear("proj.1", h1, h2, 0),
        lb.linear("proj.2", h2, cfg.d_proj, 0),
    ];
    let classifier = num_classes.map(|c| {
        [
            lb.linear("head.0", d, 2 * d, 0),
            lb.linear("head.1", 2 * d, d, 0),
            lb.linear("head.2", d, c, 0),
        ]
    });
    (
        Layout {
            embed,
            cls,
            mask,
            blocks,
            final_ln,
            proj,
            classifier,
        },
        lb.infos,
    )
}

/// Named parameter arrays of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Float> {
    pub config: NetworkConfig,
    pub num_classes: Option<usize>,
    pub info: Vec<ParamInfo>,
    pub tensors: Vec<Tensor<T>>,
    pub(crate) layout: Layout,
}

fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl<T: Float> ModelParams<T> {
    /// Truncated-normal (std 0.02, cut at 2σ) weights and tokens, zero
    /// biases, unit layer-norm gains.
    pub fn init(
        config: &NetworkConfig,
        num_classes: Option<usize>,
        seed: u64,
    ) -> Result<Self, NetworkError> {
        config.validate()?;
        let (layout, info) = build_layout(config, num_classes);
        let mut rng = stream_rng(seed, Stream::Init, &[]);
        let tensors = info
            .iter()
            .map(|p| {
                let n: usize = p.shape.iter().product();
                let data: Vec<T> = match p.kind {
                    ParamKind::Weight | ParamKind::Token => (0..n)
                        .map(|_| T::of(truncated_normal(&mut rng, 0.02)))
                        .collect(),
                    ParamKind::Bias => vec![T::zero(); n],
                    ParamKind::Norm if p.name.ends_with("gamma") => vec![T::one(); n],
                    ParamKind::Norm => vec![T::zero(); n],
                };
                Tensor::new(p.shape.clone(), data).expect("layout shapes are consistent")
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            num_classes,
            info,
            tensors,
            layout,
        })
    }

    /// Rebuilds from named arrays, checking names and shapes against the layout.
    pub fn from_named(
        config: &NetworkConfig,
        num_classes: Option<usize>,
        mut named: Vec<(String, Tensor<T>)>,
    ) -> Result<Self, NetworkError> {
        config.validate()?;
        let (layout, info) = build_layout(config, num_classes);
        let mut tensors = Vec::with_capacity(info.len());
        for p in &info {
            let pos = named
                .iter()
                .position(|(n, _)| n == &p.name)
                .ok_or_else(|| NetworkError::Checkpoint(format!("missing parameter {}", p.name)))?;
            let (_, t) = named.swap_remove(pos);
            if t.shape() != p.shape.as_slice() {
                return Err(NetworkError::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.shape
                )));
            }
            tensors.push(t);
        }
        if let Some((n, _)) = named.first() {
            return Err(NetworkError::Checkpoint(format!(
                "unexpected parameter {n}"
            )));
        }
        Ok(Self {
            config: config.clone(),
            num_classes,
            info,
            tensors,
            layout,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.info
            .iter()
            .position(|p| p.name == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.info
            .iter()
            .position(|p| p.name == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn same_shapes<U: Float>(&self, other: &ModelParams<U>) -> bool {
        self.info == other.info
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            num_classes: self.num_classes,
            info: self.info.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Copy with a fresh classifier head for `num_classes` outputs; encoder
    /// and projection weights are kept.
    pub fn with_classifier(&self, num_classes: usize, seed: u64) -> Result<Self, NetworkError> {
        let fresh = ModelParams::<T>::init(&self.config, Some(num_classes), seed)?;
        let mut out = fresh.clone();
        for (i, p) in fresh.info.iter().enumerate() {
            if !p.name.starts_with("head.") {
                if let Some(t) = self.get(&p.name) {
                    out.tensors[i] = t.clone();
                }
            }
        }
        Ok(out)
    }

    /// Euclidean distance between two parameter sets of the same layout.
    pub fn distance(&self, other: &ModelParams<T>) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(&x, &y)| (x - y).as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests;
