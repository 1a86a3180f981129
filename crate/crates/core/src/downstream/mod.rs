//! Frozen `[CLS]` features, k-NN and linear probes, LLRD fine-tuning,
//! classification metrics and a PCA projection for inspection.

mod finetune;
mod metrics;
mod pca;
mod probe;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jetdata::{DataError, Jet, JetDataset};
use crate::network::{bind, encode, encoder_cls, Batch, ForwardMode, ModelParams, NetworkError};
use crate::tensor::{Float, Graph, TensorError};

pub use finetune::{
    finetune, grid_search, lr_groups, predict, scratch_baseline, FinetuneConfig, FinetuneGrid,
    FinetuneOutput, GridPoint, GridResult, LrGroup,
};
pub use metrics::{
    accuracy, auc_mann_whitney, classification_metrics, eps_s_at, one_vs_rest_roc, roc_curve,
    ClassificationMetrics, RocCurve, EPS_B_TARGETS,
};
pub use pca::{pca_2d, Pca2d};
pub use probe::{knn_probe, linear_probe, LinearProbeConfig, ProbeOutput, DEFAULT_K};

#[derive(Debug, Error)]
pub enum DownstreamError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("training set has a single class ({0}); need at least two")]
    SingleClass(usize),
    #[error("non-finite loss during fine-tuning at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: u64 },
}

/// Row-major `rows × cols` matrix of f64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, DownstreamError> {
        if data.len() != rows * cols {
            return Err(DownstreamError::Input(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, DownstreamError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DownstreamError::Input("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let data = idx
            .iter()
            .flat_map(|&i| self.row(i).iter().copied())
            .collect();
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Copy with every row scaled to unit l2 norm (zero rows stay zero).
    pub fn l2_normalized(&self) -> Self {
        let mut out = self.clone();
        for i in 0..out.rows {
            let r = out.row_mut(i);
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter_mut().for_each(|x| *x /= n);
            }
        }
        out
    }

    /// Column of the largest entry per row, lowest index on ties.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| {
                let r = self.row(i);
                let mut best = 0;
                for (c, &x) in r.iter().enumerate() {
                    if x > r[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// Frozen `[CLS]` embeddings with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Matrix,
    pub labels: Vec<usize>,
    pub normalized: bool,
}

impl EmbeddingSet {
    pub fn new(vectors: Matrix, labels: Vec<usize>) -> Result<Self, DownstreamError> {
        if vectors.rows != labels.len() {
            return Err(DownstreamError::Input(format!(
                "{} vectors but {} labels",
                vectors.rows,
                labels.len()
            )));
        }
        if vectors.data.iter().any(|x| !x.is_finite()) {
            return Err(DownstreamError::Input("non-finite embedding".into()));
        }
        Ok(Self {
            vectors,
            labels,
            normalized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn normalize(&self) -> Self {
        Self {
            vectors: self.vectors.l2_normalized(),
            labels: self.labels.clone(),
            normalized: true,
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            vectors: self.vectors.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            normalized: self.normalized,
        }
    }
}

pub const EMBED_BATCH: usize = 256;

/// Encoder `[CLS]` rows for `jets`: eval mode, no augmentation, no masking.
pub fn embed_jets<T: Float>(
    jets: &[&Jet],
    params: &ModelParams<T>,
) -> Result<Matrix, DownstreamError> {
    let d = params.config.d_model;
    let mut data = Vec::with_capacity(jets.len() * d);
    for chunk in jets.chunks(EMBED_BATCH) {
        let mut g = Graph::new();
        let p = bind(&mut g, params, false);
        let batch = Batch::unmasked(chunk)?;
        let enc = encode(&mut g, &p, params, &batch, ForwardMode::Eval, false)?;
        let cls = encoder_cls(&mut g, enc.out)?;
        data.extend(g.value(cls).data().iter().map(|x| x.as_f64()));
    }
    Matrix::new(jets.len(), d, data)
}

pub fn embed_dataset<T: Float>(
    d: &JetDataset,
    params: &ModelParams<T>,
) -> Result<EmbeddingSet, DownstreamError> {
    let jets: Vec<&Jet> = d.jets.iter().collect();
    EmbeddingSet::new(embed_jets(&jets, params)?, d.labels())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jetdata::{generate_synthetic, SyntheticSpec};
    use crate::network::NetworkConfig;

    fn data() -> JetDataset {
        generate_synthetic(&SyntheticSpec::three_class(), 4, 3).unwrap()
    }

    #[test]
    fn embeddings_deterministic_and_sized() {
        let d = data();
        let p = ModelParams::<f32>::init(&NetworkConfig::with_dims(8, 1, 2), None, 0).unwrap();
        let a = embed_dataset(&d, &p).unwrap();
        let b = embed_dataset(&d, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), d.len());
        assert_eq!(a.vectors.cols, 8);
        assert_eq!(a.labels, d.labels());
    }

    #[test]
    fn embeddings_depend_on_weights() {
        let d = data();
        let cfg = NetworkConfig::with_dims(8, 1, 2);
        let a = embed_dataset(&d, &ModelParams::<f32>::init(&cfg, None, 0).unwrap()).unwrap();
        let b = embed_dataset(&d, &ModelParams::<f32>::init(&cfg, None, 1).unwrap()).unwrap();
        let diff: f64 = a
            .vectors
            .data
            .iter()
            .zip(&b.vectors.data)
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-3);
    }

    #[test]
    fn normalized_rows_have_unit_norm() {
        let d = data();
        let p = ModelParams::<f32>::init(&NetworkConfig::with_dims(8, 1, 2), None, 0).unwrap();
        let e = embed_dataset(&d, &p).unwrap().normalize();
        assert!(e.normalized);
        for i in 0..e.len() {
            let n: f64 = e.vectors.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn argmax_ties_take_lowest() {
        let m = Matrix::new(2, 3, vec![0.2, 0.4, 0.4, 0.5, 0.1, 0.5]).unwrap();
        assert_eq!(m.argmax_rows(), vec![1, 0]);
    }
}
