//! Anomaly scores on frozen `[CLS]` embeddings of a background-only
//! encoder: k-NN distance, cosine similarity, Mahalanobis and GMM, plus
//! ROC evaluation per signal class and pooled.

mod gmm;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::downstream::{roc_curve, DownstreamError, EmbeddingSet, Matrix, RocCurve};

pub use gmm::{fit_gmm, Gaussian, Gmm, GmmConfig};

#[derive(Debug, Error)]
pub enum AnomalyError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{0}")]
    Singular(String),
    #[error("EM did not converge within {iterations} iterations; log-likelihood trace {trace:?}")]
    NotConverged { iterations: usize, trace: Vec<f64> },
    #[error("EM log-likelihood decreased; trace {trace:?}")]
    NotMonotone { trace: Vec<f64> },
    #[error(transparent)]
    Downstream(#[from] DownstreamError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMetric {
    Knn,
    Cosine,
    Mahalanobis,
    Gmm,
}

impl ScoreMetric {
    pub const ALL: [ScoreMetric; 4] = [Self::Knn, Self::Cosine, Self::Mahalanobis, Self::Gmm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Knn => "knn",
            Self::Cosine => "cosine",
            Self::Mahalanobis => "mahalanobis",
            Self::Gmm => "gmm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnomalyConfig {
    pub k: usize,
    pub tau: f64,
    /// Added to the tied covariance diagonal.
    pub reg: f64,
    /// Keep at most this many reference rows (evenly strided); 0 keeps all.
    pub max_reference: usize,
    pub gmm: GmmConfig,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            k: 30,
            tau: 0.05,
            reg: 1e-6,
            max_reference: 0,
            gmm: GmmConfig::default(),
        }
    }
}

/// Class-conditional Gaussians sharing one covariance.
#[derive(Clone, Debug)]
pub struct TiedGaussians {
    pub classes: Vec<usize>,
    pub means: Vec<DVector<f64>>,
    /// Shared covariance, carried by one `Gaussian` for its factorization.
    shared: Gaussian,
}

impl TiedGaussians {
    pub fn new(
        classes: Vec<usize>,
        means: Vec<DVector<f64>>,
        cov: DMatrix<f64>,
    ) -> Result<Self, AnomalyError> {
        if means.is_empty() || means.len() != classes.len() {
            return Err(AnomalyError::Input("need one mean per class".into()));
        }
        let shared = Gaussian::new(DVector::zeros(means[0].len()), cov)?;
        Ok(Self {
            classes,
            means,
            shared,
        })
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.shared.cov
    }

    /// Class means and pooled within-class covariance plus `reg * I`.
    pub fn fit(x: &Matrix, labels: &[usize], reg: f64) -> Result<Self, AnomalyError> {
        let d = x.cols;
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let mut means = Vec::with_capacity(classes.len());
        for &c in &classes {
            let rows: Vec<usize> = (0..x.rows).filter(|&i| labels[i] == c).collect();
            let mut m = DVector::zeros(d);
            for &i in &rows {
                m += DVector::from_column_slice(x.row(i));
            }
            means.push(m / rows.len() as f64);
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for i in 0..x.rows {
            let c = classes
                .binary_search(&labels[i])
                .expect("class collected above");
            let diff = DVector::from_column_slice(x.row(i)) - &means[c];
            cov.ger(1.0, &diff, &diff, 1.0);
        }
        cov /= x.rows as f64;
        for r in 0..d {
            cov[(r, r)] += reg;
        }
        Self::new(classes, means, cov)
    }

    /// Minimum squared Mahalanobis distance over the class means.
    pub fn score(&self, z: &[f64]) -> f64 {
        self.means
            .iter()
            .map(|m| {
                let shifted: Vec<f64> = z.iter().zip(m.iter()).map(|(a, b)| a - b).collect();
                self.shared.mahalanobis_sq(&shifted)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Background reference: l2-normalized embeddings and the fitted models.
#[derive(Clone, Debug)]
pub struct ReferenceSet {
    pub vectors: Matrix,
    pub labels: Vec<usize>,
    pub tied: TiedGaussians,
    pub gmm: Gmm,
}

impl ReferenceSet {
    pub fn fit(emb: &EmbeddingSet, cfg: &AnomalyConfig) -> Result<Self, AnomalyError> {
        if emb.is_empty() {
            return Err(AnomalyError::Input("empty reference set".into()));
        }
        let emb = if cfg.max_reference > 0 && emb.len() > cfg.max_reference {
            let idx: Vec<usize> = (0..cfg.max_reference)
                .map(|i| i * emb.len() / cfg.max_reference)
                .collect();
            emb.subset(&idx)
        } else {
            emb.clone()
        };
        let emb = emb.normalize();
        let tied = TiedGaussians::fit(&emb.vectors, &emb.labels, cfg.reg)?;
        let gmm = fit_gmm(&emb.vectors, &cfg.gmm)?;
        Ok(Self {
            vectors: emb.vectors,
            labels: emb.labels,
            tied,
            gmm,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows == 0
    }

    /// Scores of every row of `z`, which is l2-normalized first.
    pub fn score_all(
        &self,
        z: &Matrix,
        metric: ScoreMetric,
        cfg: &AnomalyConfig,
    ) -> Result<Vec<f64>, AnomalyError> {
        if z.cols != self.vectors.cols {
            return Err(AnomalyError::Input(format!(
                "embedding dim {} vs reference dim {}",
                z.cols, self.vectors.cols
            )));
        }
        let z = z.l2_normalized();
        (0..z.rows)
            .map(|i| {
                let q = z.row(i);
                match metric {
                    ScoreMetric::Knn => score_knn(q, &self.vectors, cfg.k),
                    ScoreMetric::Cosine => score_cosine(q, &self.vectors, cfg.k, cfg.tau),
                    ScoreMetric::Mahalanobis => Ok(self.tied.score(q)),
                    ScoreMetric::Gmm => Ok(score_gmm(q, &self.gmm)),
                }
            })
            .collect()
    }
}

fn check_k(reference: &Matrix, z: &[f64], k: usize) -> Result<(), AnomalyError> {
    if reference.rows == 0 {
        return Err(AnomalyError::Input("empty reference set".into()));
    }
    if k == 0 || k > reference.rows {
        return Err(AnomalyError::Input(format!(
            "k = {k} with {} reference rows",
            reference.rows
        )));
    }
    if z.len() != reference.cols {
        return Err(AnomalyError::Input(format!(
            "dim {} vs reference {}",
            z.len(),
            reference.cols
        )));
    }
    Ok(())
}

/// Mean Euclidean distance to the `k` nearest reference rows.
pub fn score_knn(z: &[f64], reference: &Matrix, k: usize) -> Result<f64, AnomalyError> {
    check_k(reference, z, k)?;
    let mut d: Vec<f64> = (0..reference.rows)
        .map(|i| {
            reference
                .row(i)
                .iter()
                .zip(z)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    d.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(d[..k].iter().sum::<f64>() / k as f64)
}

/// `-tau log(mean_k exp(z . r / tau))` over the `k` most similar rows,
/// evaluated as a shifted log-sum-exp.
pub fn score_cosine(
    z: &[f64],
    reference: &Matrix,
    k: usize,
    tau: f64,
) -> Result<f64, AnomalyError> {
    if !(tau > 0.0) {
        return Err(AnomalyError::Input(format!(
            "tau must be positive, got {tau}"
        )));
    }
    check_k(reference, z, k)?;
    let mut s: Vec<f64> = (0..reference.rows)
        .map(|i| {
            reference
                .row(i)
                .iter()
                .zip(z)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .collect();
    s.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    let top = &s[..k];
    let m = top.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / tau;
    let lse = m + top.iter().map(|v| (v / tau - m).exp()).sum::<f64>().ln();
    Ok(-tau * (lse - (k as f64).ln()))
}

/// Negative log-likelihood under the mixture.
pub fn score_gmm(z: &[f64], gmm: &Gmm) -> f64 {
    -gmm.log_likelihood(z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalAuc {
    pub signal: String,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyEvaluation {
    pub per_signal: Vec<SignalAuc>,
    pub combined: f64,
    #[serde(skip)]
    pub rocs: Vec<RocCurve>,
    #[serde(skip)]
    pub combined_roc: Option<RocCurve>,
}

/// ROC of each signal against the background, and of all signals pooled.
/// Larger scores are more anomalous.
pub fn evaluate_anomaly(
    background: &[f64],
    signals: &[(String, Vec<f64>)],
) -> Result<AnomalyEvaluation, AnomalyError> {
    if background.is_empty() || signals.is_empty() || signals.iter().any(|s| s.1.is_empty()) {
        return Err(AnomalyError::Input("empty score set".into()));
    }
    let roc = |sig: &[f64]| -> Result<RocCurve, AnomalyError> {
        let scores: Vec<f64> = background.iter().chain(sig).copied().collect();
        let labels: Vec<bool> = (0..scores.len()).map(|i| i >= background.len()).collect();
        Ok(roc_curve(&scores, &labels)?)
    };
    let mut per_signal = Vec::new();
    let mut rocs = Vec::new();
    for (name, s) in signals {
        let r = roc(s)?;
        per_signal.push(SignalAuc {
            signal: name.clone(),
            auc: r.auc,
        });
        rocs.push(r);
    }
    let pooled: Vec<f64> = signals.iter().flat_map(|s| s.1.iter().copied()).collect();
    let combined_roc = roc(&pooled)?;
    Ok(AnomalyEvaluation {
        per_signal,
        combined: combined_roc.auc,
        rocs,
        combined_roc: Some(combined_roc),
    })
}

#[cfg(test)]
mod tests;
