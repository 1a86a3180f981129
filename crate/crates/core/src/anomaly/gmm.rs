// Full-covariance Gaussian mixture fitted by EM with k-means++ seeding.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AnomalyError;
use crate::downstream::Matrix;
use crate::rng::{stream_rng, Stream};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmConfig {
    pub components: usize,
    pub restarts: usize,
    /// Relative log-likelihood change that counts as converged.
    pub tol: f64,
    pub max_iter: usize,
    /// Covariance floor. EM maximizes the log-likelihood minus
    /// `(reg n / 2K) sum_c tr(cov_c^-1)`, so a component holding `n/K`
    /// points gets `reg` added to its diagonal.
    pub reg: f64,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            components: 4,
            restarts: 10,
            tol: 1e-6,
            max_iter: 500,
            reg: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    /// `-(d log 2pi + log det cov) / 2`.
    log_norm: f64,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, AnomalyError> {
        let d = mean.len();
        if cov.shape() != (d, d) {
            return Err(AnomalyError::Input(format!(
                "covariance {:?} for mean of length {d}",
                cov.shape()
            )));
        }
        let chol = Cholesky::new(cov.clone()).ok_or_else(|| {
            AnomalyError::Singular(
                "covariance is not positive definite; use a positive regularization".into(),
            )
        })?;
        let log_det = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|x| x.ln())
                .sum::<f64>();
        Ok(Self {
            mean,
            cov,
            chol,
            log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
        })
    }

    /// `(z - mean)^T cov^-1 (z - mean)`.
    pub fn mahalanobis_sq(&self, z: &[f64]) -> f64 {
        let diff =
            DVector::from_iterator(z.len(), z.iter().zip(self.mean.iter()).map(|(a, b)| a - b));
        let y = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        y.norm_squared()
    }

    pub fn log_pdf(&self, z: &[f64]) -> f64 {
        self.log_norm - 0.5 * self.mahalanobis_sq(z)
    }

    fn precision_trace(&self) -> f64 {
        self.chol.inverse().trace()
    }
}

#[derive(Clone, Debug)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub components: Vec<Gaussian>,
    /// Penalized mean log-likelihood per point after each EM iteration of
    /// the kept fit.
    pub trace: Vec<f64>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Gmm {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self, AnomalyError> {
        if weights.len() != components.len() || weights.is_empty() {
            return Err(AnomalyError::Input("need one weight per component".into()));
        }
        if weights.iter().any(|&w| w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(AnomalyError::Input(format!(
                "weights must be non-negative and sum to 1: {weights:?}"
            )));
        }
        Ok(Self {
            weights,
            components,
            trace: Vec::new(),
        })
    }

    pub fn log_likelihood(&self, z: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.components)
            .map(|(w, c)| w.ln() + c.log_pdf(z))
            .collect();
        log_sum_exp(&terms)
    }

    fn mean_log_likelihood(&self, x: &Matrix) -> f64 {
        (0..x.rows)
            .map(|i| self.log_likelihood(x.row(i)))
            .sum::<f64>()
            / x.rows as f64
    }

    fn objective(&self, x: &Matrix, alpha: f64) -> f64 {
        let penalty: f64 = self.components.iter().map(Gaussian::precision_trace).sum();
        self.mean_log_likelihood(x) - 0.5 * alpha * penalty / x.rows as f64
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: first center uniform, then proportional to squared
/// distance to the nearest chosen center.
fn kmeans_pp(x: &Matrix, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![x.row(rng.random_range(0..x.rows)).to_vec()];
    let mut d2: Vec<f64> = (0..x.rows)
        .map(|i| sq_dist(x.row(i), &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = x.rows - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..x.rows)
        };
        let c = x.row(pick).to_vec();
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist(x.row(i), &c));
        }
        centers.push(c);
    }
    centers
}

fn covariance(x: &Matrix, weights: &[f64], mean: &[f64], reg: f64) -> DMatrix<f64> {
    let d = x.cols;
    let total: f64 = weights.iter().sum();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut diff = vec![0.0; d];
    for i in 0..x.rows {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        for (o, (a, b)) in diff.iter_mut().zip(x.row(i).iter().zip(mean)) {
            *o = a - b;
        }
        for r in 0..d {
            let s = w * diff[r];
            for c in 0..=r {
                cov[(r, c)] += s * diff[c];
            }
        }
    }
    for r in 0..d {
        for c in 0..=r {
            let v = cov[(r, c)] / total;
            cov[(r, c)] = v;
            cov[(c, r)] = v;
        }
        cov[(r, r)] += reg;
    }
    cov
}

fn weighted_mean(x: &Matrix, weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let mut m = vec![0.0; x.cols];
    for i in 0..x.rows {
        for (acc, v) in m.iter_mut().zip(x.row(i)) {
            *acc += weights[i] * v;
        }
    }
    m.iter_mut().for_each(|v| *v /= total);
    m
}

fn fit_once(x: &Matrix, cfg: &GmmConfig, restart: usize) -> Result<Gmm, AnomalyError> {
    let (n, k) = (x.rows, cfg.components);
    let mut rng = stream_rng(cfg.seed, Stream::Mixture, &[restart as u64]);
    let centers = kmeans_pp(x, k, &mut rng);
    let global = covariance(x, &vec![1.0; n], &weighted_mean(x, &vec![1.0; n]), cfg.reg);
    let mut gmm = Gmm::new(
        vec![1.0 / k as f64; k],
        centers
            .into_iter()
            .map(|c| Gaussian::new(DVector::from_vec(c), global.clone()))
            .collect::<Result<_, _>>()?,
    )?;
    let alpha = cfg.reg * n as f64 / k as f64;
    let mut prev = gmm.objective(x, alpha);
    let mut trace = vec![prev];
    let mut resp = vec![vec![0.0; n]; k];
    let mut terms = vec![0.0; k];
    for _ in 0..cfg.max_iter {
        // E-step.
        for i in 0..n {
            let z = x.row(i);
            for (c, t) in terms.iter_mut().enumerate() {
                *t = gmm.weights[c].ln() + gmm.components[c].log_pdf(z);
            }
            let lse = log_sum_exp(&terms);
            for c in 0..k {
                resp[c][i] = (terms[c] - lse).exp();
            }
        }
        // M-step, cov = (S_c + alpha I) / N_c. A component that lost all its
        // points keeps its shape.
        let mut weights = Vec::with_capacity(k);
        let mut comps = Vec::with_capacity(k);
        for c in 0..k {
            let nk: f64 = resp[c].iter().sum();
            weights.push(nk / n as f64);
            if nk < 1e-8 * n as f64 {
                comps.push(gmm.components[c].clone());
                continue;
            }
            let mean = weighted_mean(x, &resp[c]);
            let cov = covariance(x, &resp[c], &mean, alpha / nk);
            comps.push(Gaussian::new(DVector::from_vec(mean), cov)?);
        }
        let s: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= s);
        gmm = Gmm::new(weights, comps)?;
        let ll = gmm.objective(x, alpha);
        trace.push(ll);
        if ll < prev - 1e-9 * (1.0 + prev.abs()) {
            return Err(AnomalyError::NotMonotone { trace });
        }
        if (ll - prev).abs() <= cfg.tol * prev.abs().max(1e-12) {
            gmm.trace = trace;
            return Ok(gmm);
        }
        prev = ll;
    }
    Err(AnomalyError::NotConverged {
        iterations: cfg.max_iter,
        trace,
    })
}

/// Best of `cfg.restarts` EM fits by final log-likelihood.
pub fn fit_gmm(x: &Matrix, cfg: &GmmConfig) -> Result<Gmm, AnomalyError> {
    if cfg.components == 0 || cfg.restarts == 0 {
        return Err(AnomalyError::Input(
            "need at least one component and one restart".into(),
        ));
    }
    if x.rows < cfg.components {
        return Err(AnomalyError::Input(format!(
            "{} points for {} components",
            x.rows, cfg.components
        )));
    }
    let mut best: Option<Gmm> = None;
    for r in 0..cfg.restarts {
        let g = fit_once(x, cfg, r)?;
        let ll = *g.trace.last().expect("trace is non-empty");
        if best
            .as_ref()
            .is_none_or(|b| ll > *b.trace.last().expect("trace is non-empty"))
        {
            best = Some(g);
        }
    }
    Ok(best.expect("restarts >= 1"))
}
