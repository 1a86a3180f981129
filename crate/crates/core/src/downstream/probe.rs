// Probes on frozen features. Both take the test features as a bare matrix,
// so test labels cannot reach the classifier.

use serde::{Deserialize, Serialize};

use super::{DownstreamError, EmbeddingSet, Matrix};

pub const DEFAULT_K: usize = 30;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOutput {
    pub predictions: Vec<usize>,
    /// `test rows × num_classes`; vote fractions or softmax probabilities.
    pub scores: Matrix,
}

fn check_train(
    train: &EmbeddingSet,
    test: &Matrix,
    num_classes: usize,
) -> Result<(), DownstreamError> {
    if train.is_empty() {
        return Err(DownstreamError::Input("empty training set".into()));
    }
    if test.cols != train.vectors.cols {
        return Err(DownstreamError::Input(format!(
            "train dim {} vs test dim {}",
            train.vectors.cols, test.cols
        )));
    }
    if let Some(&l) = train.labels.iter().find(|&&l| l >= num_classes) {
        return Err(DownstreamError::Input(format!(
            "label {l} >= num_classes {num_classes}"
        )));
    }
    Ok(())
}

/// Euclidean k-NN with vote-fraction scores. With `normalize`, train and
/// test rows are l2-normalized first. Equidistant neighbors are taken in
/// training order.
pub fn knn_probe(
    train: &EmbeddingSet,
    test: &Matrix,
    k: usize,
    num_classes: usize,
    normalize: bool,
) -> Result<ProbeOutput, DownstreamError> {
    check_train(train, test, num_classes)?;
    if k == 0 || k > train.len() {
        return Err(DownstreamError::Input(format!(
            "k = {k} with {} training rows",
            train.len()
        )));
    }
    let (tr, te) = if normalize {
        (train.vectors.l2_normalized(), test.l2_normalized())
    } else {
        (train.vectors.clone(), test.clone())
    };
    let mut scores = Matrix::zeros(te.rows, num_classes);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(tr.rows);
    for i in 0..te.rows {
        let q = te.row(i);
        dist.clear();
        dist.extend((0..tr.rows).map(|j| {
            let d2: f64 = tr
                .row(j)
                .iter()
                .zip(q)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (d2, j)
        }));
        dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let row = scores.row_mut(i);
        for &(_, j) in &dist[..k] {
            row[train.labels[j]] += 1.0 / k as f64;
        }
    }
    Ok(ProbeOutput {
        predictions: scores.argmax_rows(),
        scores,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearProbeConfig {
    /// L2 penalty on the weights (not the biases).
    pub l2: f64,
    pub max_iter: usize,
    /// Stop once the largest gradient component falls below this.
    pub tol: f64,
    /// Standardize features with training mean and std first.
    pub standardize: bool,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            max_iter: 2000,
            tol: 1e-6,
            standardize: true,
        }
    }
}

struct Softmax {
    w: Vec<f64>,
    b: Vec<f64>,
    d: usize,
    c: usize,
}

impl Softmax {
    fn probs(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.b[k]
                + (0..self.d)
                    .map(|j| x[j] * self.w[j * self.c + k])
                    .sum::<f64>();
        }
        let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for o in out.iter_mut() {
            *o = (*o - m).exp();
            s += *o;
        }
        out.iter_mut().for_each(|o| *o /= s);
    }

    /// Objective and, when `grad` is given, its gradient `[w.., b..]`.
    fn objective(&self, x: &Matrix, y: &[usize], l2: f64, grad: Option<&mut [f64]>) -> f64 {
        let (n, d, c) = (x.rows as f64, self.d, self.c);
        let mut p = vec![0.0; c];
        let mut loss = 0.0;
        let mut g = grad;
        if let Some(g) = g.as_deref_mut() {
            g.fill(0.0);
        }
        for i in 0..x.rows {
            let xi = x.row(i);
            self.probs(xi, &mut p);
            loss -= p[y[i]].max(1e-300).ln();
            if let Some(g) = g.as_deref_mut() {
                p[y[i]] -= 1.0;
                for k in 0..c {
                    let e = p[k] / n;
                    for j in 0..d {
                        g[j * c + k] += xi[j] * e;
                    }
                    g[d * c + k] += e;
                }
            }
        }
        let reg: f64 = self.w.iter().map(|w| w * w).sum::<f64>() * l2 / 2.0;
        if let Some(g) = g {
            for (gj, wj) in g.iter_mut().zip(&self.w) {
                *gj += l2 * wj;
            }
        }
        loss / n + reg
    }

    fn shifted(&self, g: &[f64], t: f64) -> Self {
        let dc = self.d * self.c;
        Self {
            w: self
                .w
                .iter()
                .zip(&g[..dc])
                .map(|(w, g)| w - t * g)
                .collect(),
            b: self
                .b
                .iter()
                .zip(&g[dc..])
                .map(|(b, g)| b - t * g)
                .collect(),
            d: self.d,
            c: self.c,
        }
    }
}

fn standardizer(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows as f64;
    let mut mean = vec![0.0; x.cols];
    for i in 0..x.rows {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; x.cols];
    for i in 0..x.rows {
        for ((s, v), m) in sd.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let sd = sd
        .into_iter()
        .map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 })
        .collect();
    (mean, sd)
}

fn apply(x: &Matrix, mean: &[f64], sd: &[f64]) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows {
        for ((v, m), s) in out.row_mut(i).iter_mut().zip(mean).zip(sd) {
            *v = (*v - m) / s;
        }
    }
    out
}

/// Multinomial logistic regression fitted by full-batch gradient descent
/// with Armijo backtracking. Scores are softmax probabilities.
pub fn linear_probe(
    train: &EmbeddingSet,
    test: &Matrix,
    num_classes: usize,
    cfg: &LinearProbeConfig,
) -> Result<ProbeOutput, DownstreamError> {
    check_train(train, test, num_classes)?;
    let first = train.labels[0];
    if train.labels.iter().all(|&l| l == first) {
        return Err(DownstreamError::SingleClass(first));
    }
    let (x, xt) = if cfg.standardize {
        let (m, s) = standardizer(&train.vectors);
        (apply(&train.vectors, &m, &s), apply(test, &m, &s))
    } else {
        (train.vectors.clone(), test.clone())
    };
    let (d, c) = (x.cols, num_classes);
    let mut model = Softmax {
        w: vec![0.0; d * c],
        b: vec![0.0; c],
        d,
        c,
    };
    let mut g = vec![0.0; d * c + c];
    let mut f = model.objective(&x, &train.labels, cfg.l2, Some(&mut g));
    let mut t = 1.0;
    for _ in 0..cfg.max_iter {
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if gmax < cfg.tol {
            break;
        }
        let g2: f64 = g.iter().map(|v| v * v).sum();
        t *= 2.0;
        let (next, fnext) = loop {
            let cand = model.shifted(&g, t);
            let fc = cand.objective(&x, &train.labels, cfg.l2, None);
            if fc <= f - 1e-4 * t * g2 || t < 1e-12 {
                break (cand, fc);
            }
            t *= 0.5;
        };
        if fnext >= f {
            break;
        }
        model = next;
        f = model.objective(&x, &train.labels, cfg.l2, Some(&mut g));
        debug_assert!((f - fnext).abs() < 1e-9 * (1.0 + f.abs()));
    }
    let mut scores = Matrix::zeros(xt.rows, c);
    for i in 0..xt.rows {
        let mut p = vec![0.0; c];
        model.probs(xt.row(i), &mut p);
        scores.row_mut(i).copy_from_slice(&p);
    }
    Ok(ProbeOutput {
        predictions: scores.argmax_rows(),
        scores,
    })
}
