// Distillation losses on the tape, plus the non-differentiable teacher-side
// helpers (centering, sharpening, entropy).

use crate::network::NetworkError;
use crate::tensor::softmax_rows;
use crate::tensor::{Float, Graph, Tensor, Var};

pub const LOG_FLOOR: f64 = 1e-12;
pub const KOLEO_EPS: f64 = 1e-8;

/// `softmax((x - c) / tau)` per row.
pub fn center_and_sharpen<T: Float>(logits: &Tensor<T>, center: &[T], tau: f64) -> Tensor<T> {
    let d = *logits.shape().last().expect("rank >= 1");
    assert_eq!(center.len(), d, "center width");
    let shifted = Tensor::new(
        logits.shape().to_vec(),
        logits
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x - center[i % d])
            .collect(),
    )
    .expect("same shape");
    softmax_rows(&shifted, T::of(tau))
}

/// `c <- tau_c c + (1 - tau_c) mean`.
pub fn update_center<T: Float>(center: &mut [T], batch_mean: &[T], tau_center: f64) {
    assert_eq!(center.len(), batch_mean.len(), "center width");
    let (a, b) = (T::of(tau_center), T::of(1.0 - tau_center));
    for (c, &m) in center.iter_mut().zip(batch_mean) {
        *c = a * *c + b * m;
    }
}

/// Column means of a `[rows, d]` tensor; `None` when there are no rows.
pub fn row_mean<T: Float>(x: &Tensor<T>) -> Option<Vec<T>> {
    let d = *x.shape().last()?;
    let rows = x.len() / d.max(1);
    if rows == 0 {
        return None;
    }
    let mut m = vec![T::zero(); d];
    for r in 0..rows {
        for (acc, &v) in m.iter_mut().zip(x.row(r)) {
            *acc += v;
        }
    }
    let n = T::of(rows as f64);
    Some(m.into_iter().map(|v| v / n).collect())
}

/// Mean over rows of `-sum p log p`.
pub fn mean_entropy<T: Float>(p: &Tensor<T>) -> f64 {
    let d = *p.shape().last().expect("rank >= 1");
    let rows = p.len() / d;
    let total: f64 = p
        .data()
        .iter()
        .map(|&x| x.as_f64())
        .filter(|&x| x > 0.0)
        .map(|x| -x * x.ln())
        .sum();
    total / rows.max(1) as f64
}

/// `log(max(softmax(x / tau), 1e-12))` per row.
pub fn student_log_probs<T: Float>(
    g: &mut Graph<T>,
    logits: Var,
    tau: f64,
) -> Result<Var, NetworkError> {
    let p = g.softmax(logits, T::of(tau))?;
    Ok(g.log_clamp(p, T::of(LOG_FLOOR)))
}

/// Masked-particle loss. Rows of `student_logp`/`teacher_p` are grouped by
/// view, `counts[v]` rows for view `v`. Each view with `M > 0` contributes
/// its mean cross-entropy, empty views contribute 0, and the result is
/// averaged over all views.
pub fn loss_particle<T: Float>(
    g: &mut Graph<T>,
    student_logp: Var,
    teacher_p: &Tensor<T>,
    counts: &[usize],
) -> Result<Var, NetworkError> {
    let rows: usize = counts.iter().sum();
    let shape = g.shape(student_logp).to_vec();
    if shape.len() != 2 || shape[0] != rows || teacher_p.shape() != shape.as_slice() {
        return Err(NetworkError::Input(format!(
            "particle loss: student {shape:?}, teacher {:?}, {rows} masked rows",
            teacher_p.shape()
        )));
    }
    let d = shape[1];
    let views = counts.len().max(1) as f64;
    let mut w = Vec::with_capacity(rows * d);
    let mut r = 0;
    for &m in counts {
        for _ in 0..m {
            let scale = T::of(-1.0 / (m as f64 * views));
            w.extend(teacher_p.row(r).iter().map(|&p| p * scale));
            r += 1;
        }
    }
    let weighted = g.mul_const(student_logp, w)?;
    Ok(g.sum(weighted))
}

/// Cross-view `[CLS]` loss for `2B` rows ordered `[u_1..u_B, v_1..v_B]`:
/// the teacher row of one view supervises the student row of the other.
pub fn loss_cls<T: Float>(
    g: &mut Graph<T>,
    student_logp: Var,
    teacher_p: &Tensor<T>,
) -> Result<Var, NetworkError> {
    let shape = g.shape(student_logp).to_vec();
    if shape.len() != 2 || shape[0] % 2 != 0 || teacher_p.shape() != shape.as_slice() {
        return Err(NetworkError::Input(format!(
            "cls loss: student {shape:?}, teacher {:?}",
            teacher_p.shape()
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    let b = n / 2;
    let scale = T::of(-1.0 / n as f64);
    let mut w = Vec::with_capacity(n * d);
    for r in 0..n {
        let partner = if r < b { r + b } else { r - b };
        w.extend(teacher_p.row(partner).iter().map(|&p| p * scale));
    }
    let weighted = g.mul_const(student_logp, w)?;
    Ok(g.sum(weighted))
}

/// `-mean_i log(min_{j != i} |x_i - x_j| + eps)` on l2-normalized rows.
pub fn loss_koleo<T: Float>(g: &mut Graph<T>, x: Var) -> Result<Var, NetworkError> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(NetworkError::Input(format!(
            "KoLeo needs at least 2 embeddings, got shape {shape:?}"
        )));
    }
    let n = shape[0];
    let z = g.l2_normalize(x, T::of(1e-12))?;
    let dist = g.pairwise_distance(z)?;
    let dv = g.value(dist).data();
    let idx: Vec<usize> = (0..n)
        .map(|i| {
            let nearest = (0..n)
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    dv[i * n + a]
                        .partial_cmp(&dv[i * n + b])
                        .expect("finite distances")
                })
                .expect("n >= 2");
            i * n + nearest
        })
        .collect();
    let nn = g.gather(dist, &idx)?;
    let nn = g.add_scalar(nn, T::of(KOLEO_EPS));
    let l = g.log(nn);
    let m = g.mean(l);
    Ok(g.neg(m))
}

/// `L_Part + L_CLS + lambda L_KoLeo`.
pub fn total_loss<T: Float>(
    g: &mut Graph<T>,
    part: Var,
    cls: Var,
    koleo: Var,
    lambda: f64,
) -> Result<Var, NetworkError> {
    let s = g.add(part, cls)?;
    let k = g.scale(koleo, T::of(lambda));
    Ok(g.add(s, k)?)
}
