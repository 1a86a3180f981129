use std::sync::Arc;

use rand::Rng;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{Float, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        shared_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulConst {
        a: Var,
        c: Arc<[T]>,
    },
    Scale {
        a: Var,
        s: T,
    },
    AddScalar {
        a: Var,
    },
    Exp {
        a: Var,
    },
    Log {
        a: Var,
    },
    LogClamp {
        a: Var,
        floor: T,
    },
    Gelu {
        a: Var,
    },
    Permute {
        a: Var,
        axes: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        a: Var,
        index: Vec<usize>,
    },
    Softmax {
        a: Var,
        temperature: T,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    MaskedFill {
        a: Var,
        mask: Arc<[bool]>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    SumLast {
        a: Var,
    },
    L2Norm {
        a: Var,
    },
    L2Normalize {
        a: Var,
        norms: Vec<T>,
        eps: T,
    },
    PairwiseDistance {
        a: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so the
/// index order is a topological order of the computation.
#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of every leaf that requires gradient, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of leaves holding a gradient.
    pub fn count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        reason: reason.into(),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Float>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn gelu<T: Float>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Same values, no gradient edge.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Matrix product. `a: [..., k]` with `b: [k, n]`, or batched
    /// `a: [batch, m, k]` with `b: [batch, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Product with the transpose of `b`: `b: [n, k]` or `[batch, n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() < 2 {
            return Err(mismatch(op, &sa, &sb));
        }
        let (bk, bn) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let k = last_dim(&sa);
        if k != bk {
            return Err(mismatch(op, &sa, &sb));
        }
        let (batch, m, shared_b, out_shape) = if sb.len() == 2 {
            let m = sa[..sa.len() - 1].iter().product::<usize>();
            let mut out = sa[..sa.len() - 1].to_vec();
            out.push(bn);
            (1, m, true, out)
        } else if sb.len() == 3 && sa.len() == 3 && sa[0] == sb[0] {
            (sa[0], sa[1], false, vec![sa[0], sa[1], bn])
        } else {
            return Err(mismatch(op, &sa, &sb));
        };
        let n = bn;
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.nodes[a.0].value.data();
            let bd = self.nodes[b.0].value.data();
            for bi in 0..batch {
                let a_i = &ad[bi * m * k..(bi + 1) * m * k];
                let b_i = if shared_b {
                    bd
                } else {
                    &bd[bi * k * n..(bi + 1) * k * n]
                };
                let c_i = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    gemm_nt(a_i, b_i, c_i, m, k, n);
                } else {
                    gemm_nn(a_i, b_i, c_i, m, k, n);
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
                shared_b,
            },
            &[a, b],
        ))
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.check_broadcast(op, a, b)?;
        let av = &self.nodes[a.0].value;
        let bd = self.nodes[b.0].value.data();
        let w = bd.len().max(1);
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % w]))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// Elementwise sum; `b` may have the shape of a suffix of `a`'s shape and
    /// is then repeated along `a`'s leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    /// Elementwise product with a constant array of identical length.
    pub fn mul_const(&mut self, a: Var, c: impl Into<Arc<[T]>>) -> Result<Var> {
        let c: Arc<[T]> = c.into();
        let av = &self.nodes[a.0].value;
        if c.len() != av.len() {
            return Err(mismatch("mul_const", av.shape(), &[c.len()]));
        }
        let data = av
            .data()
            .iter()
            .zip(c.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulConst { a, c }, &[a]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * s);
        self.push(value, Op::Scale { a, s }, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| x + s);
        self.push(value, Op::AddScalar { a }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.exp());
        self.push(value, Op::Exp { a }, &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.ln());
        self.push(value, Op::Log { a }, &[a])
    }

    /// `log(max(x, floor))`; zero gradient where the floor is active.
    pub fn log_clamp(&mut self, a: Var, floor: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.max(floor).ln());
        self.push(value, Op::LogClamp { a, floor }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(gelu);
        self.push(value, Op::Gelu { a }, &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true))
        {
            return Err(invalid(
                "permute",
                format!("axes {axes:?} for shape {shape:?}"),
            ));
        }
        let (data, out_shape) = permute_data(self.nodes[a.0].value.data(), &shape, axes);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            &[a],
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(invalid("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// `a[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid(
                "slice",
                format!("{start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Slice { a, axis, start }, &[a]))
    }

    /// Flat gather: output is rank-1 with `out[i] = a.flat[index[i]]`.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let src = self.nodes[a.0].value.data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(invalid(
                "gather",
                format!("index {bad} out of range {}", src.len()),
            ));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new([index.len()], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                a,
                index: index.to_vec(),
            },
            &[a],
        ))
    }

    /// `softmax(a / temperature)` along the last axis. `-inf` entries get
    /// probability zero.
    pub fn softmax(&mut self, a: Var, temperature: T) -> Result<Var> {
        if temperature <= T::zero() {
            return Err(invalid("softmax", "temperature must be positive"));
        }
        let value = softmax_rows(&self.nodes[a.0].value, temperature);
        Ok(self.push(value, Op::Softmax { a, temperature }, &[a]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = last_dim(&xs);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch("layer_norm", &xs, self.shape(gamma)));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let xd = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let rows = xd.len() / d;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout: zero each entry with probability `rate`, scale the
    /// survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let n = self.nodes[a.0].value.len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.mul_const(a, mask)
    }

    /// Replace entries where `mask` is set by `fill`.
    pub fn masked_fill(&mut self, a: Var, mask: impl Into<Arc<[bool]>>, fill: T) -> Result<Var> {
        let mask: Arc<[bool]> = mask.into();
        let av = &self.nodes[a.0].value;
        if mask.len() != av.len() {
            return Err(mismatch("masked_fill", av.shape(), &[mask.len()]));
        }
        let data = av
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MaskedFill { a, mask }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.data().iter().copied().sum::<T>() / T::of(v.len().max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(invalid("sum_last", "scalar input"));
        }
        let d = last_dim(&shape);
        let data = self.nodes[a.0]
            .value
            .data()
            .chunks(d.max(1))
            .map(|c| c.iter().copied().sum::<T>())
            .collect();
        let value = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        Ok(self.push(value, Op::SumLast { a }, &[a]))
    }

    /// Euclidean norm over the last axis.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(invalid("l2_norm", "scalar input"));
        }
        let d = last_dim(&shape);
        let data = self.nodes[a.0]
            .value
            .data()
            .chunks(d.max(1))
            .map(|c| c.iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        let value = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        Ok(self.push(value, Op::L2Norm { a }, &[a]))
    }

    /// Rows divided by their Euclidean norm (norm floored at `eps`).
    pub fn l2_normalize(&mut self, a: Var, eps: T) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(invalid("l2_normalize", "scalar input"));
        }
        let d = last_dim(&shape);
        let src = self.nodes[a.0].value.data();
        let mut norms = Vec::with_capacity(src.len() / d.max(1));
        let mut data = Vec::with_capacity(src.len());
        for c in src.chunks(d.max(1)) {
            let n = c.iter().map(|&x| x * x).sum::<T>().sqrt();
            norms.push(n);
            let denom = n.max(eps);
            data.extend(c.iter().map(|&x| x / denom));
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::L2Normalize { a, norms, eps }, &[a]))
    }

    /// All pairwise Euclidean distances between the rows of `a: [n, d]`.
    pub fn pairwise_distance(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(invalid(
                "pairwise_distance",
                format!("expected rank 2, got {shape:?}"),
            ));
        }
        let (n, d) = (shape[0], shape[1]);
        let x = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            for j in i + 1..n {
                let s = (0..d)
                    .map(|c| {
                        let t = x[i * d + c] - x[j * d + c];
                        t * t
                    })
                    .sum::<T>()
                    .sqrt();
                out[i * n + j] = s;
                out[j * n + i] = s;
            }
        }
        let value = Tensor::new([n, n], out)?;
        Ok(self.push(value, Op::PairwiseDistance { a }, &[a]))
    }

    /// Reverse-mode sweep from a scalar `root`. Returns gradients for every
    /// trainable leaf that `root` depends on.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &mut grads);
            if let Op::Leaf = node.op {
                out[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        fn slot<'g, T: Float>(
            nodes: &[Node<T>],
            grads: &'g mut [Option<Vec<T>>],
            v: Var,
        ) -> Option<&'g mut Vec<T>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let len = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
        }
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
                shared_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (ad, bd) = (val(*a), val(*b));
                with_grad!(*a, |ga| {
                    for bi in 0..batch {
                        let g_i = &g[bi * m * n..(bi + 1) * m * n];
                        let b_i = if *shared_b {
                            bd
                        } else {
                            &bd[bi * k * n..(bi + 1) * k * n]
                        };
                        let ga_i = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            gemm_nn(g_i, b_i, ga_i, m, n, k);
                        } else {
                            gemm_nt(g_i, b_i, ga_i, m, n, k);
                        }
                    }
                });
                with_grad!(*b, |gb| {
                    for bi in 0..batch {
                        let g_i = &g[bi * m * n..(bi + 1) * m * n];
                        let a_i = &ad[bi * m * k..(bi + 1) * m * k];
                        let gb_i = if *shared_b {
                            &mut gb[..]
                        } else {
                            &mut gb[bi * k * n..(bi + 1) * k * n]
                        };
                        if *trans_b {
                            gemm_tn(g_i, a_i, gb_i, n, m, k);
                        } else {
                            gemm_tn(a_i, g_i, gb_i, k, m, n);
                        }
                    }
                });
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) {
                    -T::one()
                } else {
                    T::one()
                };
                with_grad!(*a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                with_grad!(*b, |gb| {
                    let w = gb.len().max(1);
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % w] += sign * y;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (val(*a), val(*b));
                let w = bd.len().max(1);
                with_grad!(*a, |ga| {
                    for (i, &y) in g.iter().enumerate() {
                        ga[i] += y * bd[i % w];
                    }
                });
                with_grad!(*b, |gb| {
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % w] += y * ad[i];
                    }
                });
            }
            Op::MulConst { a, c } => with_grad!(*a, |ga| {
                for ((x, &y), &cv) in ga.iter_mut().zip(g).zip(c.iter()) {
                    *x += y * cv;
                }
            }),
            Op::Scale { a, s } => with_grad!(*a, |ga| {
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += y * *s;
                }
            }),
            Op::AddScalar { a } | Op::Reshape { a } => with_grad!(*a, |ga| {
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }),
            Op::Exp { a } => with_grad!(*a, |ga| {
                for ((x, &y), &e) in ga.iter_mut().zip(g).zip(node.value.data()) {
                    *x += y * e;
                }
            }),
            Op::Log { a } => with_grad!(*a, |ga| {
                for ((x, &y), &v) in ga.iter_mut().zip(g).zip(val(*a)) {
                    *x += y / v;
                }
            }),
            Op::LogClamp { a, floor } => with_grad!(*a, |ga| {
                for ((x, &y), &v) in ga.iter_mut().zip(g).zip(val(*a)) {
                    if v > *floor {
                        *x += y / v;
                    }
                }
            }),
            Op::Gelu { a } => with_grad!(*a, |ga| {
                for ((x, &y), &v) in ga.iter_mut().zip(g).zip(val(*a)) {
                    *x += y * gelu_grad(v);
                }
            }),
            Op::Permute { a, axes } => with_grad!(*a, |ga| {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inverse);
                for (x, y) in ga.iter_mut().zip(back) {
                    *x += y;
                }
            }),
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = nodes[p.0].value.shape()[*axis] * inner;
                    with_grad!(*p, |gp| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            for (x, &y) in gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { a, axis, start } => with_grad!(*a, |ga| {
                let in_shape = nodes[a.0].value.shape();
                let len = node.value.shape()[*axis];
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                for o in 0..outer {
                    let base = (o * in_shape[*axis] + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (x, &y) in ga[base..base + len * inner].iter_mut().zip(src) {
                        *x += y;
                    }
                }
            }),
            Op::Gather { a, index } => with_grad!(*a, |ga| {
                for (&i, &y) in index.iter().zip(g) {
                    ga[i] += y;
                }
            }),
            Op::Softmax { a, temperature } => with_grad!(*a, |ga| {
                let p = node.value.data();
                let d = last_dim(node.value.shape()).max(1);
                let inv_t = T::one() / *temperature;
                for r in 0..p.len() / d {
                    let pr = &p[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let s: T = pr.iter().zip(gr).map(|(&pv, &gv)| pv * gv).sum();
                    for j in 0..d {
                        ga[r * d + j] += pr[j] * (gr[j] - s) * inv_t;
                    }
                }
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = val(*gamma);
                let d = gam.len();
                let rows = xhat.len() / d;
                with_grad!(*x, |gx| {
                    let dn = T::of(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let v = g[r * d + j] * gam[j];
                            dxhat[j] = v;
                            s1 += v;
                            s2 += v * xhat[r * d + j];
                        }
                        let scale = rstd[r] / dn;
                        for j in 0..d {
                            gx[r * d + j] += scale * (dn * dxhat[j] - s1 - xhat[r * d + j] * s2);
                        }
                    }
                });
                with_grad!(*gamma, |gg| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                with_grad!(*beta, |gbt| {
                    for r in 0..rows {
                        for j in 0..d {
                            gbt[j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::MaskedFill { a, mask } => with_grad!(*a, |ga| {
                for ((x, &y), &m) in ga.iter_mut().zip(g).zip(mask.iter()) {
                    if !m {
                        *x += y;
                    }
                }
            }),
            Op::Sum { a } => with_grad!(*a, |ga| {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::Mean { a } => with_grad!(*a, |ga| {
                let s = g[0] / T::of(ga.len().max(1) as f64);
                for x in ga.iter_mut() {
                    *x += s;
                }
            }),
            Op::SumLast { a } => with_grad!(*a, |ga| {
                let d = ga.len() / g.len().max(1);
                for (r, &y) in g.iter().enumerate() {
                    for x in &mut ga[r * d..(r + 1) * d] {
                        *x += y;
                    }
                }
            }),
            Op::L2Norm { a } => with_grad!(*a, |ga| {
                let xd = val(*a);
                let d = xd.len() / g.len().max(1);
                for (r, (&y, &nrm)) in g.iter().zip(node.value.data()).enumerate() {
                    if nrm > T::zero() {
                        for j in r * d..(r + 1) * d {
                            ga[j] += y * xd[j] / nrm;
                        }
                    }
                }
            }),
            Op::L2Normalize { a, norms, eps } => with_grad!(*a, |ga| {
                let yd = node.value.data();
                let d = yd.len() / norms.len().max(1);
                for (r, &nrm) in norms.iter().enumerate() {
                    let rows = r * d..(r + 1) * d;
                    if nrm > *eps {
                        let gy: T = g[rows.clone()]
                            .iter()
                            .zip(&yd[rows.clone()])
                            .map(|(&a, &b)| a * b)
                            .sum();
                        for j in rows {
                            ga[j] += (g[j] - yd[j] * gy) / nrm;
                        }
                    } else {
                        for j in rows {
                            ga[j] += g[j] / *eps;
                        }
                    }
                }
            }),
            Op::PairwiseDistance { a } => with_grad!(*a, |ga| {
                let x = val(*a);
                let dist = node.value.data();
                let n = node.value.shape()[0];
                let d = x.len() / n.max(1);
                for i in 0..n {
                    for j in 0..n {
                        let dij = dist[i * n + j];
                        let gij = g[i * n + j];
                        if i == j || dij == T::zero() || gij == T::zero() {
                            continue;
                        }
                        let coef = gij / dij;
                        for c in 0..d {
                            let diff = x[i * d + c] - x[j * d + c];
                            ga[i * d + c] += coef * diff;
                            ga[j * d + c] -= coef * diff;
                        }
                    }
                }
            }),
        }
    }
}

/// Row-wise `softmax(x / temperature)` over the last axis.
pub fn softmax_rows<T: Float>(x: &Tensor<T>, temperature: T) -> Tensor<T> {
    let d = last_dim(x.shape()).max(1);
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            out.extend(std::iter::repeat_n(T::zero(), row.len()));
            continue;
        }
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = ((v - max) / temperature).exp();
            total += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= total;
        }
    }
    Tensor {
        shape: x.shape().to_vec(),
        data: out,
    }
}
