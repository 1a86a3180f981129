// Batched forward pass recorded on a `Graph`. Tokens are laid out as
// `[batch, 1 + capacity, d_model]` with the `[CLS]` token in row 0.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::{Linear, ModelParams, NetworkError, Norm};
use crate::jetdata::{Jet, FEATURES};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Model inputs for a batch of jets of equal capacity.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub capacity: usize,
    /// `size * capacity * 4` particle features.
    pub features: Vec<f64>,
    /// `size * capacity` validity flags.
    pub valid: Vec<bool>,
    /// `size * capacity` mask flags (masked tokens become `[MASK]`).
    pub masked: Vec<bool>,
}

impl Batch {
    pub fn unmasked(jets: &[&Jet]) -> Result<Self, NetworkError> {
        Self::build(jets, None)
    }

    pub fn masked(jets: &[&Jet], masks: &[&[bool]]) -> Result<Self, NetworkError> {
        if masks.len() != jets.len() {
            return Err(NetworkError::Input(format!(
                "{} jets but {} masks",
                jets.len(),
                masks.len()
            )));
        }
        Self::build(jets, Some(masks))
    }

    fn build(jets: &[&Jet], masks: Option<&[&[bool]]>) -> Result<Self, NetworkError> {
        let capacity = jets
            .first()
            .map(|j| j.capacity())
            .ok_or_else(|| NetworkError::Input("empty batch".into()))?;
        let mut b = Batch {
            size: jets.len(),
            capacity,
            features: Vec::with_capacity(jets.len() * capacity * FEATURES),
            valid: Vec::with_capacity(jets.len() * capacity),
            masked: vec![false; jets.len() * capacity],
        };
        for (ji, jet) in jets.iter().enumerate() {
            if jet.capacity() != capacity {
                return Err(NetworkError::Input(format!(
                    "jet {ji} has capacity {}, batch capacity is {capacity}",
                    jet.capacity()
                )));
            }
            for p in &jet.particles {
                b.features.extend_from_slice(&p.features());
                b.valid.push(p.valid);
            }
            if let Some(masks) = masks {
                let m = masks[ji];
                if m.len() != capacity {
                    return Err(NetworkError::Input(format!(
                        "jet {ji}: mask length {} != {capacity}",
                        m.len()
                    )));
                }
                for (slot, &mi) in m.iter().enumerate() {
                    if mi && !jet.particles[slot].valid {
                        return Err(NetworkError::MaskOnPadding { jet: ji, slot });
                    }
                    b.masked[ji * capacity + slot] = mi;
                }
            }
        }
        Ok(b)
    }

    pub fn tokens(&self) -> usize {
        self.capacity + 1
    }

    /// Token validity `[size, 1 + capacity]`; `[CLS]` is always valid.
    pub fn token_valid(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.size * self.tokens());
        for b in 0..self.size {
            out.push(true);
            out.extend_from_slice(&self.valid[b * self.capacity..(b + 1) * self.capacity]);
        }
        out
    }
}

/// Graph handles of every parameter.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }
}

/// Puts parameters on the tape, as trainable leaves or as constants.
pub fn bind<T: Float>(g: &mut Graph<T>, params: &ModelParams<T>, trainable: bool) -> Bound {
    let vars = params
        .tensors
        .iter()
        .map(|t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect();
    Bound { vars }
}

pub enum ForwardMode<'a> {
    Eval,
    /// Dropout active, drawing from the given generator.
    Train(&'a mut ChaCha8Rng),
}

pub struct EncoderOutput<T> {
    /// `[size, 1 + capacity, d_model]`
    pub out: Var,
    /// Last-block attention probabilities `[size, heads, tokens, tokens]`.
    pub attention: Option<Tensor<T>>,
}

fn linear<T: Float>(g: &mut Graph<T>, p: &Bound, l: Linear, x: Var) -> Result<Var, NetworkError> {
    let y = g.matmul(x, p.var(l.w))?;
    Ok(g.add(y, p.var(l.b))?)
}

fn norm<T: Float>(g: &mut Graph<T>, p: &Bound, n: Norm, x: Var) -> Result<Var, NetworkError> {
    Ok(g.layer_norm(x, p.var(n.g), p.var(n.b))?)
}

fn dropout<T: Float>(
    g: &mut Graph<T>,
    x: Var,
    rate: f64,
    mode: &mut ForwardMode,
) -> Result<Var, NetworkError> {
    match mode {
        ForwardMode::Train(rng) if rate > 0.0 => Ok(g.dropout(x, rate, *rng)?),
        _ => Ok(x),
    }
}

/// `[size, 1 + capacity, d_model]` token matrix.
pub fn tokenize_graph<T: Float>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &ModelParams<T>,
    batch: &Batch,
) -> Result<Var, NetworkError> {
    let d = params.config.d_model;
    let (b, n) = (batch.size, batch.capacity);
    let lay = &params.layout;
    let x = g.constant(Tensor::new(
        vec![b, n, FEATURES],
        batch.features.iter().map(|&v| T::of(v)).collect(),
    )?);
    let mut particles = linear(g, p, lay.embed, x)?;
    if batch.masked.iter().any(|&m| m) {
        let keep: Vec<T> = batch
            .masked
            .iter()
            .flat_map(|&m| std::iter::repeat_n(if m { T::zero() } else { T::one() }, d))
            .collect();
        let put: Vec<T> = keep.iter().map(|&k| T::one() - k).collect();
        let kept = g.mul_const(particles, keep)?;
        let idx: Vec<usize> = (0..b * n * d).map(|i| i % d).collect();
        let tile = g.gather(p.var(lay.mask), &idx)?;
        let tile = g.reshape(tile, &[b, n, d])?;
        let tile = g.mul_const(tile, put)?;
        particles = g.add(kept, tile)?;
    }
    let idx: Vec<usize> = (0..b * d).map(|i| i % d).collect();
    let cls = g.gather(p.var(lay.cls), &idx)?;
    let cls = g.reshape(cls, &[b, 1, d])?;
    Ok(g.concat(&[cls, particles], 1)?)
}

/// Encoder forward. Padded tokens are excluded as attention keys.
pub fn encode<T: Float>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &ModelParams<T>,
    batch: &Batch,
    mut mode: ForwardMode,
    capture_attention: bool,
) -> Result<EncoderOutput<T>, NetworkError> {
    let cfg = &params.config;
    let (b, t) = (batch.size, batch.tokens());
    let (h, hd) = (cfg.n_heads, cfg.head_dim());
    let inner = h * hd;
    let kv = batch.token_valid();
    let key_mask: Arc<[bool]> = (0..b * h * t * t)
        .map(|i| {
            let bi = i / (h * t * t);
            !kv[bi * t + i % t]
        })
        .collect();
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut x = tokenize_graph(g, p, params, batch)?;
    let mut attention = None;
    let n_blocks = params.layout.blocks.len();
    for (bi, blk) in params.layout.blocks.iter().enumerate() {
        let y = norm(g, p, blk.ln1, x)?;
        let heads = |g: &mut Graph<T>, l: Linear| -> Result<Var, NetworkError> {
            let z = linear(g, p, l, y)?;
            let z = g.reshape(z, &[b, t, h, hd])?;
            let z = g.permute(z, &[0, 2, 1, 3])?;
            Ok(g.reshape(z, &[b * h, t, hd])?)
        };
        let q = heads(g, blk.q)?;
        let q = g.scale(q, scale);
        let k = heads(g, blk.k)?;
        let v = heads(g, blk.v)?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.masked_fill(scores, key_mask.clone(), T::neg_infinity())?;
        let probs = g.softmax(scores, T::one())?;
        if capture_attention && bi + 1 == n_blocks {
            attention = Some(g.value(probs).clone().reshape(vec![b, h, t, t])?);
        }
        let z = g.matmul(probs, v)?;
        let z = g.reshape(z, &[b, h, t, hd])?;
        let z = g.permute(z, &[0, 2, 1, 3])?;
        let z = g.reshape(z, &[b, t, inner])?;
        let z = linear(g, p, blk.o, z)?;
        let z = dropout(g, z, cfg.dropout, &mut mode)?;
        x = g.add(x, z)?;

        let y = norm(g, p, blk.ln2, x)?;
        let z = linear(g, p, blk.ff1, y)?;
        let z = g.gelu(z);
        let z = dropout(g, z, cfg.dropout, &mut mode)?;
        let z = linear(g, p, blk.ff2, z)?;
        let z = dropout(g, z, cfg.dropout, &mut mode)?;
        x = g.add(x, z)?;
    }
    if let Some(n) = params.layout.final_ln {
        x = norm(g, p, n, x)?;
    }
    Ok(EncoderOutput { out: x, attention })
}

/// `[CLS]` rows `[size, d_model]` of an encoder output.
pub fn encoder_cls<T: Float>(g: &mut Graph<T>, out: Var) -> Result<Var, NetworkError> {
    let s = g.shape(out).to_vec();
    let cls = g.slice(out, 1, 0, 1)?;
    Ok(g.reshape(cls, &[s[0], s[2]])?)
}

/// Floor on the norms in the projection head's normalizations.
pub const PROJ_EPS: f64 = 1e-12;

/// Projection head applied to each row of `x: [rows, d_model]`.
///
/// GELU hidden layer, linear bottleneck, then the l2-normalized bottleneck
/// goes through a last layer whose weight columns are unit-normalized, so
/// logits are cosines plus a bias.
pub fn project_rows<T: Float>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &ModelParams<T>,
    x: Var,
) -> Result<Var, NetworkError> {
    let [l0, l1, l2] = params.layout.proj;
    let eps = T::of(PROJ_EPS);
    let z = linear(g, p, l0, x)?;
    let z = g.gelu(z);
    let z = linear(g, p, l1, z)?;
    let z = g.l2_normalize(z, eps)?;
    let wt = g.transpose(p.var(l2.w))?;
    let wt = g.l2_normalize(wt, eps)?;
    let w = g.transpose(wt)?;
    let y = g.matmul(z, w)?;
    Ok(g.add(y, p.var(l2.b))?)
}

/// Projects the selected `(jet, token)` rows of an encoder output.
pub fn project<T: Float>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &ModelParams<T>,
    out: Var,
    rows: &[(usize, usize)],
) -> Result<Var, NetworkError> {
    let s = g.shape(out).to_vec();
    let (t, d) = (s[1], s[2]);
    let idx: Vec<usize> = rows
        .iter()
        .flat_map(|&(b, tok)| ((b * t + tok) * d)..((b * t + tok + 1) * d))
        .collect();
    let x = g.gather(out, &idx)?;
    let x = g.reshape(x, &[rows.len(), d])?;
    project_rows(g, p, params, x)
}

/// Classifier logits from `[CLS]` embeddings `[size, d_model]`.
pub fn classify<T: Float>(
    g: &mut Graph<T>,
    p: &Bound,
    params: &ModelParams<T>,
    cls: Var,
) -> Result<Var, NetworkError> {
    let [l0, l1, l2] = params
        .layout
        .classifier
        .ok_or_else(|| NetworkError::Config("model has no classifier head".into()))?;
    let z = linear(g, p, l0, cls)?;
    let z = g.gelu(z);
    let z = linear(g, p, l1, z)?;
    let z = g.gelu(z);
    linear(g, p, l2, z)
}

/// Token matrix `(1 + capacity) x d_model` of one jet and token validity.
pub fn tokenize<T: Float>(
    jet: &Jet,
    mask: &[bool],
    params: &ModelParams<T>,
) -> Result<(Tensor<T>, Vec<bool>), NetworkError> {
    let batch = Batch::masked(&[jet], &[mask])?;
    let mut g = Graph::new();
    let p = bind(&mut g, params, false);
    let tok = tokenize_graph(&mut g, &p, params, &batch)?;
    let t = g
        .value(tok)
        .clone()
        .reshape(vec![batch.tokens(), params.config.d_model])?;
    Ok((t, batch.token_valid()))
}

/// Last-block attention of the `[CLS]` query over particle keys,
/// `heads x capacity`, renormalized to exclude the `[CLS]` self-weight.
pub fn extract_cls_attention<T: Float>(
    jet: &Jet,
    params: &ModelParams<T>,
) -> Result<Tensor<T>, NetworkError> {
    let batch = Batch::unmasked(&[jet])?;
    let mut g = Graph::new();
    let p = bind(&mut g, params, false);
    let enc = encode(&mut g, &p, params, &batch, ForwardMode::Eval, true)?;
    let att = enc.attention.expect("attention captured");
    let (h, t) = (params.config.n_heads, batch.tokens());
    let n = batch.capacity;
    let mut out = vec![T::zero(); h * n];
    for hi in 0..h {
        let row = &att.data()[hi * t * t..hi * t * t + t];
        let mass: T = row[1..].iter().copied().sum();
        if mass > T::zero() {
            for j in 0..n {
                out[hi * n + j] = row[1 + j] / mass;
            }
        }
    }
    Ok(Tensor::new(vec![h, n], out)?)
}
