//! AdamW with decoupled weight decay and per-parameter LR multipliers.

use serde::{Deserialize, Serialize};

use crate::network::{ModelParams, ParamKind};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T: Float> {
    pub cfg: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    /// Weight decay applies to weight matrices only, never to biases,
    /// layer norms or the `[CLS]`/`[MASK]` tokens.
    pub decay: Vec<bool>,
    pub lr_scale: Vec<f64>,
}

impl<T: Float> AdamW<T> {
    pub fn new(params: &ModelParams<T>, cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            m: params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
            v: params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
            t: 0,
            decay: params
                .info
                .iter()
                .map(|p| p.kind == ParamKind::Weight)
                .collect(),
            lr_scale: vec![1.0; params.tensors.len()],
        }
    }

    /// Layer-wise decay: parameter at depth `k` gets `decay^k` of the base LR.
    pub fn with_layer_decay(mut self, params: &ModelParams<T>, decay: f64) -> Self {
        self.lr_scale = params
            .info
            .iter()
            .map(|p| decay.powi(p.depth as i32))
            .collect();
        self
    }

    /// One update. Parameters whose gradient is `None` took no part in the
    /// loss and are left untouched, moments included.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &[Option<&Tensor<T>>], lr: f64) {
        assert_eq!(
            grads.len(),
            params.tensors.len(),
            "one gradient slot per parameter"
        );
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        for (i, p) in params.tensors.iter_mut().enumerate() {
            let Some(g) = grads[i].map(|g| g.data()) else {
                continue;
            };
            let lr_i = lr * self.lr_scale[i];
            if self.decay[i] && c.weight_decay > 0.0 {
                let shrink = T::of(1.0 - lr_i * c.weight_decay);
                for x in p.data_mut() {
                    *x *= shrink;
                }
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let step = T::of(lr_i / bc1);
            let inv_bc2 = T::of(1.0 / bc2);
            let eps = T::of(c.eps);
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                let gk = g[k];
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                *x -= step * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{NetworkConfig, Preset};

    fn params() -> ModelParams<f64> {
        ModelParams::init(&NetworkConfig::with_dims(4, 1, 2), None, 0).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = params();
        let before = p.clone();
        let grads: Vec<Tensor<f64>> = p.tensors.iter().map(|t| t.map(|_| -3.0)).collect();
        let refs: Vec<Option<&Tensor<f64>>> = grads.iter().map(Some).collect();
        let mut opt = AdamW::new(
            &p,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        opt.step(&mut p, &refs, 1e-2);
        for (a, b) in p.tensors.iter().zip(&before.tensors) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y - 1e-2).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn decay_skips_bias_norm_and_tokens() {
        let mut p = params();
        for t in &mut p.tensors {
            t.data_mut().fill(1.0);
        }
        let mut opt = AdamW::new(
            &p,
            AdamWConfig {
                weight_decay: 0.5,
                ..Default::default()
            },
        );
        let zeros: Vec<Tensor<f64>> = p.tensors.iter().map(|t| t.map(|_| 0.0)).collect();
        let refs: Vec<Option<&Tensor<f64>>> = zeros.iter().map(Some).collect();
        opt.step(&mut p, &refs, 0.1);
        for (info, t) in p.info.iter().zip(&p.tensors) {
            let expect = if info.kind == ParamKind::Weight {
                0.95
            } else {
                1.0
            };
            assert!(
                t.data().iter().all(|&x| (x - expect).abs() < 1e-12),
                "{}",
                info.name
            );
        }
    }

    #[test]
    fn parameters_without_gradient_are_untouched() {
        let mut p = params();
        let before = p.clone();
        let mut opt = AdamW::new(&p, AdamWConfig::default());
        let none: Vec<Option<&Tensor<f64>>> = vec![None; p.tensors.len()];
        opt.step(&mut p, &none, 0.1);
        assert_eq!(p, before);
    }

    #[test]
    fn layer_decay_scales() {
        let p =
            ModelParams::<f64>::init(&NetworkConfig::preset(Preset::Small), Some(2), 0).unwrap();
        let opt = AdamW::new(&p, AdamWConfig::default()).with_layer_decay(&p, 0.5);
        let scale = |name: &str| opt.lr_scale[p.info.iter().position(|i| i.name == name).unwrap()];
        assert_eq!(scale("head.0.weight"), 1.0);
        assert_eq!(scale("final_ln.gamma"), 0.5);
        assert_eq!(scale("blocks.1.ff.0.weight"), 0.5);
        assert_eq!(scale("blocks.0.ff.0.weight"), 0.25);
        assert_eq!(scale("embed.weight"), 0.125);
        assert_eq!(scale("cls_token"), 0.125);
    }
}
