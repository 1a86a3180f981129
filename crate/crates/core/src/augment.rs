//! View augmentations (rotation, p_T-dependent smearing, collinear splitting)
//! and momentum-aware particle masking.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::jetdata::Jet;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("particle {particle}: valid particle with pt_rel {pt} cannot be smeared")]
    ZeroPt { particle: usize, pt: f64 },
    #[error("invalid augmentation config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// QCD scale in GeV.
    pub lambda_qcd: f64,
    /// Jet p_T in GeV used to turn `pt_rel` into an absolute momentum.
    pub jet_pt_nominal: f64,
    pub split_fraction_range: (f64, f64),
    pub max_splits: usize,
    /// Upper end of the per-view masking ratio, drawn uniformly from `[0, max]`.
    pub mask_ratio_max: f64,
    pub rotate: bool,
    pub smear: bool,
    pub split: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            lambda_qcd: 0.1,
            jet_pt_nominal: 1000.0,
            split_fraction_range: (0.25, 0.75),
            max_splits: 5,
            mask_ratio_max: 0.5,
            rotate: true,
            smear: true,
            split: true,
        }
    }
}

impl AugmentConfig {
    /// All augmentations switched off.
    pub fn identity() -> Self {
        Self {
            rotate: false,
            smear: false,
            split: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let (lo, hi) = self.split_fraction_range;
        if !(self.lambda_qcd > 0.0 && self.jet_pt_nominal > 0.0) {
            return Err(AugmentError::Config(
                "lambda_qcd and jet_pt_nominal must be positive".into(),
            ));
        }
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(AugmentError::Config(format!(
                "split_fraction_range {lo}..{hi} must lie inside (0, 1)"
            )));
        }
        if !(0.0..=0.5).contains(&self.mask_ratio_max) {
            return Err(AugmentError::Config(format!(
                "mask_ratio_max {} outside [0, 0.5]",
                self.mask_ratio_max
            )));
        }
        Ok(())
    }
}

/// Two augmented views of one jet with their particle masks.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view_u: Jet,
    pub view_v: Jet,
    pub mask_u: Vec<bool>,
    pub mask_v: Vec<bool>,
    pub target_ratio_u: f64,
    pub target_ratio_v: f64,
}

/// Rigid rotation of every valid particle about the jet axis.
pub fn rotate(j: &Jet, angle: f64) -> Jet {
    let (s, c) = angle.sin_cos();
    let mut out = j.clone();
    for p in out.particles.iter_mut().filter(|p| p.valid) {
        let (eta, phi) = (p.eta, p.phi);
        p.eta = c * eta - s * phi;
        p.phi = s * eta + c * phi;
    }
    out
}

/// Independent Gaussian shifts of `eta` and `phi` with variance
/// `lambda_qcd / (pt_rel * jet_pt_nominal)`.
pub fn smear(j: &Jet, rng: &mut ChaCha8Rng, cfg: &AugmentConfig) -> Result<Jet, AugmentError> {
    let mut out = j.clone();
    for (i, p) in out
        .particles
        .iter_mut()
        .enumerate()
        .filter(|(_, p)| p.valid)
    {
        if p.pt <= 0.0 {
            return Err(AugmentError::ZeroPt {
                particle: i,
                pt: p.pt,
            });
        }
        let std = (cfg.lambda_qcd / (p.pt * cfg.jet_pt_nominal)).sqrt();
        let de: f64 = StandardNormal.sample(rng);
        let dp: f64 = StandardNormal.sample(rng);
        p.eta += std * de;
        p.phi += std * dp;
    }
    Ok(out)
}

/// Splits `particles[index]` in place: it keeps fraction `f` of its p_T and a
/// collinear daughter with `1 - f` goes to the first free slot.
pub fn split_particle(j: &mut Jet, index: usize, f: f64) {
    let n = j.valid_count();
    assert!(
        index < n && n < j.capacity(),
        "split needs a valid particle and a free slot"
    );
    let parent = j.particles[index];
    let a = parent.pt * f;
    j.particles[index].pt = a;
    j.particles[n] = parent;
    j.particles[n].pt = parent.pt - a;
}

/// Up to `max_splits` p_T-weighted collinear splits, only for jets with
/// free slots.
pub fn collinear_split(j: &Jet, rng: &mut ChaCha8Rng, cfg: &AugmentConfig) -> Jet {
    let mut out = j.clone();
    let n = out.valid_count();
    let free = out.capacity() - n;
    if free == 0 || n == 0 {
        return out;
    }
    let s = rng.random_range(0..=cfg.max_splits.min(free));
    let (lo, hi) = cfg.split_fraction_range;
    for _ in 0..s {
        let n = out.valid_count();
        let total: f64 = out.particles[..n].iter().map(|p| p.pt).sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, p) in out.particles[..n].iter().enumerate() {
            if u < p.pt {
                pick = i;
                break;
            }
            u -= p.pt;
        }
        let f = if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        };
        split_particle(&mut out, pick, f);
    }
    out.canonicalize();
    out
}

/// rotate → smear → split, each enabled by its config flag.
pub fn make_view(j: &Jet, rng: &mut ChaCha8Rng, cfg: &AugmentConfig) -> Result<Jet, AugmentError> {
    let mut v = j.clone();
    if cfg.rotate {
        let angle = rng.random_range(-PI..=PI);
        v = rotate(&v, angle);
    }
    if cfg.smear {
        v = smear(&v, rng, cfg)?;
    }
    if cfg.split {
        v = collinear_split(&v, rng, cfg);
    }
    Ok(v)
}

/// Mask for a given visiting order of valid particles: accumulate p_T until
/// the target is crossed, then keep whichever of the two bracketing prefixes
/// lands closer (ties to the shorter, never the empty one).
pub fn mask_from_order(j: &Jet, order: &[usize], target_ratio: f64) -> Vec<bool> {
    let mut mask = vec![false; j.capacity()];
    if target_ratio <= 0.0 || order.is_empty() {
        return mask;
    }
    let target = target_ratio * j.total_pt();
    let mut cum = 0.0;
    let mut take = order.len();
    for (k, &i) in order.iter().enumerate() {
        let before = cum;
        cum += j.particles[i].pt;
        if cum >= target {
            take = if k > 0 && (target - before) <= (cum - target) {
                k
            } else {
                k + 1
            };
            break;
        }
    }
    for &i in &order[..take] {
        mask[i] = true;
    }
    mask
}

/// Shuffled-order momentum-aware mask.
pub fn momentum_aware_mask(j: &Jet, target_ratio: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut order: Vec<usize> = (0..j.valid_count()).collect();
    order.shuffle(rng);
    mask_from_order(j, &order, target_ratio)
}

/// Fraction of the jet's valid p_T that a mask covers.
pub fn masked_fraction(j: &Jet, mask: &[bool]) -> f64 {
    let m: f64 = j
        .particles
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(p, _)| p.pt)
        .sum();
    m / j.total_pt()
}

/// Both views and masks for jet `index` at `epoch`; every draw comes from a
/// stream keyed by `(epoch, index, view)`.
pub fn make_view_pair(
    j: &Jet,
    cfg: &AugmentConfig,
    seed: u64,
    epoch: u64,
    index: u64,
) -> Result<ViewPair, AugmentError> {
    let mut views = Vec::with_capacity(2);
    for view in 0..2u64 {
        let mut arng = stream_rng(seed, Stream::Augment, &[epoch, index, view]);
        let v = make_view(j, &mut arng, cfg)?;
        let mut mrng = stream_rng(seed, Stream::Masking, &[epoch, index, view]);
        let ratio = if cfg.mask_ratio_max > 0.0 {
            mrng.random_range(0.0..=cfg.mask_ratio_max)
        } else {
            0.0
        };
        let mask = momentum_aware_mask(&v, ratio, &mut mrng);
        views.push((v, mask, ratio));
    }
    let (view_v, mask_v, target_ratio_v) = views.pop().expect("two views");
    let (view_u, mask_u, target_ratio_u) = views.pop().expect("two views");
    Ok(ViewPair {
        view_u,
        view_v,
        mask_u,
        mask_v,
        target_ratio_u,
        target_ratio_v,
    })
}
