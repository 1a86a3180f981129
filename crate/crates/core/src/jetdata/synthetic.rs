// Toy multi-prong jets. Each jet is a few hard "prongs" (narrow Gaussian
// sprays around a prong center) plus a soft, wide-angle component.
//
// Multi-prong centers sit on a regular k-gon with a random orientation and
// independent radii drawn from an annulus whose inner radius keeps
// neighbouring centers at least `spread` apart.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::{DataError, Jet, JetDataset, Particle, DEFAULT_CAPACITY};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticClass {
    pub name: String,
    /// Number of hard prongs, 1..=6.
    pub prongs: usize,
    /// Angular scale: minimum separation of prong centers (multi-prong) or
    /// diameter of the disc holding the single prong center.
    pub spread: f64,
    /// Standard deviation of particle directions around a prong center.
    pub width: f64,
    /// Mean number of hard particles per prong.
    pub hard_per_prong: f64,
    /// Mean soft-particle multiplicity.
    pub soft_multiplicity: f64,
    /// Upper bound on the soft component's share of jet p_T.
    #[serde(default = "default_soft_share")]
    pub soft_share: f64,
    /// Radius of the disc soft particles are scattered over.
    #[serde(default = "default_soft_radius")]
    pub soft_radius: f64,
}

fn default_soft_share() -> f64 {
    0.2
}

fn default_soft_radius() -> f64 {
    0.8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: Vec<SyntheticClass>,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
}

fn default_capacity() -> usize {
    DEFAULT_CAPACITY
}

impl SyntheticClass {
    fn new(name: &str, prongs: usize, spread: f64, width: f64, hard: f64, soft: f64) -> Self {
        Self {
            name: name.into(),
            prongs,
            spread,
            width,
            hard_per_prong: hard,
            soft_multiplicity: soft,
            soft_share: default_soft_share(),
            soft_radius: default_soft_radius(),
        }
    }

    /// Narrow one-prong jet.
    pub fn quark() -> Self {
        Self::new("q", 1, 0.1, 0.03, 12.0, 6.0)
    }

    /// Wider one-prong jet with more radiation.
    pub fn gluon() -> Self {
        Self::new("g", 1, 0.2, 0.07, 10.0, 10.0)
    }

    /// Two-prong jet.
    pub fn w_boson() -> Self {
        Self::new("w", 2, 0.4, 0.04, 6.0, 6.0)
    }

    /// Three-prong jet.
    pub fn top() -> Self {
        Self::new("t", 3, 0.5, 0.04, 4.0, 6.0)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| {
            Err(DataError::InvalidArgument(format!(
                "synthetic class {:?}: {m}",
                self.name
            )))
        };
        if !(1..=6).contains(&self.prongs) {
            return bad(format!("prongs must be in 1..=6, got {}", self.prongs));
        }
        if !(self.spread > 0.0 && self.width > 0.0 && self.width < self.spread / 2.0) {
            return bad(format!(
                "need 0 < width < spread/2, got width {} spread {}",
                self.width, self.spread
            ));
        }
        if !(self.hard_per_prong >= 1.0 && self.soft_multiplicity >= 0.0) {
            return bad("hard_per_prong must be >= 1 and soft_multiplicity >= 0".into());
        }
        if !(self.soft_share > 0.0 && self.soft_share < 0.5 && self.soft_radius > 0.0) {
            return bad("soft_share must be in (0, 0.5) and soft_radius > 0".into());
        }
        Ok(())
    }
}

impl SyntheticSpec {
    /// Four classes: q, g (one-prong), w (two-prong), t (three-prong).
    pub fn four_class() -> Self {
        Self {
            classes: vec![
                SyntheticClass::quark(),
                SyntheticClass::gluon(),
                SyntheticClass::w_boson(),
                SyntheticClass::top(),
            ],
            capacity: DEFAULT_CAPACITY,
        }
    }

    /// q, w, t: one class per prong count.
    pub fn three_class() -> Self {
        Self {
            classes: vec![
                SyntheticClass::quark(),
                SyntheticClass::w_boson(),
                SyntheticClass::top(),
            ],
            capacity: DEFAULT_CAPACITY,
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes.is_empty() {
            return Err(DataError::InvalidArgument(
                "synthetic spec has no classes".into(),
            ));
        }
        if self.capacity == 0 {
            return Err(DataError::InvalidArgument(
                "capacity must be positive".into(),
            ));
        }
        self.classes.iter().try_for_each(SyntheticClass::validate)
    }
}

/// `count` jets of every class in `spec`, interleaved by class.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    count: usize,
    seed: u64,
) -> Result<JetDataset, DataError> {
    spec.validate()?;
    if count == 0 {
        return Err(DataError::InvalidArgument("count must be positive".into()));
    }
    let mut jets = Vec::with_capacity(count * spec.classes.len());
    for i in 0..count {
        for (c, class) in spec.classes.iter().enumerate() {
            jets.push(generate_jet(class, c, spec.capacity, seed, i));
        }
    }
    JetDataset::new(jets, spec.class_names(), spec.capacity)
}

/// `count` jets of a single class; the dataset keeps the full class list.
pub fn generate_class(
    spec: &SyntheticSpec,
    class: usize,
    count: usize,
    seed: u64,
) -> Result<JetDataset, DataError> {
    spec.validate()?;
    if count == 0 {
        return Err(DataError::InvalidArgument("count must be positive".into()));
    }
    let def = spec
        .classes
        .get(class)
        .ok_or_else(|| DataError::InvalidArgument(format!("unknown class id {class}")))?;
    let jets = (0..count)
        .map(|i| generate_jet(def, class, spec.capacity, seed, i))
        .collect();
    JetDataset::new(jets, spec.class_names(), spec.capacity)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn exp1(rng: &mut ChaCha8Rng) -> f64 {
    Exp1.sample(rng)
}

/// Flat Dirichlet(1, ..., 1) draw.
fn dirichlet(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let g: Vec<f64> = (0..n).map(|_| exp1(rng) + 1e-12).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

fn uniform_disc(rng: &mut ChaCha8Rng, radius: f64) -> (f64, f64) {
    let r = radius * rng.random::<f64>().sqrt();
    let a = rng.random_range(-PI..PI);
    (r * a.cos(), r * a.sin())
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean)
        .map(|p| p.sample(rng) as usize)
        .unwrap_or(0)
}

fn prong_centers(rng: &mut ChaCha8Rng, c: &SyntheticClass) -> Vec<(f64, f64)> {
    if c.prongs == 1 {
        return vec![uniform_disc(rng, c.spread / 2.0)];
    }
    let k = c.prongs as f64;
    let r_min = 1.1 * c.spread / (2.0 * (PI / k).sin());
    let r_max = c.spread.max(1.25 * r_min);
    let theta0 = rng.random_range(-PI..PI);
    (0..c.prongs)
        .map(|i| {
            let u: f64 = rng.random();
            let r = (r_min * r_min + u * (r_max * r_max - r_min * r_min)).sqrt();
            let a = theta0 + 2.0 * PI * i as f64 / k;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

fn generate_jet(c: &SyntheticClass, label: usize, capacity: usize, seed: u64, index: usize) -> Jet {
    let mut rng = stream_rng(seed, Stream::Synthetic, &[label as u64, index as u64]);
    let centers = prong_centers(&mut rng, c);
    let n_soft = poisson(&mut rng, c.soft_multiplicity);
    let soft_share = if n_soft > 0 {
        rng.random_range(0.25 * c.soft_share..c.soft_share)
    } else {
        0.0
    };
    let hard_share = 1.0 - soft_share;

    // Each prong gets at least half of an equal share; the rest is Dirichlet.
    let k = c.prongs;
    let extra = dirichlet(&mut rng, k);
    let fractions: Vec<f64> = extra
        .iter()
        .map(|e| hard_share * (0.5 / k as f64 + 0.5 * e))
        .collect();

    let mut particles = Vec::new();
    for (&(ce, cp), &frac) in centers.iter().zip(&fractions) {
        let lo = (c.hard_per_prong * 0.5).ceil().max(1.0) as usize;
        let hi = (c.hard_per_prong * 1.5).floor().max(lo as f64) as usize;
        let n = rng.random_range(lo..=hi);
        let mut shares = dirichlet(&mut rng, n);
        shares.sort_by(|a, b| b.total_cmp(a));
        shares[0] += 0.5;
        for (j, s) in shares.iter().enumerate() {
            let pt = frac * s / 1.5;
            let (de, dp) = if j == 0 {
                let (x, y) = (normal(&mut rng) * c.width, normal(&mut rng) * c.width);
                let r = x.hypot(y);
                let cap = c.width / 2.0;
                if r > cap {
                    (x * cap / r, y * cap / r)
                } else {
                    (x, y)
                }
            } else {
                (normal(&mut rng) * c.width, normal(&mut rng) * c.width)
            };
            particles.push(Particle::new(ce + de, cp + dp, pt));
        }
    }
    if n_soft > 0 {
        let w: Vec<f64> = (0..n_soft).map(|_| exp1(&mut rng)).collect();
        let total: f64 = w.iter().sum();
        for wi in w {
            let (e, p) = uniform_disc(&mut rng, c.soft_radius);
            particles.push(Particle::new(e, p, soft_share * wi / total));
        }
    }

    particles.retain(|p| p.pt > 0.0);
    particles.sort_by(|a, b| b.pt.total_cmp(&a.pt));
    particles.truncate(capacity);
    let kept: f64 = particles.iter().map(|p| p.pt).sum();
    let target = rng.random_range(0.85..0.995);
    for p in &mut particles {
        p.pt *= target / kept;
    }
    Jet::from_valid(particles, capacity, label).expect("generator respects capacity")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Greedy ΔR grouping: particles in descending pt join the first cluster
    /// whose seed lies within `radius`, otherwise seed a new one. Returns
    /// `(seed position, cluster pt)` pairs.
    fn greedy_clusters(jet: &Jet, radius: f64) -> Vec<((f64, f64), f64)> {
        let mut ps: Vec<&Particle> = jet.valid().collect();
        ps.sort_by(|a, b| b.pt.total_cmp(&a.pt));
        let mut clusters: Vec<((f64, f64), f64)> = Vec::new();
        for p in ps {
            match clusters
                .iter_mut()
                .find(|((e, f), _)| (p.eta - e).hypot(p.phi - f) < radius)
            {
                Some(c) => c.1 += p.pt,
                None => clusters.push(((p.eta, p.phi), p.pt)),
            }
        }
        clusters
    }

    #[test]
    fn two_prong_jets_have_two_displaced_clusters() {
        let spec = SyntheticSpec {
            classes: vec![SyntheticClass::w_boson()],
            capacity: 30,
        };
        assert_eq!(spec.classes[0].spread, 0.4);
        let d = generate_synthetic(&spec, 500, 1).unwrap();
        for jet in &d.jets {
            let n = greedy_clusters(jet, 0.1)
                .iter()
                .filter(|((e, p), pt)| *pt >= 0.1 && e.hypot(*p) >= 0.2)
                .count();
            assert!(n >= 2, "found {n} clusters in {jet:?}");
        }
    }

    #[test]
    fn one_prong_leading_particle_near_axis() {
        let spec = SyntheticSpec {
            classes: vec![SyntheticClass::quark(), SyntheticClass::gluon()],
            capacity: 30,
        };
        let d = generate_synthetic(&spec, 300, 2).unwrap();
        for jet in &d.jets {
            let lead = jet.particles[0];
            assert!(jet.valid().all(|p| p.pt <= lead.pt));
            assert!(lead.delta_r() < spec.classes[jet.label].spread);
        }
    }

    #[test]
    fn totals_and_invariants() {
        let d = generate_synthetic(&SyntheticSpec::four_class(), 200, 3).unwrap();
        assert_eq!(d.class_counts(), vec![200; 4]);
        for (i, jet) in d.jets.iter().enumerate() {
            jet.validate(i).unwrap();
            let s = jet.total_pt();
            assert!(s > 0.8 && s <= 1.0, "sum {s}");
        }
    }

    #[test]
    fn multi_prong_centers_are_separated() {
        for class in [
            SyntheticClass::w_boson(),
            SyntheticClass::top(),
            SyntheticClass::new("h", 6, 0.3, 0.02, 2.0, 0.0),
        ] {
            for i in 0..200 {
                let mut rng = stream_rng(5, Stream::Synthetic, &[i]);
                let centers = prong_centers(&mut rng, &class);
                for a in 0..centers.len() {
                    for b in a + 1..centers.len() {
                        let d = (centers[a].0 - centers[b].0).hypot(centers[a].1 - centers[b].1);
                        assert!(d >= class.spread, "{} centers {d}", class.name);
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec::three_class();
        let a = generate_synthetic(&spec, 20, 42).unwrap();
        let b = generate_synthetic(&spec, 20, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(&spec, 20, 43).unwrap());
    }

    #[test]
    fn argument_errors() {
        let spec = SyntheticSpec::three_class();
        assert!(generate_synthetic(&spec, 0, 1).is_err());
        assert!(generate_class(&spec, 3, 5, 1).is_err());
        let mut bad = spec.clone();
        bad.classes[0].width = bad.classes[0].spread;
        assert!(generate_synthetic(&bad, 5, 1).is_err());
    }

    #[test]
    fn three_class_differs_in_prongs_not_multiplicity() {
        let spec = SyntheticSpec::three_class();
        let d = generate_synthetic(&spec, 400, 10).unwrap();
        let mut mult = [0.0; 3];
        let mut correct = 0;
        for jet in &d.jets {
            mult[jet.label] += jet.valid().count() as f64 / 400.0;
            let prongs = greedy_clusters(jet, 0.15)
                .iter()
                .filter(|c| c.1 > 0.1)
                .count();
            correct += (prongs.clamp(1, 3) - 1 == jet.label) as usize;
        }
        let lo = mult.iter().cloned().fold(f64::MAX, f64::min);
        let hi = mult.iter().cloned().fold(0.0, f64::max);
        assert!(hi / lo < 1.1, "mean multiplicities {mult:?}");
        let acc = correct as f64 / d.len() as f64;
        assert!(acc > 0.8, "prong-count accuracy {acc}");
    }
}
