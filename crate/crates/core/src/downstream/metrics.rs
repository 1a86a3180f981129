// Accuracy, one-vs-rest ROC/AUC and signal efficiency at fixed background
// efficiency.

use serde::{Deserialize, Serialize};

use super::{DownstreamError, Matrix};

/// Background efficiencies at which signal efficiency is reported.
pub const EPS_B_TARGETS: [f64; 2] = [1e-1, 1e-2];

/// ROC points ordered by decreasing threshold, from `(0, 0)` to `(1, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `thresholds[0]` is `+inf`; point `i` accepts scores `>= thresholds[i]`.
    pub thresholds: Vec<f64>,
    pub eps_s: Vec<f64>,
    pub eps_b: Vec<f64>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,eps_s,eps_b\n");
        for i in 0..self.thresholds.len() {
            s.push_str(&format!(
                "{},{},{}\n",
                self.thresholds[i], self.eps_s[i], self.eps_b[i]
            ));
        }
        s
    }
}

fn check(scores: &[f64], signal: &[bool]) -> Result<(usize, usize), DownstreamError> {
    if scores.len() != signal.len() {
        return Err(DownstreamError::Input(format!(
            "{} scores but {} labels",
            scores.len(),
            signal.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DownstreamError::Input("NaN score".into()));
    }
    let ns = signal.iter().filter(|&&s| s).count();
    Ok((ns, signal.len() - ns))
}

/// Exact Mann–Whitney AUC with average ranks for ties. `None` when either
/// class is absent.
pub fn auc_mann_whitney(scores: &[f64], signal: &[bool]) -> Result<Option<f64>, DownstreamError> {
    let (ns, nb) = check(scores, signal)?;
    if ns == 0 || nb == 0 {
        return Ok(None);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| signal[k]).count() as f64;
        i = j + 1;
    }
    let (ns, nb) = (ns as f64, nb as f64);
    Ok(Some((rank_sum - ns * (ns + 1.0) / 2.0) / (ns * nb)))
}

/// ROC with one point per distinct score. Errors when either class is absent.
pub fn roc_curve(scores: &[f64], signal: &[bool]) -> Result<RocCurve, DownstreamError> {
    let (ns, nb) = check(scores, signal)?;
    let auc = auc_mann_whitney(scores, signal)?
        .ok_or_else(|| DownstreamError::Input("ROC needs both signal and background".into()))?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut roc = RocCurve {
        thresholds: vec![f64::INFINITY],
        eps_s: vec![0.0],
        eps_b: vec![0.0],
        auc,
    };
    let (mut s, mut b) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if signal[idx[i]] {
                s += 1;
            } else {
                b += 1;
            }
            i += 1;
        }
        roc.thresholds.push(t);
        roc.eps_s.push(s as f64 / ns as f64);
        roc.eps_b.push(b as f64 / nb as f64);
    }
    Ok(roc)
}

/// Signal efficiency at background efficiency `target`, linearly
/// interpolated between the last ROC point with `eps_b <= target` and the
/// next one.
pub fn eps_s_at(roc: &RocCurve, target: f64) -> f64 {
    let i = roc.eps_b.iter().rposition(|&b| b <= target).unwrap_or(0);
    if i + 1 >= roc.eps_b.len() {
        return roc.eps_s[i];
    }
    let (b0, b1) = (roc.eps_b[i], roc.eps_b[i + 1]);
    let (s0, s1) = (roc.eps_s[i], roc.eps_s[i + 1]);
    s0 + (s1 - s0) * (target - b0) / (b1 - b0)
}

/// ROC of class `c` against the rest using score column `c`.
pub fn one_vs_rest_roc(
    scores: &Matrix,
    labels: &[usize],
    c: usize,
) -> Result<RocCurve, DownstreamError> {
    let col: Vec<f64> = (0..scores.rows).map(|i| scores.row(i)[c]).collect();
    let signal: Vec<bool> = labels.iter().map(|&l| l == c).collect();
    roc_curve(&col, &signal)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Per-class entries are `None` when the class does not occur in `labels`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub auc: Vec<Option<f64>>,
    pub eps_s_at_1e1: Vec<Option<f64>>,
    pub eps_s_at_1e2: Vec<Option<f64>>,
}

/// Accuracy of the row argmax plus one-vs-rest AUC and `eps_s` per class.
pub fn classification_metrics(
    scores: &Matrix,
    labels: &[usize],
) -> Result<ClassificationMetrics, DownstreamError> {
    if scores.rows != labels.len() {
        return Err(DownstreamError::Input(format!(
            "{} score rows but {} labels",
            scores.rows,
            labels.len()
        )));
    }
    let mut m = ClassificationMetrics {
        accuracy: accuracy(&scores.argmax_rows(), labels),
        auc: Vec::new(),
        eps_s_at_1e1: Vec::new(),
        eps_s_at_1e2: Vec::new(),
    };
    for c in 0..scores.cols {
        let present = labels.contains(&c) && labels.iter().any(|&l| l != c);
        if present {
            let roc = one_vs_rest_roc(scores, labels, c)?;
            m.auc.push(Some(roc.auc));
            m.eps_s_at_1e1.push(Some(eps_s_at(&roc, EPS_B_TARGETS[0])));
            m.eps_s_at_1e2.push(Some(eps_s_at(&roc, EPS_B_TARGETS[1])));
        } else {
            m.auc.push(None);
            m.eps_s_at_1e1.push(None);
            m.eps_s_at_1e2.push(None);
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair_count(scores: &[f64], signal: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in signal.iter().enumerate() {
            for (j, &sj) in signal.iter().enumerate() {
                if si && !sj {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn hand_built_rankings() {
        let sig = [true, true, false, false];
        assert_eq!(
            auc_mann_whitney(&[0.9, 0.8, 0.7, 0.1], &sig).unwrap(),
            Some(1.0)
        );
        assert_eq!(
            auc_mann_whitney(&[0.9, 0.7, 0.8, 0.1], &sig).unwrap(),
            Some(0.75)
        );
    }

    #[test]
    fn perfect_ranker() {
        let scores = [0.9, 0.8, 0.3, 0.2, 0.1];
        let sig = [true, true, false, false, false];
        let roc = roc_curve(&scores, &sig).unwrap();
        assert_eq!(roc.auc, 1.0);
        for t in EPS_B_TARGETS {
            assert_eq!(eps_s_at(&roc, t), 1.0);
        }
    }

    #[test]
    fn random_scores_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let sig: Vec<bool> = (0..10_000).map(|i| i % 2 == 0).collect();
        let auc = auc_mann_whitney(&scores, &sig).unwrap().unwrap();
        assert!((auc - 0.5).abs() < 0.02, "{auc}");
    }

    #[test]
    fn absent_class_is_undefined() {
        let scores = Matrix::new(3, 3, vec![0.7, 0.2, 0.1, 0.1, 0.8, 0.1, 0.6, 0.3, 0.1]).unwrap();
        let m = classification_metrics(&scores, &[0, 1, 0]).unwrap();
        assert_eq!(m.auc[2], None);
        assert_eq!(m.auc[0], Some(1.0));
        assert!((m.accuracy - 1.0).abs() < 1e-15);
    }

    #[test]
    fn roc_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<f64> = (0..200)
            .map(|_| (rng.random::<f64>() * 10.0).floor())
            .collect();
        let sig: Vec<bool> = (0..200).map(|_| rng.random()).collect();
        let roc = roc_curve(&scores, &sig).unwrap();
        for w in roc.eps_s.windows(2).chain(roc.eps_b.windows(2)) {
            assert!(w[0] <= w[1]);
        }
        assert_eq!(
            (*roc.eps_s.last().unwrap(), *roc.eps_b.last().unwrap()),
            (1.0, 1.0)
        );
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(
            raw in prop::collection::vec((0u8..20, any::<bool>()), 2..200)
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
            let sig: Vec<bool> = raw.iter().map(|r| r.1).collect();
            let got = auc_mann_whitney(&scores, &sig).unwrap();
            if sig.iter().all(|&s| s) || sig.iter().all(|&s| !s) {
                prop_assert!(got.is_none());
            } else {
                prop_assert!((got.unwrap() - pair_count(&scores, &sig)).abs() < 1e-12);
            }
        }

        #[test]
        fn auc_invariant_under_monotone_maps(
            raw in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..100)
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let sig: Vec<bool> = raw.iter().map(|r| r.1).collect();
            let mapped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 3.0).collect();
            prop_assert_eq!(auc_mann_whitney(&scores, &sig).unwrap(), auc_mann_whitney(&mapped, &sig).unwrap());
        }
    }
}
