use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

#[test]
fn knn_closed_forms() {
    let r = Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
    assert_eq!(score_knn(&[0.0, 0.0], &r, 1).unwrap(), 0.0);
    let r = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -2.0]]).unwrap();
    assert!((score_knn(&[0.0, 0.0], &r, 2).unwrap() - 1.5).abs() < 1e-15);
}

#[test]
fn knn_matches_sorted_oracle() {
    let r = random_matrix(50, 4, 1);
    let z = [0.1, -0.2, 0.3, 0.0];
    let mut all: Vec<f64> = (0..50)
        .map(|i| {
            r.row(i)
                .iter()
                .zip(&z)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for k in [1, 5, 30] {
        let expect = all[..k].iter().sum::<f64>() / k as f64;
        assert!((score_knn(&z, &r, k).unwrap() - expect).abs() < 1e-12);
    }
    assert!(score_knn(&z, &r, 0).is_err());
    assert!(score_knn(&z, &r, 51).is_err());
    assert!(score_knn(&z, &Matrix::zeros(0, 4), 1).is_err());
}

#[test]
fn cosine_closed_forms() {
    let r = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
    assert!((score_cosine(&[1.0, 0.0], &r, 1, 0.05).unwrap() + 1.0).abs() < 1e-12);
    assert!(score_cosine(&[0.0, 1.0], &r, 1, 0.05).unwrap().abs() < 1e-12);
    assert!(score_cosine(&[0.0, 1.0], &r, 1, 0.0).is_err());
}

#[test]
fn cosine_matches_direct_sum() {
    let rows: Vec<Vec<f64>> = [
        [1.0, 0.2, 0.0],
        [0.3, 1.0, 0.1],
        [-1.0, 0.0, 0.5],
        [0.6, 0.6, 0.6],
        [0.0, 0.0, 1.0],
    ]
    .iter()
    .map(|r| unit(r))
    .collect();
    let r = Matrix::from_rows(&rows).unwrap();
    let z = unit(&[0.7, 0.5, 0.2]);
    let tau = 0.05;
    let mut sims: Vec<f64> = rows
        .iter()
        .map(|v| v.iter().zip(&z).map(|(a, b)| a * b).sum())
        .collect();
    sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let direct = -tau * (sims[..3].iter().map(|s| (s / tau).exp()).sum::<f64>() / 3.0).ln();
    assert!((score_cosine(&z, &r, 3, tau).unwrap() - direct).abs() < 1e-9);
}

/// Gauss-Jordan inverse with partial pivoting.
fn inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&x, &y| m[x][c].abs().partial_cmp(&m[y][c].abs()).unwrap())
            .unwrap();
        m.swap(c, p);
        let d = m[c][c];
        m[c].iter_mut().for_each(|v| *v /= d);
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                let pivot = m[c].clone();
                m[r].iter_mut().zip(&pivot).for_each(|(v, p)| *v -= f * p);
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

#[test]
fn mahalanobis_closed_forms() {
    let t = TiedGaussians::new(vec![0], vec![DVector::zeros(3)], DMatrix::identity(3, 3)).unwrap();
    assert_eq!(t.score(&[0.0, 0.0, 0.0]), 0.0);
    assert!((t.score(&[0.0, 1.0, 0.0]) - 1.0).abs() < 1e-15);
}

#[test]
fn mahalanobis_matches_explicit_inverse() {
    let x = random_matrix(40, 3, 7);
    let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
    let t = TiedGaussians::fit(&x, &labels, 1e-6).unwrap();
    // Oracle: class means and pooled covariance by loops, explicit inverse.
    let mut means = vec![vec![0.0; 3]; 2];
    for i in 0..40 {
        for j in 0..3 {
            means[labels[i]][j] += x.row(i)[j] / 20.0;
        }
    }
    let mut cov = vec![vec![0.0; 3]; 3];
    for i in 0..40 {
        let m = &means[labels[i]];
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += (x.row(i)[a] - m[a]) * (x.row(i)[b] - m[b]) / 40.0;
            }
        }
    }
    for (a, row) in cov.iter_mut().enumerate() {
        row[a] += 1e-6;
    }
    let inv = inverse(&cov);
    let z = [0.3, -0.4, 0.9];
    let oracle = means
        .iter()
        .map(|m| {
            let d: Vec<f64> = z.iter().zip(m).map(|(a, b)| a - b).collect();
            (0..3)
                .map(|a| (0..3).map(|b| d[a] * inv[a][b] * d[b]).sum::<f64>())
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min);
    assert!(
        (t.score(&z) - oracle).abs() < 1e-8,
        "{} vs {oracle}",
        t.score(&z)
    );
}

#[test]
fn singular_covariance_asks_for_regularization() {
    // All points on a line; no regularization.
    let x = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
    let err = TiedGaussians::fit(&x, &[0, 0, 0], 0.0).unwrap_err();
    assert!(err.to_string().contains("regularization"), "{err}");
}

#[test]
fn gmm_closed_form_at_mode() {
    let g = Gaussian::new(DVector::from_vec(vec![0.5, -0.5]), DMatrix::identity(2, 2)).unwrap();
    let gmm = Gmm::new(vec![1.0], vec![g.clone()]).unwrap();
    assert!((score_gmm(&[0.5, -0.5], &gmm) - 1.837_877_066_409_345).abs() < 1e-12);
    let other = Gaussian::new(
        DVector::from_vec(vec![2.0, 1.0]),
        DMatrix::identity(2, 2) * 0.3,
    )
    .unwrap();
    let two = Gmm::new(vec![0.4, 0.6], vec![g.clone(), other.clone()]).unwrap();
    let split = Gmm::new(vec![0.2, 0.2, 0.6], vec![g.clone(), g, other]).unwrap();
    for z in [[0.0, 0.0], [1.0, 2.0], [-3.0, 0.5]] {
        assert!((score_gmm(&z, &two) - score_gmm(&z, &split)).abs() < 1e-12);
    }
}

#[test]
fn em_is_monotone_and_converges() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rows = Vec::new();
    for c in 0..3 {
        for _ in 0..60 {
            let off = c as f64 * 2.0;
            rows.push(vec![
                off + rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                off * 0.5,
            ]);
        }
    }
    let x = Matrix::from_rows(&rows).unwrap();
    let cfg = GmmConfig {
        restarts: 3,
        ..Default::default()
    };
    let g = fit_gmm(&x, &cfg).unwrap();
    for w in g.trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-9 * (1.0 + w[0].abs()), "{:?}", g.trace);
    }
    assert!((g.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let again = fit_gmm(&x, &cfg).unwrap();
    assert_eq!(g.trace, again.trace);
}

#[test]
fn em_budget_exhaustion_reports_trace() {
    let x = random_matrix(100, 3, 4);
    let cfg = GmmConfig {
        max_iter: 1,
        tol: 0.0,
        restarts: 1,
        ..Default::default()
    };
    match fit_gmm(&x, &cfg) {
        Err(AnomalyError::NotConverged { iterations, trace }) => {
            assert_eq!(iterations, 1);
            assert_eq!(trace.len(), 2);
        }
        other => panic!("expected NotConverged, got {other:?}"),
    }
}

fn embedding_set(x: &Matrix, labels: Vec<usize>) -> EmbeddingSet {
    EmbeddingSet::new(x.clone(), labels).unwrap()
}

#[test]
fn scores_invariant_under_reference_permutation() {
    let x = random_matrix(60, 4, 11);
    let labels: Vec<usize> = (0..60).map(|i| i % 2).collect();
    let cfg = AnomalyConfig {
        k: 5,
        gmm: GmmConfig {
            components: 2,
            restarts: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    let a = ReferenceSet::fit(&embedding_set(&x, labels.clone()), &cfg).unwrap();
    let perm: Vec<usize> = (0..60).rev().collect();
    let xp = x.select_rows(&perm);
    let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
    let b = ReferenceSet::fit(&embedding_set(&xp, lp), &cfg).unwrap();
    let q = random_matrix(5, 4, 12);
    for m in [
        ScoreMetric::Knn,
        ScoreMetric::Cosine,
        ScoreMetric::Mahalanobis,
    ] {
        let (sa, sb) = (
            a.score_all(&q, m, &cfg).unwrap(),
            b.score_all(&q, m, &cfg).unwrap(),
        );
        for (u, v) in sa.iter().zip(&sb) {
            assert!((u - v).abs() < 1e-9, "{m:?}");
        }
    }
    // The GMM fit depends on the seeding order, so compare a fixed mixture
    // on both orderings instead.
    let ll = |r: &Matrix| {
        (0..r.rows)
            .map(|i| a.gmm.log_likelihood(r.row(i)))
            .sum::<f64>()
    };
    assert!((ll(&x) - ll(&xp)).abs() < 1e-9);
}

#[test]
fn knn_and_cosine_are_lipschitz() {
    let r = random_matrix(40, 3, 5).l2_normalized();
    let z = unit(&[0.2, 0.5, -0.3]);
    let dz: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(i, v)| v + if i == 0 { 1e-4 } else { 0.0 })
        .collect();
    let dk = (score_knn(&z, &r, 5).unwrap() - score_knn(&dz, &r, 5).unwrap()).abs();
    let dc =
        (score_cosine(&z, &r, 5, 0.05).unwrap() - score_cosine(&dz, &r, 5, 0.05).unwrap()).abs();
    assert!(dk <= 1e-4 + 1e-12, "{dk}");
    assert!(dc <= 1e-4 + 1e-12, "{dc}");
}

#[test]
fn evaluation_extremes() {
    let bg = vec![0.1, 0.2, 0.3];
    let ev = evaluate_anomaly(&bg, &[("w".into(), vec![1.0, 2.0])]).unwrap();
    assert_eq!(ev.per_signal[0].auc, 1.0);
    assert_eq!(ev.combined, 1.0);
    assert!(evaluate_anomaly(&[], &[("w".into(), vec![1.0])]).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let bg: Vec<f64> = (0..5000).map(|_| rng.random()).collect();
    let sig: Vec<f64> = (0..5000).map(|_| rng.random()).collect();
    let ev = evaluate_anomaly(&bg, &[("s".into(), sig)]).unwrap();
    assert!((ev.combined - 0.5).abs() < 0.02);
}

#[test]
fn combined_auc_between_signals() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let bg: Vec<f64> = (0..30).map(|_| rng.random()).collect();
        let a: Vec<f64> = (0..15).map(|_| rng.random::<f64>() + 0.3).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.random::<f64>() * 0.8).collect();
        let ev =
            evaluate_anomaly(&bg, &[("a".into(), a.clone()), ("b".into(), b.clone())]).unwrap();
        // Pooled pair count over both signal sets.
        let count = |s: &[f64]| -> f64 {
            s.iter()
                .map(|x| {
                    bg.iter()
                        .map(|y| {
                            if x > y {
                                1.0
                            } else if x == y {
                                0.5
                            } else {
                                0.0
                            }
                        })
                        .sum::<f64>()
                })
                .sum()
        };
        let oracle = (count(&a) + count(&b)) / (30.0 * 30.0);
        assert!((ev.combined - oracle).abs() < 1e-12);
        let (lo, hi) = (
            ev.per_signal[0].auc.min(ev.per_signal[1].auc),
            ev.per_signal[0].auc.max(ev.per_signal[1].auc),
        );
        assert!(lo - 1e-12 <= ev.combined && ev.combined <= hi + 1e-12);
    }
}
