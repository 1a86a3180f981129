use nalgebra::{DMatrix, SymmetricEigen};

use super::{DownstreamError, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct Pca2d {
    /// `rows × 2` coordinates on the two leading components.
    pub coords: Matrix,
    /// Unit component vectors, each of length `cols`.
    pub components: [Vec<f64>; 2],
    pub explained_variance: [f64; 2],
}

/// Projection on the two leading principal components. Each component's
/// sign is fixed so its largest-magnitude entry is positive.
pub fn pca_2d(x: &Matrix) -> Result<Pca2d, DownstreamError> {
    if x.rows < 2 || x.cols < 2 {
        return Err(DownstreamError::Input(format!(
            "PCA needs at least 2 rows and 2 columns, got {}x{}",
            x.rows, x.cols
        )));
    }
    let n = x.rows as f64;
    let m = DMatrix::from_row_slice(x.rows, x.cols, &x.data);
    let mean = m.row_mean();
    let centered = DMatrix::from_fn(x.rows, x.cols, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..x.cols).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let comp = |k: usize| -> Vec<f64> {
        let v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        let big = v
            .iter()
            .copied()
            .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if big < 0.0 {
            v.iter().map(|x| -x).collect()
        } else {
            v
        }
    };
    let components = [comp(0), comp(1)];
    let mut coords = Matrix::zeros(x.rows, 2);
    for i in 0..x.rows {
        for (k, c) in components.iter().enumerate() {
            coords.row_mut(i)[k] = (0..x.cols).map(|j| centered[(i, j)] * c[j]).sum();
        }
    }
    Ok(Pca2d {
        coords,
        components,
        explained_variance: [
            eig.eigenvalues[order[0]].max(0.0),
            eig.eigenvalues[order[1]].max(0.0),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_dominant_axes() {
        // Points spread 10x along (1,1,0)/sqrt2 and 1x along z.
        let mut rows = Vec::new();
        for i in 0..50 {
            let a = ((i / 2) as f64 - 12.0) * 0.8;
            let b = if i % 2 == 0 { 0.5 } else { -0.5 };
            rows.push(vec![a + 3.0, a - 1.0, b]);
        }
        let p = pca_2d(&Matrix::from_rows(&rows).unwrap()).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!((p.components[0][0] - s).abs() < 1e-9 && (p.components[0][1] - s).abs() < 1e-9);
        assert!((p.components[1][2].abs() - 1.0).abs() < 1e-9);
        assert!(p.explained_variance[0] > p.explained_variance[1]);
        let mean0: f64 = (0..50).map(|i| p.coords.row(i)[0]).sum::<f64>() / 50.0;
        assert!(mean0.abs() < 1e-9);
    }

    #[test]
    fn too_small_rejected() {
        assert!(pca_2d(&Matrix::zeros(1, 3)).is_err());
    }
}
