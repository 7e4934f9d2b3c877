//! Symmetric eigendecomposition helpers shared by the filtering and marking
//! code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative eigenvalue threshold below which a direction is treated as
/// carrying no information (excluded from pseudo-inverses).
const RANK_EPS: f64 = 1e-13;

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order (columns of the returned matrix are the eigenvectors).
pub fn symmetric_eigen_sorted(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if m.nrows() != m.ncols() {
        return Err(Error::invalid("eigendecomposition needs a square matrix"));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::linalg::SymmetricEigen::try_new(sym, f64::EPSILON, 100_000)
        .ok_or_else(|| Error::numerical("symmetric eigensolver did not converge"))?;
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_fn(n, |i, _| eig.eigenvalues[order[i]]);
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).copy_from(&eig.eigenvectors.column(src));
    }
    Ok((values, vectors))
}

/// Rank-truncated covariance: the top eigenpairs, the matching pseudo-inverse
/// (inverse eigenvalues zeroed alongside), and a factor `G` with `G G' = reduced`.
#[derive(Debug, Clone)]
pub struct TruncatedCovariance {
    /// `V_k diag(lambda_k) V_k'`.
    pub reduced: DMatrix<f64>,
    /// `V_k diag(1/lambda_k) V_k'`.
    pub pseudo_inverse: DMatrix<f64>,
    /// n x kept factor `V_k diag(sqrt(lambda_k))`.
    pub factor: DMatrix<f64>,
    /// Eigenpairs actually kept (can be below the requested rank when the
    /// matrix is numerically rank-deficient).
    pub kept: usize,
}

/// Keeps the top `rank` eigenpairs of a symmetric PSD matrix. Eigenvalues
/// that are numerically zero (or negative noise) are dropped from both the
/// reduced matrix and its pseudo-inverse.
pub fn truncate_covariance(sigma: &DMatrix<f64>, rank: usize) -> Result<TruncatedCovariance> {
    let n = sigma.nrows();
    if sigma.ncols() != n {
        return Err(Error::invalid("covariance must be square"));
    }
    if rank == 0 || rank > n {
        return Err(Error::invalid(format!(
            "truncation rank must lie in 1..={n}, got {rank}"
        )));
    }
    let asym = (sigma - sigma.transpose()).abs().max();
    let scale = sigma.abs().max().max(1e-300);
    if asym > 1e-8 * scale.max(1.0) {
        return Err(Error::invalid(format!(
            "covariance is not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    let (values, vectors) = symmetric_eigen_sorted(sigma)?;
    let max_val = values[0].max(0.0);
    if values[n - 1] < -1e-8 * max_val.max(1.0) {
        return Err(Error::invalid(format!(
            "covariance is not positive semidefinite (min eigenvalue {:.3e})",
            values[n - 1]
        )));
    }
    let threshold = max_val * RANK_EPS;
    let mut kept = 0;
    for i in 0..rank.min(n) {
        if values[i] > threshold {
            kept += 1;
        }
    }
    let mut reduced = DMatrix::zeros(n, n);
    let mut pinv = DMatrix::zeros(n, n);
    let mut factor = DMatrix::zeros(n, kept);
    for k in 0..kept {
        let v = vectors.column(k);
        let outer = v * v.transpose();
        reduced += &outer * values[k];
        pinv += &outer / values[k];
        factor.column_mut(k).copy_from(&(v * values[k].sqrt()));
    }
    Ok(TruncatedCovariance {
        reduced,
        pseudo_inverse: pinv,
        factor,
        kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_rank_truncation_is_ordinary_inverse() {
        let sigma = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, 0.2, 0.1, 0.2, 1.0]);
        let t = truncate_covariance(&sigma, 3).unwrap();
        assert_eq!(t.kept, 3);
        let inv = sigma.clone().try_inverse().unwrap();
        assert!((&t.pseudo_inverse - &inv).abs().max() < 1e-10);
        assert!((&t.reduced - &sigma).abs().max() < 1e-10);
        let gg = &t.factor * t.factor.transpose();
        assert!((&gg - &sigma).abs().max() < 1e-10);
    }

    #[test]
    fn rank_one_pseudo_inverse_closed_form() {
        let v = DVector::from_vec(vec![1.0, 2.0, 2.0]);
        let sigma = &v * v.transpose();
        let t = truncate_covariance(&sigma, 1).unwrap();
        assert_eq!(t.kept, 1);
        let norm4 = v.norm_squared().powi(2);
        let expect = &v * v.transpose() / norm4;
        assert!((&t.pseudo_inverse - &expect).abs().max() < 1e-12);
    }

    #[test]
    fn zero_matrix_keeps_nothing() {
        let sigma = DMatrix::zeros(4, 4);
        let t = truncate_covariance(&sigma, 4).unwrap();
        assert_eq!(t.kept, 0);
        assert!(t.pseudo_inverse.abs().max() == 0.0);
    }

    #[test]
    fn rejects_bad_rank_and_asymmetry() {
        let sigma = DMatrix::<f64>::identity(3, 3);
        assert!(truncate_covariance(&sigma, 0).is_err());
        assert!(truncate_covariance(&sigma, 4).is_err());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        assert!(truncate_covariance(&bad, 2).is_err());
    }

    #[test]
    fn eigen_sorted_descending() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        let (vals, vecs) = symmetric_eigen_sorted(&m).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        let reconstructed = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert!((&reconstructed - &m).abs().max() < 1e-12);
    }
}
