//! Dense symmetric-matrix helpers shared by every estimator.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{KnnError, Result};

/// Relative tolerance used for symmetry checks.
pub const SYMMETRY_TOL: f64 = 1e-10;

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

pub fn is_symmetric(m: &DMatrix<f64>) -> bool {
    m.is_square() && max_asymmetry(m) <= SYMMETRY_TOL * max_abs(m).max(1.0)
}

/// Checks symmetry to relative tolerance and returns `(m + mᵀ) / 2`.
pub fn symmetrized(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(KnnError::Dimension(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let asym = max_asymmetry(m);
    if asym > SYMMETRY_TOL * max_abs(m).max(1.0) {
        return Err(KnnError::Asymmetric { asymmetry: asym });
    }
    Ok((m + m.transpose()) * 0.5)
}

/// Symmetric eigendecomposition with eigenvalues in ascending order.
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn new(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let sym = (m + m.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        SymEigen { values, vectors }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Rebuilds `O diag(g(λ)) Oᵀ`.
    pub fn recompose_with(&self, g: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.vectors.nrows(), self.vectors.ncols(), |i, j| {
            self.vectors[(i, j)] * g(self.values[j])
        });
        let out = &scaled * self.vectors.transpose();
        (&out + out.transpose()) * 0.5
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymEigen::new(m).min()
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = m.clone().cholesky()?;
    let inv = chol.inverse();
    Some((&inv + inv.transpose()) * 0.5)
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix, cutting eigenvalues
/// below `rel_tol · max|λ|`.
pub fn sym_pinv(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let eig = SymEigen::new(m);
    let scale = eig.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let cut = rel_tol * scale;
    eig.recompose_with(|l| {
        if l.abs() > cut && cut.is_finite() && l != 0.0 {
            1.0 / l
        } else {
            0.0
        }
    })
}

/// `tr(A B)` without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

pub fn quad_form(m: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    y.dot(&(m * y))
}

pub fn sample_variance(y: &DVector<f64>) -> f64 {
    let n = y.len();
    if n < 2 {
        return 0.0;
    }
    let mean = y.mean();
    y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
}
