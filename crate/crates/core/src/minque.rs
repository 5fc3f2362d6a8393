//! Minimum norm quadratic unbiased estimation of variance components.
//!
//! For a basis `H_0 = I, H_1, ..., H_L'` and unit prior weights the working
//! covariance is `V* = Σ_l H_l`. With `W = V*⁻¹` the normal matrix is
//! `Γ_ij = tr(W H_i W H_j)`, and the quadratic-form matrix for component `i`
//! is `A_i = Σ_l η⁽ⁱ⁾_l W H_l W` where `Γ η⁽ⁱ⁾ = e_i`. This enforces
//! `tr(A_i H_j) = δ_ij`, so `E[yᵀ A_i y] = θ_i` exactly.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KnnError, Result};
use crate::kernels::{psd_project, KernelBasis};
use crate::linalg::{self, SymEigen};

/// Relative ridge added to a near-singular `V*`.
pub const RIDGE_EPS: f64 = 1e-10;
/// Reciprocal condition number below which `Γ` is declared singular.
pub const GAMMA_RCOND: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct MinqueSystem {
    basis: KernelBasis,
    gamma: DMatrix<f64>,
    a_matrices: Vec<DMatrix<f64>>,
    working_inverse: DMatrix<f64>,
    ridge_applied: bool,
}

impl MinqueSystem {
    pub fn basis(&self) -> &KernelBasis {
        &self.basis
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn a_matrices(&self) -> &[DMatrix<f64>] {
        &self.a_matrices
    }

    pub fn working_inverse(&self) -> &DMatrix<f64> {
        &self.working_inverse
    }

    pub fn ridge_applied(&self) -> bool {
        self.ridge_applied
    }

    /// `yᵀ A_i y` for every component, before clamping or projection.
    pub fn quadratic_forms(&self, y: &DVector<f64>) -> Vec<f64> {
        self.a_matrices
            .iter()
            .map(|a| linalg::quad_form(a, y))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    /// `θ_0 = φ` first, then one entry per non-error basis matrix.
    pub theta: Vec<f64>,
    pub tags: Vec<String>,
    pub clamped_indices: Vec<usize>,
    /// The error quadratic form was negative and `A_0` was projected.
    pub error_projected: bool,
    pub ridge_applied: bool,
}

impl VarianceComponents {
    pub fn phi(&self) -> f64 {
        self.theta[0]
    }

    pub fn signal(&self) -> &[f64] {
        &self.theta[1..]
    }
}

fn working_inverse(vstar: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    if let Some(inv) = linalg::spd_inverse(vstar) {
        if inv.iter().all(|v| v.is_finite()) {
            return Ok((inv, false));
        }
    }
    let n = vstar.nrows();
    let ridge = RIDGE_EPS * (vstar.trace() / n as f64).abs().max(1.0);
    let bumped = vstar + DMatrix::identity(n, n) * ridge;
    linalg::spd_inverse(&bumped)
        .map(|inv| (inv, true))
        .ok_or_else(|| KnnError::Numeric("working covariance V* is not positive definite".into()))
}

pub fn build_system(basis: &KernelBasis) -> Result<MinqueSystem> {
    let n = basis.n();
    if basis.matrices()[0] != DMatrix::identity(n, n) {
        return Err(KnnError::State(
            "MINQUE basis must start with the identity".into(),
        ));
    }
    for m in basis.matrices() {
        if !linalg::is_symmetric(m) {
            return Err(KnnError::Asymmetric {
                asymmetry: linalg::max_asymmetry(m),
            });
        }
    }
    let k = basis.len();
    let vstar = basis.combine(&vec![1.0; k]);
    let (w, ridge_applied) = working_inverse(&vstar)?;

    let wh: Vec<DMatrix<f64>> = basis.matrices().par_iter().map(|h| &w * h).collect();
    let mut gamma = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let t = linalg::trace_of_product(&wh[i], &wh[j]);
            gamma[(i, j)] = t;
            gamma[(j, i)] = t;
        }
    }

    let eig = SymEigen::new(&gamma);
    let (lo, hi) = (eig.min(), eig.max());
    let rcond = if hi > 0.0 { lo / hi } else { 0.0 };
    if !(rcond >= GAMMA_RCOND) {
        let null = eig.vectors.column(0);
        let peak = null.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let dependent = basis
            .terms()
            .iter()
            .zip(null.iter())
            .filter(|(_, v)| v.abs() > 0.1 * peak)
            .map(|(t, _)| t.tag.clone())
            .collect();
        return Err(KnnError::Unidentifiable { dependent, rcond });
    }
    let gamma_inv = eig.recompose_with(|l| 1.0 / l);

    let whw: Vec<DMatrix<f64>> = wh.par_iter().map(|c| c * &w).collect();
    let a_matrices: Vec<DMatrix<f64>> = (0..k)
        .into_par_iter()
        .map(|i| {
            let mut a = DMatrix::zeros(n, n);
            for (l, b) in whw.iter().enumerate() {
                a += b * gamma_inv[(l, i)];
            }
            (&a + a.transpose()) * 0.5
        })
        .collect();

    Ok(MinqueSystem {
        basis: basis.clone(),
        gamma,
        a_matrices,
        working_inverse: w,
        ridge_applied,
    })
}

/// Evaluates the quadratic forms and applies the sign policy: signal
/// components clamp at zero, a negative error component is recomputed with
/// `A_0` projected onto the PSD cone.
pub fn estimate(system: &MinqueSystem, y: &DVector<f64>) -> Result<VarianceComponents> {
    let n = system.basis.n();
    if y.len() != n {
        return Err(KnnError::Dimension(format!(
            "response has length {}, basis is {n}x{n}",
            y.len()
        )));
    }
    let mut theta = system.quadratic_forms(y);
    let mut clamped = Vec::new();
    for (i, t) in theta.iter_mut().enumerate().skip(1) {
        if *t < 0.0 {
            *t = 0.0;
            clamped.push(i);
        }
    }
    let mut error_projected = false;
    if theta[0] < 0.0 {
        let projected = psd_project(&system.a_matrices[0])?;
        theta[0] = linalg::quad_form(&projected, y).max(0.0);
        error_projected = true;
    }
    Ok(VarianceComponents {
        theta,
        tags: system.basis.tags(),
        clamped_indices: clamped,
        error_projected,
        ridge_applied: system.ridge_applied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::product_kernel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(n: usize, rank: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let x = DMatrix::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0));
        product_kernel(&x).unwrap().into_values()
    }

    #[test]
    fn identity_only_basis() {
        let sys = build_system(&KernelBasis::identity_only(4)).unwrap();
        assert!((sys.gamma()[(0, 0)] - 4.0).abs() < 1e-12);
        assert!(
            (&sys.a_matrices()[0] - DMatrix::<f64>::identity(4, 4) / 4.0)
                .abs()
                .max()
                < 1e-12
        );
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let vc = estimate(&sys, &y).unwrap();
        assert!((vc.phi() - y.dot(&y) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn duplicated_identity_is_unidentifiable() {
        let basis = KernelBasis::with_identity(vec![DMatrix::identity(5, 5)]).unwrap();
        match build_system(&basis) {
            Err(KnnError::Unidentifiable { dependent, .. }) => {
                assert_eq!(dependent, vec!["I".to_string(), "H1".to_string()]);
            }
            other => panic!("expected unidentifiable, got {other:?}"),
        }
    }

    #[test]
    fn trace_constraints_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = random_psd(6, 3, &mut rng);
        let basis = KernelBasis::with_identity(vec![k]).unwrap();
        let sys = build_system(&basis).unwrap();
        for (i, a) in sys.a_matrices().iter().enumerate() {
            assert!(linalg::max_asymmetry(a) <= 1e-10);
            for (j, h) in basis.matrices().iter().enumerate() {
                let t = linalg::trace_of_product(a, h);
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((t - want).abs() < 1e-8, "tr(A{i}H{j}) = {t}");
            }
        }
    }

    #[test]
    fn null_space_response_clamps_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let n = 8;
        let k = random_psd(n, 2, &mut rng);
        let eig = SymEigen::new(&k);
        // Eigenvectors with zero eigenvalue span the kernel of K.
        let mut y = DVector::zeros(n);
        for c in 0..(n - 2) {
            y += eig.vectors.column(c) * rng.random_range(0.5..1.5);
        }
        let basis = KernelBasis::with_identity(vec![k.clone()]).unwrap();
        let sys = build_system(&basis).unwrap();
        assert!((&k * &y).norm() < 1e-10);
        let raw = sys.quadratic_forms(&y);
        assert!(raw[1] < 0.0);
        let vc = estimate(&sys, &y).unwrap();
        assert_eq!(vc.clamped_indices, vec![1]);
        assert_eq!(vc.theta[1], 0.0);
        assert!(vc.phi() > 0.0);
    }

    #[test]
    fn negative_error_form_is_projected() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 10;
        let k = random_psd(n, 2, &mut rng);
        let basis = KernelBasis::with_identity(vec![k.clone()]).unwrap();
        let sys = build_system(&basis).unwrap();
        // Pure signal in the column space of K pushes yᵀA_0y negative.
        let eig = SymEigen::new(&k);
        let y: DVector<f64> = eig.vectors.column(n - 1) * 10.0;
        let raw = sys.quadratic_forms(&y);
        assert!(raw[0] < 0.0, "raw error form {}", raw[0]);
        let vc = estimate(&sys, &y).unwrap();
        assert!(vc.error_projected);
        assert!(vc.phi() >= 0.0);
    }

    #[test]
    fn scale_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let k = random_psd(7, 4, &mut rng);
        let sys = build_system(&KernelBasis::with_identity(vec![k]).unwrap()).unwrap();
        let y = DVector::from_fn(7, |_, _| rng.random_range(-1.0..1.0));
        let a = sys.quadratic_forms(&y);
        let b = sys.quadratic_forms(&(&y * 3.0));
        for (x, z) in a.iter().zip(&b) {
            assert!((z - 9.0 * x).abs() < 1e-10 * (1.0 + z.abs()));
        }
    }
}
