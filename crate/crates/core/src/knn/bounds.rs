//! Comparisons of the asymptotic KNN prediction error against the LMM
//! error, and the Schur-positivity check that the comparison relies on.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KnnError, Result};
use crate::kernels::{KernelMatrix, OutputKernelSpec, PSD_TOL};
use crate::linalg::SymEigen;

const BOUND_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// `φ tr((τ̃ f[Σ ξ_l K_l] + I)⁻¹)`.
    pub pe_knn: f64,
    /// `φ Σ_i (σ̃² λ_i(Σ K_l) + 1)⁻¹`.
    pub pe_lmm: f64,
    pub bound_holds: bool,
    pub hypothesis_met: bool,
    /// Smallest eigenvalue of `(f − ι)[Σ ξ_l K_l]` (polynomial `f` only).
    pub schur_min_eigenvalue: Option<f64>,
    pub reason: Option<String>,
}

fn trace_inverse_shifted(m: &DMatrix<f64>, scale: f64) -> f64 {
    SymEigen::new(m)
        .values
        .iter()
        .map(|&l| 1.0 / (scale * l + 1.0))
        .sum()
}

fn schur_tolerance(m: &DMatrix<f64>) -> f64 {
    PSD_TOL * m.amax().max(1.0)
}

/// Evaluates both prediction errors and whether the hypotheses of the
/// comparison hold. A violated hypothesis is reported, not raised.
pub fn pe_bound_check(
    inputs: &[KernelMatrix],
    xi: &[f64],
    tau_tilde: f64,
    sigma_tilde_sq: f64,
    spec: &OutputKernelSpec,
    phi: f64,
) -> Result<BoundReport> {
    if inputs.is_empty() || inputs.len() != xi.len() {
        return Err(KnnError::Dimension(format!(
            "{} kernels with {} weights",
            inputs.len(),
            xi.len()
        )));
    }
    let n = inputs[0].n();
    if inputs.iter().any(|k| k.n() != n) {
        return Err(KnnError::Dimension(
            "input kernels differ in dimension".into(),
        ));
    }
    if xi.iter().any(|&x| !(x > 0.0)) {
        return Err(KnnError::Domain("kernel weights must be positive".into()));
    }
    if !(tau_tilde > 0.0) || !(sigma_tilde_sq >= 0.0) || !(phi > 0.0) {
        return Err(KnnError::Domain(
            "need tau_tilde > 0, sigma_tilde_sq >= 0, phi > 0".into(),
        ));
    }
    spec.validate()?;

    let mut weighted = DMatrix::zeros(n, n);
    let mut total = DMatrix::zeros(n, n);
    for (k, &w) in inputs.iter().zip(xi) {
        weighted += k.values() * w;
        total += k.values();
    }

    let pe_knn = phi * trace_inverse_shifted(&spec.apply_matrix(&weighted), tau_tilde);
    let pe_lmm = phi * trace_inverse_shifted(&total, sigma_tilde_sq);

    let mut reason = None;
    let min_xi = xi.iter().copied().fold(f64::INFINITY, f64::min);
    if sigma_tilde_sq > tau_tilde * min_xi {
        reason = Some(format!(
            "sigma_tilde_sq = {sigma_tilde_sq} exceeds tau_tilde * min xi = {}",
            tau_tilde * min_xi
        ));
    }
    let schur_min_eigenvalue = match spec {
        OutputKernelSpec::Identity => None,
        OutputKernelSpec::Polynomial { .. } => {
            let shifted = spec.apply_minus_identity(&weighted);
            let min = SymEigen::new(&shifted).min();
            if min < -schur_tolerance(&shifted) && reason.is_none() {
                reason = Some(format!("(f - x)[sum xi K] has eigenvalue {min:.3e} < 0"));
            }
            Some(min)
        }
    };

    Ok(BoundReport {
        pe_knn,
        pe_lmm,
        bound_holds: pe_knn <= pe_lmm * (1.0 + BOUND_SLACK),
        hypothesis_met: reason.is_none(),
        schur_min_eigenvalue,
        reason,
    })
}

/// `(1/d)^{1/(d−1)}`: the smallest offset `c` for which `(c + x)^d − x`
/// preserves positive semidefiniteness entrywise.
pub fn schur_positivity_threshold(d: u32) -> Result<f64> {
    if d < 2 {
        return Err(KnnError::Domain(format!(
            "Schur threshold needs degree >= 2, got {d}"
        )));
    }
    let d = d as f64;
    Ok((1.0 / d).powf(1.0 / (d - 1.0)))
}

/// Random PSD matrix with entries in `[0, 1]`: `BBᵀ` for uniform `B`,
/// scaled by its largest entry.
pub fn random_unit_psd(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let rank = rng.random_range(1..=n.max(1));
    let b = DMatrix::from_fn(n, rank, |_, _| rng.random::<f64>());
    let s = &b * b.transpose();
    let top = s.max();
    if top > 0.0 {
        s / top
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchurSweep {
    pub c: f64,
    pub d: u32,
    pub threshold: f64,
    pub instances: usize,
    pub min_eigenvalue: f64,
    /// Instances whose smallest eigenvalue fell below `-1e-8`.
    pub negative_instances: usize,
}

/// Smallest eigenvalue of `(f − ι)[Σ]` over random `Σ` from [`random_unit_psd`].
pub fn schur_sweep(
    c: f64,
    d: u32,
    n: usize,
    instances: usize,
    rng: &mut impl Rng,
) -> Result<SchurSweep> {
    let threshold = schur_positivity_threshold(d)?;
    let spec = OutputKernelSpec::Polynomial { c, d };
    spec.validate()?;
    let mut min_eigenvalue = f64::INFINITY;
    let mut negative_instances = 0;
    for _ in 0..instances {
        let shifted = spec.apply_minus_identity(&random_unit_psd(n, rng));
        let min = SymEigen::new(&shifted).min();
        if min < -PSD_TOL {
            negative_instances += 1;
        }
        min_eigenvalue = min_eigenvalue.min(min);
    }
    Ok(SchurSweep {
        c,
        d,
        threshold,
        instances,
        min_eigenvalue,
        negative_instances,
    })
}
