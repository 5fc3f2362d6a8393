//! The kernel neural network model: fit components with MINQUE, then predict
//! with the asymptotic (many hidden units) predictor.
//!
//! In the many-hidden-unit limit the random-effect covariance is
//! `τ f[Σ_l ξ_l K_l]`, which the expanded basis writes as `Σ_{l≥1} θ_l H_l`.
//! The scaled signal `Ŝ = φ̂⁻¹ Σ_{l≥1} θ̂_l H_l` is all the predictor needs:
//! `M = Ŝ (Ŝ + I)⁻¹`, and the residual operator is `(Ŝ + I)⁻¹`.

mod bounds;

pub use bounds::{
    pe_bound_check, random_unit_psd, schur_positivity_threshold, schur_sweep, BoundReport,
    SchurSweep,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{KnnError, Result};
use crate::kernels::{expand_output_basis, KernelBasis, KernelMatrix, OutputKernelSpec};
use crate::linalg;
use crate::minque::{self, VarianceComponents};
use crate::restrict::{self, aitken_beta, projection_pv};

/// Relative floor for the error variance used in divisions.
pub const PHI_FLOOR: f64 = 1e-12;
/// A transformed basis matrix smaller than this (relative Frobenius norm) is
/// absorbed by the fixed effects.
pub const VANISHING_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct KnnSpec {
    pub input_kernels: Vec<KernelMatrix>,
    pub output: OutputKernelSpec,
}

impl KnnSpec {
    pub fn new(input_kernels: Vec<KernelMatrix>, output: OutputKernelSpec) -> Result<Self> {
        if input_kernels.is_empty() {
            return Err(KnnError::Dimension(
                "KNN needs at least one input kernel".into(),
            ));
        }
        let n = input_kernels[0].n();
        if input_kernels.iter().any(|k| k.n() != n) {
            return Err(KnnError::Dimension(
                "input kernels differ in dimension".into(),
            ));
        }
        output.validate()?;
        Ok(KnnSpec {
            input_kernels,
            output,
        })
    }

    pub fn n(&self) -> usize {
        self.input_kernels[0].n()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KnnDiagnostics {
    pub phi_floored: bool,
    pub clamped: Vec<String>,
    pub error_projected: bool,
    pub ridge_applied: bool,
    /// Components annihilated by the restriction (e.g. `J` under an intercept).
    pub absorbed_by_fixed_effects: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct FittedKnn {
    theta: VarianceComponents,
    basis: KernelBasis,
    beta: Option<DVector<f64>>,
    phi_used: f64,
    v_hat: DMatrix<f64>,
    signal: DMatrix<f64>,
    resolvent: DMatrix<f64>,
    predictor: DMatrix<f64>,
    diagnostics: KnnDiagnostics,
}

/// Serializable summary of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedKnnSummary {
    pub model: String,
    pub n: usize,
    pub output: OutputKernelSpec,
    pub input_kernels: Vec<String>,
    pub basis: Vec<crate::kernels::BasisTerm>,
    pub theta: VarianceComponents,
    pub phi_used: f64,
    pub beta: Option<Vec<f64>>,
    pub diagnostics: KnnDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionError {
    /// `yᵀ(I−P)ᵀ(Ŝ+I)⁻²(I−P)y`.
    pub plug_in: f64,
    /// `‖y − ŷ‖²`.
    pub empirical: f64,
    /// `‖y − ŷ‖² / n`.
    pub average: f64,
}

/// `Ŝ + I` Cholesky-inverted; returns `(Ŝ+I)⁻¹`.
fn resolvent_of(signal: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = signal.nrows();
    let shifted = signal + DMatrix::identity(n, n);
    linalg::spd_inverse(&shifted)
        .ok_or_else(|| KnnError::Numeric("Ŝ + I is not positive definite".into()))
}

/// `M = Ŝ(Ŝ+I)⁻¹` with `Ŝ = φ⁻¹ Σ_{l≥1} θ_l H_l`.
pub fn predictor_from_components(
    basis: &KernelBasis,
    theta: &[f64],
    phi: f64,
) -> Result<DMatrix<f64>> {
    let (_, _, m) = signal_parts(basis, theta, phi)?;
    Ok(m)
}

fn signal_parts(
    basis: &KernelBasis,
    theta: &[f64],
    phi: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let n = basis.n();
    if theta.len() != basis.len() {
        return Err(KnnError::Dimension(format!(
            "{} components for a basis of {}",
            theta.len(),
            basis.len()
        )));
    }
    if theta[1..].iter().all(|&t| t == 0.0) {
        return Ok((
            DMatrix::zeros(n, n),
            DMatrix::identity(n, n),
            DMatrix::zeros(n, n),
        ));
    }
    if !(phi > 0.0) {
        return Err(KnnError::Domain(format!(
            "error variance must be positive, got {phi}"
        )));
    }
    let mut w = theta.to_vec();
    w[0] = 0.0;
    let signal = basis.combine(&w) / phi;
    let resolvent = resolvent_of(&signal)?;
    let predictor = DMatrix::identity(n, n) - &resolvent;
    Ok((signal, resolvent, predictor))
}

impl FittedKnn {
    /// Assembles a fit from already-estimated components (used by [`fit`]
    /// and when reloading a saved model).
    pub fn from_parts(
        basis: KernelBasis,
        theta: VarianceComponents,
        phi_used: f64,
        beta: Option<DVector<f64>>,
        diagnostics: KnnDiagnostics,
    ) -> Result<Self> {
        let (signal, resolvent, predictor) = signal_parts(&basis, &theta.theta, phi_used)?;
        let mut w = theta.theta.clone();
        w[0] = phi_used;
        let v_hat = basis.combine(&w);
        Ok(FittedKnn {
            theta,
            basis,
            beta,
            phi_used,
            v_hat,
            signal,
            resolvent,
            predictor,
            diagnostics,
        })
    }

    pub fn theta(&self) -> &VarianceComponents {
        &self.theta
    }

    pub fn basis(&self) -> &KernelBasis {
        &self.basis
    }

    pub fn beta(&self) -> Option<&DVector<f64>> {
        self.beta.as_ref()
    }

    pub fn phi_used(&self) -> f64 {
        self.phi_used
    }

    pub fn v_hat(&self) -> &DMatrix<f64> {
        &self.v_hat
    }

    /// `Ŝ`.
    pub fn signal(&self) -> &DMatrix<f64> {
        &self.signal
    }

    pub fn diagnostics(&self) -> &KnnDiagnostics {
        &self.diagnostics
    }

    pub fn n(&self) -> usize {
        self.basis.n()
    }

    pub fn summary(&self, spec: &KnnSpec) -> FittedKnnSummary {
        FittedKnnSummary {
            model: "knn".into(),
            n: self.n(),
            output: spec.output,
            input_kernels: spec
                .input_kernels
                .iter()
                .map(|k| k.label().to_string())
                .collect(),
            basis: self.basis.terms().to_vec(),
            theta: self.theta.clone(),
            phi_used: self.phi_used,
            beta: self.beta.as_ref().map(|b| b.iter().copied().collect()),
            diagnostics: self.diagnostics.clone(),
        }
    }

    fn check(&self, y: &DVector<f64>, z: Option<&DMatrix<f64>>) -> Result<()> {
        let n = self.n();
        if y.len() != n {
            return Err(KnnError::Dimension(format!(
                "response has length {}, model has n = {n}",
                y.len()
            )));
        }
        match (z, &self.beta) {
            (Some(z), Some(b)) => {
                if z.shape() != (n, b.len()) {
                    return Err(KnnError::Dimension(format!(
                        "covariates are {}x{}, model expects {n}x{}",
                        z.nrows(),
                        z.ncols(),
                        b.len()
                    )));
                }
                Ok(())
            }
            (None, None) => Ok(()),
            _ => Err(KnnError::State(
                "covariate presence differs between fit and predict".into(),
            )),
        }
    }

    /// `(I − P_V̂) y`, or `y` without covariates.
    fn fixed_effect_residual(
        &self,
        y: &DVector<f64>,
        z: Option<&DMatrix<f64>>,
    ) -> Result<DVector<f64>> {
        match z {
            Some(z) => {
                let p = projection_pv(z, &self.v_hat)?;
                Ok(y - p * y)
            }
            None => Ok(y.clone()),
        }
    }
}

fn phi_floor(y: &DVector<f64>) -> f64 {
    (PHI_FLOOR * linalg::sample_variance(y)).max(f64::MIN_POSITIVE)
}

/// Fits variance components by MINQUE; with covariates, on the error
/// contrasts `Ry`, followed by the Aitken estimate of `β`.
pub fn fit(spec: &KnnSpec, y: &DVector<f64>, z: Option<&DMatrix<f64>>) -> Result<FittedKnn> {
    let n = spec.n();
    if y.len() != n {
        return Err(KnnError::Dimension(format!(
            "response has length {}, kernels are {n}x{n}",
            y.len()
        )));
    }
    let basis = expand_output_basis(&spec.input_kernels, &spec.output)?;
    let mut diagnostics = KnnDiagnostics::default();

    let (estimated, keep) = match z {
        None => (
            minque::estimate(&minque::build_system(&basis)?, y)?,
            (0..basis.len()).collect(),
        ),
        Some(z) => {
            if z.nrows() != n {
                return Err(KnnError::Dimension(format!(
                    "covariates have {} rows, expected {n}",
                    z.nrows()
                )));
            }
            let restr = restrict::restriction_matrix(z)?;
            let (yt, tb) = restrict::transform(y, &basis, &restr)?;
            let keep: Vec<usize> = (0..basis.len())
                .filter(|&l| {
                    l == 0 || tb.matrices()[l].norm() > VANISHING_TOL * basis.matrices()[l].norm()
                })
                .collect();
            for l in 0..basis.len() {
                if !keep.contains(&l) {
                    diagnostics
                        .absorbed_by_fixed_effects
                        .push(basis.terms()[l].tag.clone());
                }
            }
            let sub = tb.subset(&keep);
            (minque::estimate(&minque::build_system(&sub)?, &yt)?, keep)
        }
    };

    let mut theta = vec![0.0; basis.len()];
    for (slot, &l) in keep.iter().enumerate() {
        theta[l] = estimated.theta[slot];
    }
    let clamped_indices: Vec<usize> = estimated.clamped_indices.iter().map(|&s| keep[s]).collect();
    diagnostics.clamped = clamped_indices
        .iter()
        .map(|&l| basis.terms()[l].tag.clone())
        .collect();
    diagnostics.error_projected = estimated.error_projected;
    diagnostics.ridge_applied = estimated.ridge_applied;

    let floor = phi_floor(y);
    let phi_used = if theta[0] < floor {
        diagnostics.phi_floored = true;
        floor
    } else {
        theta[0]
    };
    let components = VarianceComponents {
        theta,
        tags: basis.tags(),
        clamped_indices,
        error_projected: estimated.error_projected,
        ridge_applied: estimated.ridge_applied,
    };

    let beta = match z {
        Some(z) => {
            let mut w = components.theta.clone();
            w[0] = phi_used;
            let v_hat = basis.combine(&w);
            Some(aitken_beta(y, z, &v_hat)?.beta)
        }
        None => None,
    };
    FittedKnn::from_parts(basis, components, phi_used, beta, diagnostics)
}

pub fn predictor_matrix(fitted: &FittedKnn) -> &DMatrix<f64> {
    &fitted.predictor
}

/// `ŷ = Z β̂ + M (I − P_V̂) y`, or `M y` without covariates.
pub fn predict(
    fitted: &FittedKnn,
    y: &DVector<f64>,
    z: Option<&DMatrix<f64>>,
) -> Result<DVector<f64>> {
    fitted.check(y, z)?;
    let resid = fitted.fixed_effect_residual(y, z)?;
    let random = &fitted.predictor * &resid;
    Ok(match (z, &fitted.beta) {
        (Some(z), Some(b)) => z * b + random,
        _ => random,
    })
}

pub fn prediction_error(
    fitted: &FittedKnn,
    y: &DVector<f64>,
    z: Option<&DMatrix<f64>>,
) -> Result<PredictionError> {
    fitted.check(y, z)?;
    let resid = fitted.fixed_effect_residual(y, z)?;
    let plug_in = (&fitted.resolvent * &resid).norm_squared();
    let y_hat = predict(fitted, y, z)?;
    let empirical = (y - y_hat).norm_squared();
    Ok(PredictionError {
        plug_in,
        empirical,
        average: empirical / y.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{product_kernel, KernelMatrix};
    use crate::linalg::SymEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_kernel(n: usize, rank: usize, rng: &mut impl Rng) -> KernelMatrix {
        product_kernel(&DMatrix::from_fn(n, rank, |_, _| {
            rng.random_range(-1.0..1.0)
        }))
        .unwrap()
    }

    fn components(theta: Vec<f64>, tags: Vec<String>) -> VarianceComponents {
        VarianceComponents {
            theta,
            tags,
            clamped_indices: vec![],
            error_projected: false,
            ridge_applied: false,
        }
    }

    #[test]
    fn no_signal_predicts_zero() {
        let n = 5;
        let basis = KernelBasis::with_identity(vec![DMatrix::identity(n, n)]).unwrap();
        let m = predictor_from_components(&basis, &[1.0, 0.0], 1.0).unwrap();
        assert_eq!(m, DMatrix::zeros(n, n));
    }

    #[test]
    fn scalar_shrinkage() {
        let n = 4;
        let basis = KernelBasis::with_identity(vec![DMatrix::identity(n, n)]).unwrap();
        let (phi, t1) = (2.0, 3.0);
        let fitted = FittedKnn::from_parts(
            basis.clone(),
            components(vec![phi, t1], basis.tags()),
            phi,
            None,
            KnnDiagnostics::default(),
        )
        .unwrap();
        let s = t1 / phi;
        let want = DMatrix::<f64>::identity(n, n) * (s / (s + 1.0));
        assert!((predictor_matrix(&fitted) - want).abs().max() < 1e-14);
        let y = DVector::from_vec(vec![1.0, -1.0, 2.0, 0.5]);
        let pe = prediction_error(&fitted, &y, None).unwrap();
        assert!((pe.plug_in - y.norm_squared() / (s + 1.0).powi(2)).abs() < 1e-12);
        assert!((pe.plug_in - pe.empirical).abs() < 1e-10);
    }

    #[test]
    fn eigenvector_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let n = 6;
        let k = random_kernel(n, 3, &mut rng);
        let basis = KernelBasis::with_identity(vec![k.values().clone()]).unwrap();
        let fitted = FittedKnn::from_parts(
            basis.clone(),
            components(vec![0.5, 1.5], basis.tags()),
            0.5,
            None,
            KnnDiagnostics::default(),
        )
        .unwrap();
        let eig = SymEigen::new(fitted.signal());
        let s = eig.max();
        let y: DVector<f64> = eig.vectors.column(n - 1).into_owned();
        let y_hat = predict(&fitted, &y, None).unwrap();
        assert!((y_hat - &y * (s / (s + 1.0))).amax() < 1e-12);
    }

    #[test]
    fn noiseless_intercept() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10;
        let k = random_kernel(n, 4, &mut rng);
        let spec = KnnSpec::new(vec![k], OutputKernelSpec::Identity).unwrap();
        let z = DMatrix::from_element(n, 1, 1.0);
        let y = DVector::from_element(n, 5.0);
        let fitted = fit(&spec, &y, Some(&z)).unwrap();
        assert!((fitted.beta().unwrap()[0] - 5.0).abs() < 1e-10);
        assert!(
            fitted.theta().theta.iter().all(|t| t.abs() < 1e-20),
            "{:?}",
            fitted.theta()
        );
        let y_hat = predict(&fitted, &y, Some(&z)).unwrap();
        assert!((y_hat - &y).amax() < 1e-9);
    }

    #[test]
    fn poly2_v_hat_bookkeeping() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let n = 12;
        let k = random_kernel(n, 5, &mut rng);
        let spec = KnnSpec::new(vec![k], OutputKernelSpec::poly2()).unwrap();
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let fitted = fit(&spec, &y, None).unwrap();
        let mut w = fitted.theta().theta.clone();
        w[0] = fitted.phi_used();
        let manual = fitted.basis().combine(&w);
        assert_eq!(fitted.v_hat(), &manual);
        assert_eq!(fitted.basis().len(), 4);
    }

    #[test]
    fn intercept_absorbs_constant_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let n = 15;
        let k = random_kernel(n, 5, &mut rng);
        let spec = KnnSpec::new(vec![k], OutputKernelSpec::poly2()).unwrap();
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = DMatrix::from_element(n, 1, 1.0);
        let fitted = fit(&spec, &y, Some(&z)).unwrap();
        assert_eq!(
            fitted.diagnostics().absorbed_by_fixed_effects,
            vec!["J".to_string()]
        );
        assert_eq!(fitted.theta().theta[1], 0.0);
        let pe = prediction_error(&fitted, &y, Some(&z)).unwrap();
        assert!((pe.plug_in - pe.empirical).abs() < 1e-10 * (1.0 + pe.empirical));
    }

    #[test]
    fn predict_rejects_mismatched_covariates() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let n = 8;
        let spec = KnnSpec::new(
            vec![random_kernel(n, 3, &mut rng)],
            OutputKernelSpec::Identity,
        )
        .unwrap();
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let fitted = fit(&spec, &y, None).unwrap();
        let z = DMatrix::from_element(n, 1, 1.0);
        assert!(matches!(
            predict(&fitted, &y, Some(&z)),
            Err(KnnError::State(_))
        ));
        assert!(matches!(
            predict(&fitted, &DVector::zeros(3), None),
            Err(KnnError::Dimension(_))
        ));
    }

    #[test]
    fn degenerate_design_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let n = 4;
        let spec = KnnSpec::new(
            vec![random_kernel(n, 2, &mut rng)],
            OutputKernelSpec::Identity,
        )
        .unwrap();
        let y = DVector::from_element(n, 1.0);
        let z = DMatrix::<f64>::identity(n, n);
        assert!(matches!(
            fit(&spec, &y, Some(&z)),
            Err(KnnError::DegenerateDesign { .. })
        ));
    }
}
