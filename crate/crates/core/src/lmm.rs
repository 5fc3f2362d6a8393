//! Linear mixed model baseline: `y = Zβ + Σ_l a_l + ε` with
//! `a_l ~ N(0, τ_l K_l)` and `ε ~ N(0, τ_err I)`, fitted by REML.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{KnnError, Result};
use crate::kernels::{KernelMatrix, PSD_TOL};
use crate::linalg::{self, SymEigen};
use crate::restrict::{self, aitken_beta};

pub const SCORE_TOL: f64 = 1e-6;
pub const MAX_ITER: usize = 100;
/// Floor for components after a step; keeps `V` invertible.
pub const COMPONENT_FLOOR: f64 = 1e-10;
const MAX_HALVINGS: usize = 10;
/// `τ_err` below this fraction of the largest component counts as degenerate.
pub const DEGENERACY_RATIO: f64 = 1e-8;
const INFO_RCOND: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub gradient_norm: f64,
    pub step_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedLmm {
    /// One component per kernel.
    pub tau: Vec<f64>,
    pub tau_err: f64,
    pub beta: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub kernel_labels: Vec<String>,
    pub trace: Vec<IterationRecord>,
    pub warnings: Vec<String>,
}

impl FittedLmm {
    pub fn beta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta)
    }

    /// Error variance tiny relative to the kernel components.
    pub fn is_degenerate(&self) -> bool {
        let top = self.tau.iter().copied().fold(self.tau_err, f64::max);
        self.tau_err < DEGENERACY_RATIO * top
    }
}

/// REML quantities at one parameter value, all in the contrast space.
struct RemlState {
    objective: f64,
    score: DVector<f64>,
    info: DMatrix<f64>,
}

struct RemlProblem {
    y: DVector<f64>,
    /// Kernels followed by the identity.
    mats: Vec<DMatrix<f64>>,
}

impl RemlProblem {
    fn covariance(&self, tau: &[f64]) -> DMatrix<f64> {
        let r = self.y.len();
        let mut v = DMatrix::zeros(r, r);
        for (m, &t) in self.mats.iter().zip(tau) {
            v += m * t;
        }
        v
    }

    fn objective(&self, tau: &[f64]) -> Option<f64> {
        let chol = self.covariance(tau).cholesky()?;
        let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let alpha = chol.solve(&self.y);
        Some(-0.5 * (logdet + self.y.dot(&alpha)))
    }

    fn state(&self, tau: &[f64]) -> Option<RemlState> {
        let v = self.covariance(tau);
        let chol = v.cholesky()?;
        let logdet: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let pinv = chol.inverse();
        let py = &pinv * &self.y;
        let pk: Vec<DMatrix<f64>> = self.mats.iter().map(|m| &pinv * m).collect();
        let k = self.mats.len();
        let mut score = DVector::zeros(k);
        let mut info = DMatrix::zeros(k, k);
        for i in 0..k {
            let quad = py.dot(&(&self.mats[i] * &py));
            score[i] = -0.5 * (pk[i].trace() - quad);
            for j in 0..=i {
                let t = 0.5 * pk[i].component_mul(&pk[j].transpose()).sum();
                info[(i, j)] = t;
                info[(j, i)] = t;
            }
        }
        Some(RemlState {
            objective: -0.5 * (logdet + self.y.dot(&py)),
            score,
            info,
        })
    }
}

/// Gradient with components pinned at the floor and pushing outward removed.
fn projected(score: &DVector<f64>, tau: &[f64]) -> DVector<f64> {
    DVector::from_fn(score.len(), |i, _| {
        if tau[i] <= COMPONENT_FLOOR * (1.0 + 1e-9) && score[i] < 0.0 {
            0.0
        } else {
            score[i]
        }
    })
}

fn scoring_direction(
    state: &RemlState,
    tau: &[f64],
    warned: &mut bool,
    warnings: &mut Vec<String>,
) -> DVector<f64> {
    let grad = projected(&state.score, tau);
    let free: Vec<usize> = (0..tau.len())
        .filter(|&i| grad[i] != 0.0 || tau[i] > COMPONENT_FLOOR * (1.0 + 1e-9))
        .collect();
    let mut step = DVector::zeros(tau.len());
    if free.is_empty() {
        return step;
    }
    let m = free.len();
    let mut info = DMatrix::from_fn(m, m, |a, b| state.info[(free[a], free[b])]);
    let g = DVector::from_fn(m, |a, _| grad[free[a]]);
    let eig = SymEigen::new(&info);
    if eig.min() <= INFO_RCOND * eig.max().abs().max(f64::MIN_POSITIVE) {
        if !*warned {
            warnings.push("information matrix is singular; ridge-damped scoring steps used".into());
            *warned = true;
        }
        let ridge = 1e-6 * info.diagonal().amax().max(f64::MIN_POSITIVE);
        info += DMatrix::identity(m, m) * ridge;
    }
    let delta = match info.clone().cholesky() {
        Some(c) => c.solve(&g),
        None => linalg::sym_pinv(&info, 1e-12) * g,
    };
    for (a, &i) in free.iter().enumerate() {
        step[i] = delta[a];
    }
    step
}

/// Fits `τ` by Fisher scoring on the REML log-likelihood, then `β̂` by GLS.
/// Non-convergence is reported through `converged`, not as an error.
pub fn reml_fit(y: &DVector<f64>, z: &DMatrix<f64>, kernels: &[KernelMatrix]) -> Result<FittedLmm> {
    let n = y.len();
    if z.nrows() != n || kernels.iter().any(|k| k.n() != n) {
        return Err(KnnError::Dimension(format!(
            "response has length {n}; Z or a kernel disagrees"
        )));
    }
    let restr = restrict::restriction_matrix(z)?;
    let r = restr.matrix();
    let rt = r.transpose();
    let mut mats: Vec<DMatrix<f64>> = kernels
        .iter()
        .map(|k| {
            let m = r * k.values() * &rt;
            (&m + m.transpose()) * 0.5
        })
        .collect();
    mats.push(DMatrix::identity(r.nrows(), r.nrows()));
    let problem = RemlProblem { y: r * y, mats };

    let k = problem.mats.len();
    let var_y = linalg::sample_variance(y);
    let start = if var_y > 0.0 { var_y / k as f64 } else { 1.0 };
    let mut tau = vec![start; k];
    let mut trace = Vec::new();
    let mut warnings = Vec::new();
    let mut warned = false;
    let mut converged = false;
    let mut iterations = 0;

    let mut state = problem
        .state(&tau)
        .ok_or_else(|| KnnError::Numeric("initial covariance is not positive definite".into()))?;
    loop {
        let grad_norm = projected(&state.score, &tau).amax();
        if grad_norm < SCORE_TOL {
            converged = true;
            trace.push(IterationRecord {
                iteration: iterations,
                objective: state.objective,
                gradient_norm: grad_norm,
                step_scale: 0.0,
            });
            break;
        }
        if iterations >= MAX_ITER {
            trace.push(IterationRecord {
                iteration: iterations,
                objective: state.objective,
                gradient_norm: grad_norm,
                step_scale: 0.0,
            });
            warnings.push(format!("no convergence after {MAX_ITER} iterations"));
            break;
        }
        let delta = scoring_direction(&state, &tau, &mut warned, &mut warnings);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<f64> = tau
                .iter()
                .zip(delta.iter())
                .map(|(t, d)| (t + scale * d).max(COMPONENT_FLOOR))
                .collect();
            if let Some(obj) = problem.objective(&cand) {
                if obj >= state.objective - 1e-12 * state.objective.abs() {
                    accepted = Some(cand);
                    break;
                }
            }
            scale *= 0.5;
        }
        trace.push(IterationRecord {
            iteration: iterations,
            objective: state.objective,
            gradient_norm: grad_norm,
            step_scale: scale,
        });
        iterations += 1;
        let Some(cand) = accepted else {
            warnings.push("step halving failed to improve the REML objective".into());
            break;
        };
        tau = cand;
        state = match problem.state(&tau) {
            Some(s) => s,
            None => {
                warnings.push("covariance lost positive definiteness".into());
                break;
            }
        };
    }

    let tau_err = tau[k - 1];
    let v = combine(kernels, &tau[..k - 1], tau_err);
    let beta = match aitken_beta(y, z, &v) {
        Ok(fit) => fit.beta,
        Err(_) => {
            warnings.push("fitted covariance is singular; beta from ordinary least squares".into());
            aitken_beta(y, z, &DMatrix::identity(n, n))?.beta
        }
    };
    Ok(FittedLmm {
        tau: tau[..k - 1].to_vec(),
        tau_err,
        beta: beta.iter().copied().collect(),
        converged,
        iterations,
        kernel_labels: kernels.iter().map(|k| k.label().to_string()).collect(),
        trace,
        warnings,
    })
}

fn genetic_covariance(kernels: &[KernelMatrix], tau: &[f64], n: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(n, n);
    for (k, &t) in kernels.iter().zip(tau) {
        g += k.values() * t;
    }
    g
}

fn combine(kernels: &[KernelMatrix], tau: &[f64], tau_err: f64) -> DMatrix<f64> {
    let n = kernels.first().map(|k| k.n()).unwrap_or(0);
    genetic_covariance(kernels, tau, n) + DMatrix::identity(n, n) * tau_err
}

/// `G (G + τ_err I)⁻¹` with `G = Σ τ_l K_l`; `None` if `G + τ_err I` is singular.
pub fn blup_matrix(
    kernels: &[KernelMatrix],
    tau: &[f64],
    tau_err: f64,
) -> Result<Option<DMatrix<f64>>> {
    let n = kernels
        .first()
        .map(|k| k.n())
        .ok_or_else(|| KnnError::Dimension("no kernels".into()))?;
    if tau.len() != kernels.len() {
        return Err(KnnError::Dimension(format!(
            "{} components for {} kernels",
            tau.len(),
            kernels.len()
        )));
    }
    let g = genetic_covariance(kernels, tau, n);
    let v = &g + DMatrix::identity(n, n) * tau_err;
    Ok(v.cholesky().map(|c| {
        let m = c.solve(&g);
        (&m + m.transpose()) * 0.5
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blup {
    pub prediction: DVector<f64>,
    /// Error component effectively zero: the BLUP reproduces `y`.
    pub degenerate: bool,
}

/// `Zβ̂ + G (G + τ̂_err I)⁻¹ (y − Zβ̂)`.
pub fn blup(
    fitted: &FittedLmm,
    y: &DVector<f64>,
    z: &DMatrix<f64>,
    kernels: &[KernelMatrix],
) -> Result<Blup> {
    let n = y.len();
    if z.shape() != (n, fitted.beta.len())
        || kernels.len() != fitted.tau.len()
        || kernels.iter().any(|k| k.n() != n)
    {
        return Err(KnnError::Dimension(
            "inputs do not match the fitted model".into(),
        ));
    }
    let fixed = z * fitted.beta_vector();
    let degenerate = fitted.is_degenerate();
    if kernels.is_empty() {
        return Ok(Blup {
            prediction: fixed,
            degenerate,
        });
    }
    match blup_matrix(kernels, &fitted.tau, fitted.tau_err)? {
        Some(m) => {
            let resid = y - &fixed;
            Ok(Blup {
                prediction: fixed + m * resid,
                degenerate,
            })
        }
        None => Ok(Blup {
            prediction: y.clone(),
            degenerate: true,
        }),
    }
}

/// `φ Σ_i (σ̃² λ_i + 1)⁻¹`.
pub fn pe_closed_form(sigma_tilde_sq: f64, eigenvalues: &[f64], phi: f64) -> Result<f64> {
    if !(phi > 0.0) {
        return Err(KnnError::Domain(format!("phi must be positive, got {phi}")));
    }
    if !(sigma_tilde_sq >= 0.0) {
        return Err(KnnError::Domain(format!(
            "sigma_tilde_sq must be >= 0, got {sigma_tilde_sq}"
        )));
    }
    let top = eigenvalues.iter().copied().fold(1.0, f64::max);
    if let Some(&bad) = eigenvalues
        .iter()
        .find(|&&l| l < -PSD_TOL * top || l.is_nan())
    {
        return Err(KnnError::Domain(format!("negative eigenvalue {bad}")));
    }
    Ok(phi
        * eigenvalues
            .iter()
            .map(|&l| 1.0 / (sigma_tilde_sq * l.max(0.0) + 1.0))
            .sum::<f64>())
}
