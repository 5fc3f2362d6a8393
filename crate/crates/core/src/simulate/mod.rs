//! Scenario generators for simulated phenotypes, and the hidden-layer
//! sampler used to check convergence of `f[m⁻¹UUᵀ]` to `f[Σ]`.
//!
//! Every generator is a pure function of its inputs and a `u64` seed.

mod harness;

pub use harness::{
    median, run_monte_carlo, summarize, ResultRow, ResultsTable, Scenario, SimulationConfig,
    SummaryRow,
};

use std::f64::consts::PI;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, ChiSquared, Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{KnnError, Result};
use crate::genotype::{recode, Coding, GenotypeMatrix, Inheritance};
use crate::kernels::{product_kernel, KernelMatrix, OutputKernelSpec};
use crate::linalg::SymEigen;

const STREAM_RESPONSE: u64 = 1;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Independent SNPs with MAF `~ U(0.05, 0.5)` and `Binomial(2, MAF)` calls.
pub fn gen_genotypes(n: usize, p: usize, seed: u64) -> Result<GenotypeMatrix> {
    Ok(gen_genotypes_with_maf(n, p, seed)?.0)
}

/// [`gen_genotypes`] together with the drawn per-SNP allele frequencies.
pub fn gen_genotypes_with_maf(n: usize, p: usize, seed: u64) -> Result<(GenotypeMatrix, Vec<f64>)> {
    if n < 2 || p < 1 {
        return Err(KnnError::Dimension(format!(
            "need n >= 2 and p >= 1, got n = {n}, p = {p}"
        )));
    }
    let mut rng = rng_for(seed, 0);
    let mut values = DMatrix::zeros(n, p);
    let mut mafs = Vec::with_capacity(p);
    for j in 0..p {
        let maf = rng.random_range(0.05..0.5);
        mafs.push(maf);
        let dist = Binomial::new(2, maf).map_err(|e| KnnError::Numeric(e.to_string()))?;
        for i in 0..n {
            values[(i, j)] = dist.sample(&mut rng) as f64;
        }
    }
    Ok((GenotypeMatrix::from_codes(values)?, mafs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NonlinearFn {
    Linear,
    Sine,
    Invlogit,
    Quadratic,
}

impl NonlinearFn {
    pub const ALL: [NonlinearFn; 4] = [
        NonlinearFn::Linear,
        NonlinearFn::Sine,
        NonlinearFn::Invlogit,
        NonlinearFn::Quadratic,
    ];

    pub fn apply(self, x: f64) -> f64 {
        match self {
            NonlinearFn::Linear => x,
            NonlinearFn::Sine => (2.0 * PI * x).sin(),
            NonlinearFn::Invlogit => 1.0 / (1.0 + (-x).exp()),
            NonlinearFn::Quadratic => x * x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NonlinearFn::Linear => "linear",
            NonlinearFn::Sine => "sine",
            NonlinearFn::Invlogit => "invlogit",
            NonlinearFn::Quadratic => "quadratic",
        }
    }
}

impl FromStr for NonlinearFn {
    type Err = KnnError;

    fn from_str(s: &str) -> Result<Self> {
        NonlinearFn::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| KnnError::UnknownName {
                kind: "nonlinear function",
                name: s.to_string(),
                valid: "linear, sine, invlogit, quadratic".into(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorDist {
    T2,
    Chisq1,
}

impl ErrorDist {
    pub fn name(self) -> &'static str {
        match self {
            ErrorDist::T2 => "t2",
            ErrorDist::Chisq1 => "chisq1",
        }
    }

    /// `t₂` or the centered `χ²₁ − 1`.
    pub fn sample_vec(self, len: usize, rng: &mut impl Rng) -> DVector<f64> {
        match self {
            ErrorDist::T2 => {
                let d = StudentT::new(2.0).expect("valid degrees of freedom");
                DVector::from_fn(len, |_, _| d.sample(rng))
            }
            ErrorDist::Chisq1 => {
                let d = ChiSquared::new(1.0).expect("valid degrees of freedom");
                DVector::from_fn(len, |_, _| d.sample(rng) - 1.0)
            }
        }
    }
}

impl FromStr for ErrorDist {
    type Err = KnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t2" => Ok(ErrorDist::T2),
            "chisq1" => Ok(ErrorDist::Chisq1),
            other => Err(KnnError::UnknownName {
                kind: "error distribution",
                name: other.to_string(),
                valid: "t2, chisq1".into(),
            }),
        }
    }
}

/// A simulated response and the pieces it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedResponse {
    pub y: DVector<f64>,
    /// Covariates a model should adjust for.
    pub z: DMatrix<f64>,
    /// The latent Gaussian effect `a` (zero for the interaction scenario).
    pub latent: DVector<f64>,
    /// The genetic contribution to `y`, e.g. `f(a)`.
    pub genetic: DVector<f64>,
    pub noise: DVector<f64>,
}

fn standard_normal(len: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

/// `Σ^{1/2} w` with `w ~ N(0, I)` columns; rank-deficient `Σ` simply has
/// zero-variance directions.
fn gaussian_with_covariance(sigma: &DMatrix<f64>, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let root = SymEigen::new(sigma).recompose_with(|l| l.max(0.0).sqrt());
    let n = sigma.nrows();
    let w = DMatrix::from_fn(n, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    root * w
}

fn latent_effect(kernel: &KernelMatrix, rng: &mut impl Rng) -> DVector<f64> {
    gaussian_with_covariance(kernel.values(), 1, rng)
        .column(0)
        .into_owned()
}

fn require_additive(g: &GenotypeMatrix) -> Result<&DMatrix<f64>> {
    if g.coding() != Coding::Additive {
        return Err(KnnError::State(
            "scenario generators expect additive genotypes".into(),
        ));
    }
    g.complete_values()
}

/// `y = 1 + 2ζ + f(a) + ε` with `a ~ N(0, p⁻¹GGᵀ)`; with `noise = false`
/// both `ζ` and `ε` are zero.
pub fn gen_nonlinear_with(
    g: &GenotypeMatrix,
    f: NonlinearFn,
    seed: u64,
    noise: bool,
) -> Result<SimulatedResponse> {
    let x = require_additive(g)?;
    let n = g.n_samples();
    let mut rng = rng_for(seed, STREAM_RESPONSE);
    let latent = latent_effect(&product_kernel(x)?, &mut rng);
    let (zeta, eps) = if noise {
        (standard_normal(n, &mut rng), standard_normal(n, &mut rng))
    } else {
        (DVector::zeros(n), DVector::zeros(n))
    };
    let genetic = latent.map(|v| f.apply(v));
    let y = DVector::from_element(n, 1.0) + &zeta * 2.0 + &genetic + &eps;
    let z = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { zeta[i] });
    Ok(SimulatedResponse {
        y,
        z,
        latent,
        genetic,
        noise: eps,
    })
}

pub fn gen_nonlinear(g: &GenotypeMatrix, f: NonlinearFn, seed: u64) -> Result<SimulatedResponse> {
    gen_nonlinear_with(g, f, seed, true)
}

/// Sum of `g_j ∘ g_k` over all pairs `j < k` of the given columns.
pub fn interaction_effect(x: &DMatrix<f64>, causal: &[usize]) -> DVector<f64> {
    let mut f = DVector::zeros(x.nrows());
    for (a, &j) in causal.iter().enumerate() {
        for &k in &causal[a + 1..] {
            f += x.column(j).component_mul(&x.column(k));
        }
    }
    f
}

/// `y = Σ_{j<k} g_j ∘ g_k + ε` over `n_causal` random SNPs; the mean is
/// adjusted by an intercept column in `z`.
pub fn gen_interaction(
    g: &GenotypeMatrix,
    n_causal: usize,
    seed: u64,
) -> Result<SimulatedResponse> {
    let x = require_additive(g)?;
    let (n, p) = x.shape();
    if p < n_causal {
        return Err(KnnError::Dimension(format!(
            "{n_causal} causal SNPs requested from {p}"
        )));
    }
    let mut rng = rng_for(seed, STREAM_RESPONSE);
    let mut causal = index::sample(&mut rng, p, n_causal).into_vec();
    causal.sort_unstable();
    let genetic = interaction_effect(x, &causal);
    let eps = standard_normal(n, &mut rng);
    Ok(SimulatedResponse {
        y: &genetic + &eps,
        z: DMatrix::from_element(n, 1, 1.0),
        latent: DVector::zeros(n),
        genetic,
        noise: eps,
    })
}

/// `y = a + ε` with `a ~ N(0, p⁻¹G′G′ᵀ)` for the recoded genotypes `G′`.
pub fn gen_coding(g: &GenotypeMatrix, mode: Inheritance, seed: u64) -> Result<SimulatedResponse> {
    let recoded = recode(g, mode)?;
    let x = recoded.complete_values()?;
    let n = g.n_samples();
    let mut rng = rng_for(seed, STREAM_RESPONSE);
    let latent = latent_effect(&product_kernel(x)?, &mut rng);
    let eps = standard_normal(n, &mut rng);
    Ok(SimulatedResponse {
        y: &latent + &eps,
        z: DMatrix::from_element(n, 1, 1.0),
        genetic: latent.clone(),
        latent,
        noise: eps,
    })
}

/// `y = 1 + 2ζ + a + ε` with heavy-tailed or skewed `ε`.
pub fn gen_error_dist(g: &GenotypeMatrix, dist: ErrorDist, seed: u64) -> Result<SimulatedResponse> {
    let x = require_additive(g)?;
    let n = g.n_samples();
    let mut rng = rng_for(seed, STREAM_RESPONSE);
    let latent = latent_effect(&product_kernel(x)?, &mut rng);
    let zeta = standard_normal(n, &mut rng);
    let eps = dist.sample_vec(n, &mut rng);
    let y = DVector::from_element(n, 1.0) + &zeta * 2.0 + &latent + &eps;
    let z = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { zeta[i] });
    Ok(SimulatedResponse {
        y,
        z,
        genetic: latent.clone(),
        latent,
        noise: eps,
    })
}

/// `f[m⁻¹UUᵀ]` for `U` with `m` iid `N(0, Σ)` columns.
pub fn sample_hidden_kernel(
    sigma: &DMatrix<f64>,
    m: usize,
    f: &OutputKernelSpec,
    seed: u64,
) -> Result<KernelMatrix> {
    if m < 1 {
        return Err(KnnError::Dimension("need at least one hidden unit".into()));
    }
    if !sigma.is_square() {
        return Err(KnnError::Dimension("covariance must be square".into()));
    }
    f.validate()?;
    let mut rng = rng_for(seed, 0);
    let u = gaussian_with_covariance(sigma, m, &mut rng);
    let gram = (&u * u.transpose()) / m as f64;
    KernelMatrix::new(f.apply_matrix(&gram), "hidden")
}

/// `max |f[m⁻¹UUᵀ] − f[Σ]|`.
pub fn hidden_kernel_deviation(
    sigma: &DMatrix<f64>,
    m: usize,
    f: &OutputKernelSpec,
    seed: u64,
) -> Result<f64> {
    let k = sample_hidden_kernel(sigma, m, f, seed)?;
    Ok((k.values() - f.apply_matrix(sigma)).amax())
}
