//! Output-kernel expansion into estimable covariance components.
//!
//! With hidden-layer covariance `Σ = Σ_l ξ_l K_l` and output map `f`, the
//! marginal covariance is approximated by `τ f[Σ] + φI`. When `f` separates
//! into `Σ_α g_α(ξ) h_α[K]`, each `h_α` becomes a basis matrix whose variance
//! component `θ_α = τ g_α(ξ)` is estimable on its own.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::KernelMatrix;
use crate::error::{KnnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OutputKernelSpec {
    /// `f(x) = x`
    Identity,
    /// `f(x) = (c + x)^d`
    Polynomial { c: f64, d: u32 },
}

impl OutputKernelSpec {
    pub fn poly2() -> Self {
        OutputKernelSpec::Polynomial { c: 1.0, d: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OutputKernelSpec::Identity => Ok(()),
            OutputKernelSpec::Polynomial { c, d } => {
                if !(c >= 0.0) || !c.is_finite() {
                    return Err(KnnError::Domain(format!(
                        "polynomial offset c = {c} must be >= 0"
                    )));
                }
                if d < 1 {
                    return Err(KnnError::Domain("polynomial degree must be >= 1".into()));
                }
                Ok(())
            }
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            OutputKernelSpec::Identity => x,
            OutputKernelSpec::Polynomial { c, d } => (c + x).powi(d as i32),
        }
    }

    /// Entrywise `f[M]`.
    pub fn apply_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        m.map(|v| self.apply(v))
    }

    /// Entrywise `(f − ι)[M]`.
    pub fn apply_minus_identity(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        m.map(|v| self.apply(v) - v)
    }

    pub fn name(&self) -> String {
        match *self {
            OutputKernelSpec::Identity => "product".into(),
            OutputKernelSpec::Polynomial { c, d } if c == 1.0 => format!("poly{d}"),
            OutputKernelSpec::Polynomial { c, d } => format!("poly{d}(c={c})"),
        }
    }
}

impl std::str::FromStr for OutputKernelSpec {
    type Err = KnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "product" | "identity" | "linear" => Ok(OutputKernelSpec::Identity),
            "poly1" => Ok(OutputKernelSpec::Polynomial { c: 1.0, d: 1 }),
            "poly2" => Ok(OutputKernelSpec::poly2()),
            other => Err(KnnError::UnknownName {
                kind: "output kernel",
                name: other.to_string(),
                valid: "product, identity, poly1, poly2".into(),
            }),
        }
    }
}

/// Symbolic coefficient map `g_α(ξ)` attached to a basis matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Coefficient {
    /// Error variance `φ` on the identity.
    Phi,
    /// `scale · τ · Π_l ξ_l^{e_l}`.
    Tau { scale: f64, xi_exponents: Vec<u32> },
}

impl Coefficient {
    pub fn evaluate(&self, phi: f64, tau: f64, xi: &[f64]) -> f64 {
        match self {
            Coefficient::Phi => phi,
            Coefficient::Tau {
                scale,
                xi_exponents,
            } => {
                let prod: f64 = xi_exponents
                    .iter()
                    .zip(xi)
                    .map(|(&e, &x)| x.powi(e as i32))
                    .product();
                scale * tau * prod
            }
        }
    }
}

impl fmt::Display for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Phi => write!(f, "phi"),
            Coefficient::Tau {
                scale,
                xi_exponents,
            } => {
                if *scale != 1.0 {
                    write!(f, "{scale}*")?;
                }
                write!(f, "tau")?;
                for (l, &e) in xi_exponents.iter().enumerate() {
                    match e {
                        0 => {}
                        1 => write!(f, "*xi{}", l + 1)?,
                        _ => write!(f, "*xi{}^{}", l + 1, e)?,
                    }
                }
                Ok(())
            }
        }
    }
}

/// Provenance of one basis matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisTerm {
    /// `I`, `J`, `K1`, `K1∘K2`, ...
    pub tag: String,
    /// Indices of the input kernels multiplied together (empty for I and J).
    pub factors: Vec<usize>,
    pub coefficient: Coefficient,
}

#[derive(Debug, Clone)]
pub struct KernelBasis {
    matrices: Vec<DMatrix<f64>>,
    terms: Vec<BasisTerm>,
}

impl KernelBasis {
    /// Assembles a basis from explicit matrices. The first must be the identity.
    pub fn from_parts(matrices: Vec<DMatrix<f64>>, terms: Vec<BasisTerm>) -> Result<Self> {
        if matrices.is_empty() || matrices.len() != terms.len() {
            return Err(KnnError::Dimension(format!(
                "{} basis matrices with {} terms",
                matrices.len(),
                terms.len()
            )));
        }
        let n = matrices[0].nrows();
        if matrices[0] != DMatrix::identity(n, n) {
            return Err(KnnError::State(
                "first basis matrix must be the identity".into(),
            ));
        }
        let mut sym = Vec::with_capacity(matrices.len());
        for m in &matrices {
            if m.shape() != (n, n) {
                return Err(KnnError::Dimension(format!(
                    "basis matrix is {}x{}, expected {n}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            sym.push(crate::linalg::symmetrized(m)?);
        }
        Ok(KernelBasis {
            matrices: sym,
            terms,
        })
    }

    /// A basis from raw matrices with positional tags `I, H1, H2, ...`; the
    /// identity is prepended.
    pub fn with_identity(extra: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = extra.first().map(|m| m.nrows()).ok_or_else(|| {
            KnnError::Dimension("need at least one non-error basis matrix".into())
        })?;
        let mut matrices = vec![DMatrix::identity(n, n)];
        let mut terms = vec![BasisTerm {
            tag: "I".into(),
            factors: vec![],
            coefficient: Coefficient::Phi,
        }];
        for (l, m) in extra.into_iter().enumerate() {
            matrices.push(m);
            terms.push(BasisTerm {
                tag: format!("H{}", l + 1),
                factors: vec![l],
                coefficient: Coefficient::Tau {
                    scale: 1.0,
                    xi_exponents: vec![],
                },
            });
        }
        Self::from_parts(matrices, terms)
    }

    pub fn identity_only(n: usize) -> Self {
        KernelBasis {
            matrices: vec![DMatrix::identity(n, n)],
            terms: vec![BasisTerm {
                tag: "I".into(),
                factors: vec![],
                coefficient: Coefficient::Phi,
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn n(&self) -> usize {
        self.matrices[0].nrows()
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    pub fn terms(&self) -> &[BasisTerm] {
        &self.terms
    }

    pub fn tags(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.tag.clone()).collect()
    }

    /// `Σ_l w_l H_l`.
    pub fn combine(&self, weights: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        let mut out = DMatrix::zeros(n, n);
        for (m, &w) in self.matrices.iter().zip(weights) {
            if w != 0.0 {
                out += m * w;
            }
        }
        out
    }

    /// `Σ_l g_l(φ, τ, ξ) H_l`, i.e. `τ f[Σ ξ_l K_l] + φ I` for an expanded basis.
    pub fn reconstruct(&self, phi: f64, tau: f64, xi: &[f64]) -> DMatrix<f64> {
        let w: Vec<f64> = self
            .terms
            .iter()
            .map(|t| t.coefficient.evaluate(phi, tau, xi))
            .collect();
        self.combine(&w)
    }

    /// Applies `m ↦ T m Tᵀ` to every matrix, keeping tags.
    pub fn map_matrices(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> KernelBasis {
        KernelBasis {
            matrices: self
                .matrices
                .iter()
                .map(|m| {
                    let t = f(m);
                    (&t + t.transpose()) * 0.5
                })
                .collect(),
            terms: self.terms.clone(),
        }
    }

    /// Keeps the components at `keep` (must include 0).
    pub fn subset(&self, keep: &[usize]) -> KernelBasis {
        KernelBasis {
            matrices: keep.iter().map(|&i| self.matrices[i].clone()).collect(),
            terms: keep.iter().map(|&i| self.terms[i].clone()).collect(),
        }
    }
}

fn xi_exponents(l_count: usize, factors: &[usize]) -> Vec<u32> {
    let mut e = vec![0u32; l_count];
    for &f in factors {
        e[f] += 1;
    }
    e
}

/// Expands `f[Σ_l ξ_l K_l]` into basis matrices for degree one or two.
///
/// Identity gives `[I, K_1..K_L]`. Degree two gives
/// `[I, J, K_1..K_L, K_l∘K_l' (l ≤ l')]`, that is `1 + 1 + L + L(L+1)/2`
/// matrices; degree one gives `[I, J, K_1..K_L]`.
pub fn expand_output_basis(
    inputs: &[KernelMatrix],
    spec: &OutputKernelSpec,
) -> Result<KernelBasis> {
    spec.validate()?;
    let l_count = inputs.len();
    if l_count == 0 {
        return Err(KnnError::Dimension(
            "output expansion needs at least one input kernel".into(),
        ));
    }
    let n = inputs[0].n();
    if inputs.iter().any(|k| k.n() != n) {
        return Err(KnnError::Dimension(
            "input kernels differ in dimension".into(),
        ));
    }
    let mut matrices = vec![DMatrix::identity(n, n)];
    let mut terms = vec![BasisTerm {
        tag: "I".into(),
        factors: vec![],
        coefficient: Coefficient::Phi,
    }];
    let tau = |scale: f64, factors: &[usize]| Coefficient::Tau {
        scale,
        xi_exponents: xi_exponents(l_count, factors),
    };
    let push_linear = |matrices: &mut Vec<DMatrix<f64>>, terms: &mut Vec<BasisTerm>, scale: f64| {
        for (l, k) in inputs.iter().enumerate() {
            matrices.push(k.values().clone());
            terms.push(BasisTerm {
                tag: format!("K{}", l + 1),
                factors: vec![l],
                coefficient: tau(scale, &[l]),
            });
        }
    };
    match *spec {
        OutputKernelSpec::Identity => push_linear(&mut matrices, &mut terms, 1.0),
        OutputKernelSpec::Polynomial { c, d } => {
            if d > 2 {
                return Err(KnnError::UnsupportedDegree(d));
            }
            let c_pow = c.powi(d as i32);
            matrices.push(DMatrix::from_element(n, n, 1.0));
            terms.push(BasisTerm {
                tag: "J".into(),
                factors: vec![],
                coefficient: tau(c_pow, &[]),
            });
            // (c + x)^d: linear coefficient d·c^{d-1}
            let lin = d as f64 * c.powi(d as i32 - 1);
            push_linear(&mut matrices, &mut terms, lin);
            if d == 2 {
                for a in 0..l_count {
                    for b in a..l_count {
                        matrices.push(inputs[a].values().component_mul(inputs[b].values()));
                        let scale = if a == b { 1.0 } else { 2.0 };
                        terms.push(BasisTerm {
                            tag: format!("K{}∘K{}", a + 1, b + 1),
                            factors: vec![a, b],
                            coefficient: tau(scale, &[a, b]),
                        });
                    }
                }
            }
        }
    }
    Ok(KernelBasis { matrices, terms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::product_kernel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_kernel(n: usize, rng: &mut impl Rng) -> KernelMatrix {
        product_kernel(&DMatrix::from_fn(n, 4, |_, _| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn single_input_poly2_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = random_kernel(5, &mut rng);
        let basis =
            expand_output_basis(std::slice::from_ref(&k), &OutputKernelSpec::poly2()).unwrap();
        assert_eq!(basis.tags(), vec!["I", "J", "K1", "K1∘K1"]);
        let coefs: Vec<String> = basis
            .terms()
            .iter()
            .map(|t| t.coefficient.to_string())
            .collect();
        assert_eq!(coefs, vec!["phi", "tau", "2*tau*xi1", "tau*xi1^2"]);
        assert_eq!(basis.matrices()[1], DMatrix::from_element(5, 5, 1.0));
        assert_eq!(basis.matrices()[3], k.values().component_mul(k.values()));
    }

    #[test]
    fn identity_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ks = [random_kernel(4, &mut rng), random_kernel(4, &mut rng)];
        let basis = expand_output_basis(&ks, &OutputKernelSpec::Identity).unwrap();
        assert_eq!(basis.tags(), vec!["I", "K1", "K2"]);
        let (phi, tau, xi) = (0.7, 1.3, [0.4, 2.0]);
        let expect = (ks[0].values() * xi[0] + ks[1].values() * xi[1]) * tau
            + DMatrix::<f64>::identity(4, 4) * phi;
        assert!((basis.reconstruct(phi, tau, &xi) - expect).abs().max() < 1e-12);
    }

    #[test]
    fn two_input_poly2_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ks = [random_kernel(6, &mut rng), random_kernel(6, &mut rng)];
        let basis = expand_output_basis(&ks, &OutputKernelSpec::poly2()).unwrap();
        assert_eq!(basis.len(), 7);
        for _ in 0..10 {
            let xi = [rng.random_range(0.1..2.0), rng.random_range(0.1..2.0)];
            let tau = rng.random_range(0.1..2.0);
            let got = basis.reconstruct(0.0, tau, &xi);
            let sigma = ks[0].values() * xi[0] + ks[1].values() * xi[1];
            // Entrywise oracle: τ (1 + σ_ij)^2.
            for i in 0..6 {
                for j in 0..6 {
                    let want = tau * (1.0 + sigma[(i, j)]).powi(2);
                    assert!((got[(i, j)] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn degree_one_with_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let k = random_kernel(4, &mut rng);
        let spec = OutputKernelSpec::Polynomial { c: 0.5, d: 1 };
        let basis = expand_output_basis(std::slice::from_ref(&k), &spec).unwrap();
        let got = basis.reconstruct(0.0, 2.0, &[3.0]);
        let want = spec.apply_matrix(&(k.values() * 3.0)) * 2.0;
        assert!((got - want).abs().max() < 1e-12);
    }

    #[test]
    fn expansion_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let k = random_kernel(4, &mut rng);
        let cubic = OutputKernelSpec::Polynomial { c: 1.0, d: 3 };
        assert!(matches!(
            expand_output_basis(&[k], &cubic),
            Err(KnnError::UnsupportedDegree(3))
        ));
        assert!(matches!(
            expand_output_basis(&[], &OutputKernelSpec::Identity),
            Err(KnnError::Dimension(_))
        ));
    }
}
