//! Fixed-effect handling: restriction to error contrasts, generalized least
//! squares and the oblique projection `P_V`.

use nalgebra::{DMatrix, DVector};

use crate::error::{KnnError, Result};
use crate::kernels::KernelBasis;
use crate::linalg;

/// Relative tolerance for numerical rank of the design.
pub const RANK_TOL: f64 = 1e-10;
const PINV_TOL: f64 = 1e-10;

/// Rows form an orthonormal basis of the orthogonal complement of `col(Z)`.
#[derive(Debug, Clone)]
pub struct Restriction {
    r: DMatrix<f64>,
    z_rank: usize,
}

impl Restriction {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn z_rank(&self) -> usize {
        self.z_rank
    }

    pub fn residual_dim(&self) -> usize {
        self.r.nrows()
    }
}

struct PivotedQr {
    /// Householder vectors, one per accepted pivot.
    reflectors: Vec<DVector<f64>>,
    n: usize,
}

impl PivotedQr {
    fn new(z: &DMatrix<f64>) -> Self {
        let (n, q) = z.shape();
        let mut a = z.clone();
        let tol = RANK_TOL * z.norm().max(f64::MIN_POSITIVE);
        let mut reflectors = Vec::new();
        let mut cols: Vec<usize> = (0..q).collect();
        for k in 0..q.min(n) {
            // Pivot on the largest remaining column norm.
            let (pos, best) = cols[k..]
                .iter()
                .enumerate()
                .map(|(i, &c)| (i + k, a.view_range(k.., c..c + 1).norm()))
                .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if best <= tol {
                break;
            }
            cols.swap(k, pos);
            let c = cols[k];
            let x: DVector<f64> = a.view_range(k.., c..c + 1).column(0).into_owned();
            let alpha = if x[0] >= 0.0 { -best } else { best };
            let mut v = x;
            v[0] -= alpha;
            let vnorm2 = v.norm_squared();
            if vnorm2 > 0.0 {
                for &cj in &cols[k..] {
                    let mut col = a.view_range_mut(k.., cj..cj + 1);
                    let d = v.dot(&col.column(0)) * 2.0 / vnorm2;
                    col.column_mut(0).axpy(-d, &v, 1.0);
                }
            }
            reflectors.push(v);
        }
        PivotedQr { reflectors, n }
    }

    fn rank(&self) -> usize {
        self.reflectors.len()
    }

    /// Full n×n orthogonal factor.
    fn full_q(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut q = DMatrix::identity(n, n);
        for (k, v) in self.reflectors.iter().enumerate().rev() {
            let vnorm2 = v.norm_squared();
            if vnorm2 == 0.0 {
                continue;
            }
            for j in 0..n {
                let mut col = q.view_range_mut(k.., j..j + 1);
                let d = v.dot(&col.column(0)) * 2.0 / vnorm2;
                col.column_mut(0).axpy(-d, v, 1.0);
            }
        }
        q
    }
}

pub fn column_rank(z: &DMatrix<f64>) -> usize {
    PivotedQr::new(z).rank()
}

/// Trailing columns of the full QR factor of `Z`, transposed.
pub fn restriction_matrix(z: &DMatrix<f64>) -> Result<Restriction> {
    let n = z.nrows();
    let qr = PivotedQr::new(z);
    let rank = qr.rank();
    if rank >= n {
        return Err(KnnError::DegenerateDesign { rank, n });
    }
    let q = qr.full_q();
    let r = q.columns(rank, n - rank).transpose();
    Ok(Restriction { r, z_rank: rank })
}

/// `ỹ = R y` and every basis matrix mapped to `R H Rᵀ`, with `R I Rᵀ = I_r`.
pub fn transform(
    y: &DVector<f64>,
    basis: &KernelBasis,
    restr: &Restriction,
) -> Result<(DVector<f64>, KernelBasis)> {
    let r = &restr.r;
    if y.len() != r.ncols() || basis.n() != r.ncols() {
        return Err(KnnError::Dimension(format!(
            "restriction is {}x{}, response {} and basis {}",
            r.nrows(),
            r.ncols(),
            y.len(),
            basis.n()
        )));
    }
    let rt = r.transpose();
    let mut matrices: Vec<DMatrix<f64>> = basis.matrices().iter().map(|h| r * h * &rt).collect();
    matrices[0] = DMatrix::identity(r.nrows(), r.nrows());
    for m in matrices.iter_mut() {
        *m = (&*m + m.transpose()) * 0.5;
    }
    let tb = KernelBasis::from_parts(matrices, basis.terms().to_vec())?;
    Ok((r * y, tb))
}

#[derive(Debug, Clone)]
pub struct AitkenFit {
    pub beta: DVector<f64>,
    /// `Z β̂`, invariant to the choice of generalized inverse.
    pub fitted: DVector<f64>,
}

fn check_design(y: &DVector<f64>, z: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<()> {
    let n = z.nrows();
    if y.len() != n || v.shape() != (n, n) {
        return Err(KnnError::Dimension(format!(
            "y {}, Z {}x{}, V {}x{}",
            y.len(),
            n,
            z.ncols(),
            v.nrows(),
            v.ncols()
        )));
    }
    Ok(())
}

fn v_inverse(v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !linalg::is_symmetric(v) {
        return Err(KnnError::NotPositiveDefinite);
    }
    linalg::spd_inverse(v).ok_or(KnnError::NotPositiveDefinite)
}

/// `β̂ = (Zᵀ V⁻¹ Z)⁻ Zᵀ V⁻¹ y` with a pseudo-inverse for rank-deficient `Z`.
pub fn aitken_beta(y: &DVector<f64>, z: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<AitkenFit> {
    check_design(y, z, v)?;
    let vinv = v_inverse(v)?;
    let ztv = z.transpose() * &vinv;
    let info = &ztv * z;
    let beta = linalg::sym_pinv(&info, PINV_TOL) * (&ztv * y);
    let fitted = z * &beta;
    Ok(AitkenFit { beta, fitted })
}

/// `P_V = Z (Zᵀ V⁻¹ Z)⁻ Zᵀ V⁻¹`.
pub fn projection_pv(z: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = z.nrows();
    check_design(&DVector::zeros(n), z, v)?;
    let vinv = v_inverse(v)?;
    let ztv = z.transpose() * &vinv;
    let info = &ztv * z;
    Ok(z * linalg::sym_pinv(&info, PINV_TOL) * ztv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::product_kernel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, q: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, q, |_, _| rng.random_range(-1.0..1.0))
    }

    fn check_identities(z: &DMatrix<f64>, r: &Restriction) {
        let rm = r.matrix();
        assert!((rm * z).abs().max() <= 1e-10);
        let rrt = rm * rm.transpose();
        assert!(
            (rrt - DMatrix::<f64>::identity(rm.nrows(), rm.nrows()))
                .abs()
                .max()
                <= 1e-10
        );
    }

    #[test]
    fn ones_vectors() {
        let z2 = DMatrix::from_element(2, 1, 1.0);
        let r = restriction_matrix(&z2).unwrap();
        assert_eq!(r.matrix().shape(), (1, 2));
        let s = 0.5f64.sqrt();
        assert!((r.matrix()[(0, 0)].abs() - s).abs() < 1e-12);
        assert!((r.matrix()[(0, 0)] + r.matrix()[(0, 1)]).abs() < 1e-12);
        check_identities(&z2, &r);
        let z3 = DMatrix::from_element(3, 1, 1.0);
        let r3 = restriction_matrix(&z3).unwrap();
        assert_eq!(r3.matrix().shape(), (2, 3));
        check_identities(&z3, &r3);
    }

    #[test]
    fn random_full_rank_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let z = random(5, 2, &mut rng);
        let r = restriction_matrix(&z).unwrap();
        assert_eq!(r.matrix().shape(), (3, 5));
        check_identities(&z, &r);
    }

    #[test]
    fn rank_deficient_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let a = random(6, 2, &mut rng);
        let z = DMatrix::from_fn(6, 3, |i, j| {
            if j < 2 {
                a[(i, j)]
            } else {
                a[(i, 0)] + 2.0 * a[(i, 1)]
            }
        });
        let r = restriction_matrix(&z).unwrap();
        assert_eq!(r.z_rank(), 2);
        assert_eq!(r.residual_dim(), 4);
        check_identities(&z, &r);
    }

    #[test]
    fn square_design_has_no_residual_space() {
        let z = DMatrix::<f64>::identity(3, 3);
        assert!(matches!(
            restriction_matrix(&z),
            Err(KnnError::DegenerateDesign { rank: 3, n: 3 })
        ));
    }

    #[test]
    fn transform_annihilates_fixed_effects() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let z = random(6, 2, &mut rng);
        let restr = restriction_matrix(&z).unwrap();
        let k = product_kernel(&random(6, 3, &mut rng)).unwrap();
        let basis = KernelBasis::with_identity(vec![k.into_values()]).unwrap();
        let b = DVector::from_vec(vec![1.5, -0.3]);
        let (yt, tb) = transform(&(&z * &b), &basis, &restr).unwrap();
        assert!(yt.amax() < 1e-12);
        assert_eq!(tb.matrices()[0], DMatrix::identity(4, 4));
    }

    #[test]
    fn aitken_reduces_to_ols_and_mean() {
        let y = DVector::from_vec(vec![1.0, 2.0, 4.0, 7.0]);
        let ones = DMatrix::from_element(4, 1, 1.0);
        let fit = aitken_beta(&y, &ones, &DMatrix::identity(4, 4)).unwrap();
        assert!((fit.beta[0] - 3.5).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let z = random(8, 3, &mut rng);
        let y = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
        let fit = aitken_beta(&y, &z, &DMatrix::identity(8, 8)).unwrap();
        let ols = (z.transpose() * &z).try_inverse().unwrap() * z.transpose() * &y;
        assert!((fit.beta - ols).abs().max() < 1e-10);
    }

    #[test]
    fn aitken_matches_direct_gls() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let n = 9;
        let z = random(n, 3, &mut rng);
        let v = product_kernel(&random(n, 4, &mut rng))
            .unwrap()
            .into_values()
            + DMatrix::<f64>::identity(n, n) * 0.5;
        let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let fit = aitken_beta(&y, &z, &v).unwrap();
        // Independent route: whiten with the Cholesky factor, then OLS via SVD.
        let l = v.clone().cholesky().unwrap().unpack();
        let zw = l.solve_lower_triangular(&z).unwrap();
        let yw = l.solve_lower_triangular(&y).unwrap();
        let gls = zw.svd(true, true).solve(&yw, 1e-14).unwrap();
        assert!((fit.beta - gls).abs().max() < 1e-10);
    }

    #[test]
    fn aitken_rejects_indefinite() {
        let y = DVector::from_vec(vec![1.0, 2.0]);
        let z = DMatrix::from_element(2, 1, 1.0);
        let v = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            aitken_beta(&y, &z, &v),
            Err(KnnError::NotPositiveDefinite)
        ));
    }

    #[test]
    fn projection_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let n = 7;
        let z = random(n, 2, &mut rng);
        let ident = DMatrix::<f64>::identity(n, n);
        let p_ols = projection_pv(&z, &ident).unwrap();
        let hat = &z * (z.transpose() * &z).try_inverse().unwrap() * z.transpose();
        assert!((&p_ols - hat).abs().max() < 1e-10);

        let v = product_kernel(&random(n, 3, &mut rng))
            .unwrap()
            .into_values()
            + &ident;
        let p = projection_pv(&z, &v).unwrap();
        assert!((&p * &p - &p).abs().max() < 1e-8);
        assert!((&p * &z - &z).abs().max() < 1e-10);
        let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let resid = (&ident - &p) * &y;
        let ortho = z.transpose() * v.try_inverse().unwrap() * resid;
        assert!(ortho.amax() < 1e-10);
    }
}
