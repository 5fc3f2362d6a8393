//! Kernel matrices over samples and the transforms applied to them.

mod basis;
mod registry;

pub use basis::{expand_output_basis, BasisTerm, Coefficient, KernelBasis, OutputKernelSpec};
pub use registry::{
    CovarianceKernel, IbsKernel, InputKernel, KernelRegistry, Poly2Kernel, ProductKernel,
};

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KnnError, Result};
use crate::genotype::{Coding, GenotypeMatrix};
use crate::linalg::{self, SymEigen};

/// Relative slack for the PSD flag: `λ_min >= -PSD_TOL · tr(K)/n`.
pub const PSD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    values: DMatrix<f64>,
    label: String,
    psd_checked: bool,
}

impl KernelMatrix {
    /// Wraps a symmetric matrix (symmetrized on the way in). The PSD flag
    /// starts false; see [`KernelMatrix::checked`].
    pub fn new(values: DMatrix<f64>, label: impl Into<String>) -> Result<Self> {
        Ok(KernelMatrix {
            values: linalg::symmetrized(&values)?,
            label: label.into(),
            psd_checked: false,
        })
    }

    /// For constructors whose output is PSD by construction (Gram matrices).
    fn gram(values: DMatrix<f64>, label: &str) -> Self {
        let values = (&values + values.transpose()) * 0.5;
        KernelMatrix {
            values,
            label: label.to_string(),
            psd_checked: true,
        }
    }

    /// Runs an eigensolver and sets the PSD flag from the result.
    pub fn checked(mut self) -> Self {
        self.psd_checked = is_psd(&self.values);
        self
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn psd_checked(&self) -> bool {
        self.psd_checked
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn meta(&self) -> KernelMeta {
        KernelMeta {
            label: self.label.clone(),
            psd_checked: self.psd_checked,
            n: self.n(),
        }
    }
}

/// JSON sidecar written next to a kernel CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMeta {
    pub label: String,
    pub psd_checked: bool,
    pub n: usize,
}

pub fn is_psd(m: &DMatrix<f64>) -> bool {
    let n = m.nrows().max(1) as f64;
    let scale = (m.trace() / n).abs().max(f64::MIN_POSITIVE);
    linalg::min_eigenvalue(m) >= -PSD_TOL * scale
}

/// `p⁻¹ X Xᵀ`.
pub fn product_kernel(x: &DMatrix<f64>) -> Result<KernelMatrix> {
    let p = x.ncols();
    if p == 0 {
        return Err(KnnError::Dimension(
            "product kernel needs at least one column".into(),
        ));
    }
    Ok(KernelMatrix::gram(x * x.transpose() / p as f64, "product"))
}

/// Row-centered cross products scaled by `1/(p-1)`.
pub fn covariance_kernel(g: &GenotypeMatrix) -> Result<KernelMatrix> {
    let x = g.complete_values()?;
    let p = x.ncols();
    if p < 2 {
        return Err(KnnError::Dimension(format!(
            "covariance kernel needs p >= 2, got {p}"
        )));
    }
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    Ok(KernelMatrix::gram(
        &centered * centered.transpose() / (p - 1) as f64,
        "covariance",
    ))
}

/// Normalized identity-by-state similarity `(2p)⁻¹ Σ_k (2 − |g_ik − g_jk|)`.
///
/// PSD-ness is not assumed; the flag reflects an eigensolver check.
pub fn ibs_kernel(g: &GenotypeMatrix) -> Result<KernelMatrix> {
    if g.coding() != Coding::Additive {
        return Err(KnnError::State("IBS kernel expects additive coding".into()));
    }
    let x = g.complete_values()?;
    let (n, p) = x.shape();
    let xt = x.transpose();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let gi = xt.column(i);
            (0..n)
                .map(|j| {
                    let gj = xt.column(j);
                    let s: f64 = gi
                        .iter()
                        .zip(gj.iter())
                        .map(|(a, b)| 2.0 - (a - b).abs())
                        .sum();
                    s / (2.0 * p as f64)
                })
                .collect()
        })
        .collect();
    let values = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    Ok(KernelMatrix::new(values, "ibs")?.checked())
}

/// Entrywise k-th power; `k = 0` yields the all-ones matrix.
pub fn hadamard_power(k: &KernelMatrix, power: u32) -> KernelMatrix {
    let values = k.values.map(|v| v.powi(power as i32));
    KernelMatrix {
        values,
        label: format!("{}^{}", k.label, power),
        // Schur product theorem; J is PSD.
        psd_checked: k.psd_checked || power == 0,
    }
}

pub fn hadamard_product(a: &KernelMatrix, b: &KernelMatrix) -> Result<KernelMatrix> {
    if a.n() != b.n() {
        return Err(KnnError::Dimension(format!(
            "Hadamard product of {}x{} and {}x{}",
            a.n(),
            a.n(),
            b.n(),
            b.n()
        )));
    }
    Ok(KernelMatrix {
        values: a.values.component_mul(&b.values),
        label: format!("{}*{}", a.label, b.label),
        psd_checked: a.psd_checked && b.psd_checked,
    })
}

/// Nearest PSD matrix in Frobenius norm: clip negative eigenvalues to zero.
pub fn psd_project(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = linalg::symmetrized(m)?;
    Ok(SymEigen::new(&sym).recompose_with(|l| l.max(0.0)))
}

/// Dense, header-free CSV.
pub fn write_kernel_csv<W: Write>(k: &KernelMatrix, writer: W) -> Result<()> {
    write_matrix_csv(k.values(), writer)
}

pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, writer: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer);
    for row in m.row_iter() {
        wtr.write_record(row.iter().map(|v| v.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_kernel_csv<R: Read>(reader: R, meta: Option<&KernelMeta>) -> Result<KernelMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(reader);
    let mut data = Vec::new();
    let mut n_rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for cell in rec.iter() {
            data.push(cell.trim().parse::<f64>().map_err(|e| KnnError::Parse {
                row: i + 1,
                message: e.to_string(),
            })?);
        }
        n_rows += 1;
    }
    if n_rows * n_rows != data.len() {
        return Err(KnnError::Dimension(format!(
            "kernel CSV is not square: {n_rows} rows, {} cells",
            data.len()
        )));
    }
    let values = DMatrix::from_row_slice(n_rows, n_rows, &data);
    let label = meta
        .map(|m| m.label.clone())
        .unwrap_or_else(|| "kernel".into());
    let mut k = KernelMatrix::new(values, label)?;
    k.psd_checked = meta.map(|m| m.psd_checked).unwrap_or(false);
    Ok(k)
}
