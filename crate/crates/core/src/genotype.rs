//! Genotype ingestion, quality control and inheritance-mode recoding.
//!
//! Additive codes count copies of the minor allele (0, 1, 2). Missing calls
//! are stored as `NaN` until [`apply_qc`] mean-imputes them; imputed cells are
//! remembered so that a second QC pass sees exactly the same observed data.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{KnnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coding {
    Additive,
    Dominant,
    Recessive,
}

/// Target of [`recode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Inheritance {
    Dominant,
    Recessive,
}

impl std::str::FromStr for Inheritance {
    type Err = KnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dominant" => Ok(Inheritance::Dominant),
            "recessive" => Ok(Inheritance::Recessive),
            other => Err(KnnError::UnknownName {
                kind: "inheritance mode",
                name: other.to_string(),
                valid: "dominant, recessive".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Tsv,
}

impl TableFormat {
    pub fn delimiter(self) -> u8 {
        match self {
            TableFormat::Csv => b',',
            TableFormat::Tsv => b'\t',
        }
    }

    /// Guesses from the file extension; anything but `.tsv`/`.txt` is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("txt") => TableFormat::Tsv,
            _ => TableFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenotypeMatrix {
    values: DMatrix<f64>,
    imputed: DMatrix<bool>,
    sample_ids: Vec<String>,
    snp_ids: Vec<String>,
    coding: Coding,
}

impl GenotypeMatrix {
    /// Builds an additive-coded matrix; `NaN` marks a missing call.
    pub fn new(
        values: DMatrix<f64>,
        sample_ids: Vec<String>,
        snp_ids: Vec<String>,
    ) -> Result<Self> {
        Self::with_coding(values, sample_ids, snp_ids, Coding::Additive)
    }

    pub fn with_coding(
        values: DMatrix<f64>,
        sample_ids: Vec<String>,
        snp_ids: Vec<String>,
        coding: Coding,
    ) -> Result<Self> {
        let (n, p) = values.shape();
        if n < 2 || p < 1 {
            return Err(KnnError::Dimension(format!(
                "genotype matrix needs n >= 2 and p >= 1, got {n}x{p}"
            )));
        }
        if sample_ids.len() != n || snp_ids.len() != p {
            return Err(KnnError::Dimension(format!(
                "{} sample ids and {} SNP ids for a {n}x{p} matrix",
                sample_ids.len(),
                snp_ids.len()
            )));
        }
        let max_code = if coding == Coding::Additive { 2.0 } else { 1.0 };
        for j in 0..p {
            for i in 0..n {
                let v = values[(i, j)];
                if !v.is_nan() && !(v == 0.0 || v == 1.0 || v == max_code) {
                    return Err(KnnError::Value {
                        row: i,
                        col: j,
                        value: v.to_string(),
                    });
                }
            }
        }
        Ok(GenotypeMatrix {
            imputed: DMatrix::from_element(n, p, false),
            values,
            sample_ids,
            snp_ids,
            coding,
        })
    }

    /// Convenience constructor with generated ids `s0..`, `snp0..`.
    pub fn from_codes(values: DMatrix<f64>) -> Result<Self> {
        let (n, p) = values.shape();
        let samples = (0..n).map(|i| format!("s{i}")).collect();
        let snps = (0..p).map(|j| format!("snp{j}")).collect();
        Self::new(values, samples, snps)
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_snps(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn snp_ids(&self) -> &[String] {
        &self.snp_ids
    }

    pub fn coding(&self) -> Coding {
        self.coding
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }

    fn is_observed(&self, i: usize, j: usize) -> bool {
        !self.values[(i, j)].is_nan() && !self.imputed[(i, j)]
    }

    /// Values with the guarantee that nothing is missing; kernels need this.
    pub fn complete_values(&self) -> Result<&DMatrix<f64>> {
        if self.has_missing() {
            return Err(KnnError::State(
                "genotype matrix has missing calls; run QC (mean imputation) first".into(),
            ));
        }
        Ok(&self.values)
    }

    fn select_columns(&self, cols: &[usize]) -> GenotypeMatrix {
        let n = self.n_samples();
        GenotypeMatrix {
            values: DMatrix::from_fn(n, cols.len(), |i, j| self.values[(i, cols[j])]),
            imputed: DMatrix::from_fn(n, cols.len(), |i, j| self.imputed[(i, cols[j])]),
            sample_ids: self.sample_ids.clone(),
            snp_ids: cols.iter().map(|&j| self.snp_ids[j].clone()).collect(),
            coding: self.coding,
        }
    }
}

fn parse_cell(cell: &str, line: usize, field: usize) -> Result<f64> {
    let cell = cell.trim();
    if cell.is_empty() || cell == "NA" {
        return Ok(f64::NAN);
    }
    match cell.parse::<f64>() {
        Ok(v) if v == 0.0 || v == 1.0 || v == 2.0 => Ok(v),
        _ => Err(KnnError::Value {
            row: line,
            col: field,
            value: cell.to_string(),
        }),
    }
}

/// Reads a genotype table: header row of SNP ids (first cell names the sample
/// column), one row per sample. Error positions are 1-based file lines and
/// fields.
pub fn read_genotypes<R: Read>(reader: R, format: TableFormat) -> Result<GenotypeMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(format.delimiter())
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(rec) => rec?,
        None => {
            return Err(KnnError::Parse {
                row: 1,
                message: "empty file".into(),
            })
        }
    };
    if header.len() < 2 {
        return Err(KnnError::Parse {
            row: 1,
            message: "header needs a sample column and at least one SNP".into(),
        });
    }
    let snp_ids: Vec<String> = header
        .iter()
        .skip(1)
        .map(|s| s.trim().to_string())
        .collect();
    let p = snp_ids.len();
    let mut sample_ids = Vec::new();
    let mut data = Vec::new();
    for (k, rec) in records.enumerate() {
        let line = k + 2;
        let rec = rec?;
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != p + 1 {
            return Err(KnnError::Parse {
                row: line,
                message: format!("expected {} fields, found {}", p + 1, rec.len()),
            });
        }
        sample_ids.push(rec[0].trim().to_string());
        for (f, cell) in rec.iter().enumerate().skip(1) {
            data.push(parse_cell(cell, line, f + 1)?);
        }
    }
    let n = sample_ids.len();
    let values = DMatrix::from_row_slice(n, p, &data);
    GenotypeMatrix::new(values, sample_ids, snp_ids)
}

pub fn load_genotypes(path: &Path, format: TableFormat) -> Result<GenotypeMatrix> {
    read_genotypes(File::open(path)?, format)
}

/// Writes the table format read by [`read_genotypes`]; missing calls as `NA`.
pub fn write_genotypes<W: Write>(g: &GenotypeMatrix, writer: W, format: TableFormat) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .delimiter(format.delimiter())
        .from_writer(writer);
    let mut header = vec!["sample".to_string()];
    header.extend(g.snp_ids.iter().cloned());
    wtr.write_record(&header)?;
    for i in 0..g.n_samples() {
        let mut row = vec![g.sample_ids[i].clone()];
        for j in 0..g.n_snps() {
            let v = g.values[(i, j)];
            row.push(if v.is_nan() {
                "NA".into()
            } else {
                v.to_string()
            });
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QcThresholds {
    pub min_call_rate: f64,
    pub min_maf: f64,
    pub hwe_alpha: f64,
}

impl Default for QcThresholds {
    fn default() -> Self {
        QcThresholds {
            min_call_rate: 0.9,
            min_maf: 0.01,
            hwe_alpha: 1e-6,
        }
    }
}

impl QcThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_call_rate)
            || !(0.0..=0.5).contains(&self.min_maf)
            || !(self.hwe_alpha > 0.0 && self.hwe_alpha < 1.0)
        {
            return Err(KnnError::Domain(format!("invalid QC thresholds {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnpStatus {
    Retained,
    CallRate,
    Maf,
    Hwe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnpQc {
    pub id: String,
    pub call_rate: f64,
    pub maf: Option<f64>,
    pub hwe_p: Option<f64>,
    pub status: SnpStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub input_snps: usize,
    pub retained: usize,
    pub dropped_call_rate: usize,
    pub dropped_maf: usize,
    pub dropped_hwe: usize,
    pub snps: Vec<SnpQc>,
}

impl QcReport {
    pub fn dropped(&self) -> usize {
        self.dropped_call_rate + self.dropped_maf + self.dropped_hwe
    }
}

/// One-degree-of-freedom chi-square goodness-of-fit test for Hardy-Weinberg
/// proportions. Returns the upper-tail p-value.
pub fn hwe_chi_square_p(n_hom_ref: usize, n_het: usize, n_hom_alt: usize) -> f64 {
    let total = (n_hom_ref + n_het + n_hom_alt) as f64;
    if total == 0.0 {
        return 1.0;
    }
    let q = (2.0 * n_hom_alt as f64 + n_het as f64) / (2.0 * total);
    let expected = [
        total * (1.0 - q) * (1.0 - q),
        2.0 * total * q * (1.0 - q),
        total * q * q,
    ];
    if expected.iter().any(|&e| e <= 0.0) {
        return 1.0;
    }
    let observed = [n_hom_ref as f64, n_het as f64, n_hom_alt as f64];
    let stat: f64 = observed
        .iter()
        .zip(expected.iter())
        .map(|(o, e)| (o - e).powi(2) / e)
        .sum();
    erfc((stat / 2.0).sqrt())
}

fn snp_qc(g: &GenotypeMatrix, j: usize, t: &QcThresholds) -> SnpQc {
    let n = g.n_samples();
    let mut counts = [0usize; 3];
    for i in 0..n {
        if g.is_observed(i, j) {
            counts[g.values[(i, j)] as usize] += 1;
        }
    }
    let observed = counts.iter().sum::<usize>();
    let call_rate = observed as f64 / n as f64;
    let id = g.snp_ids[j].clone();
    if call_rate < t.min_call_rate || observed == 0 {
        return SnpQc {
            id,
            call_rate,
            maf: None,
            hwe_p: None,
            status: SnpStatus::CallRate,
        };
    }
    let q = (counts[1] + 2 * counts[2]) as f64 / (2 * observed) as f64;
    let maf = q.min(1.0 - q);
    if maf < t.min_maf {
        return SnpQc {
            id,
            call_rate,
            maf: Some(maf),
            hwe_p: None,
            status: SnpStatus::Maf,
        };
    }
    let p = hwe_chi_square_p(counts[0], counts[1], counts[2]);
    let status = if p < t.hwe_alpha {
        SnpStatus::Hwe
    } else {
        SnpStatus::Retained
    };
    SnpQc {
        id,
        call_rate,
        maf: Some(maf),
        hwe_p: Some(p),
        status,
    }
}

/// Applies call-rate, then MAF, then HWE filters; mean-imputes what remains.
pub fn apply_qc(g: &GenotypeMatrix, t: &QcThresholds) -> Result<(GenotypeMatrix, QcReport)> {
    if g.coding != Coding::Additive {
        return Err(KnnError::State("QC expects additive coding".into()));
    }
    t.validate()?;
    let stats: Vec<SnpQc> = (0..g.n_snps())
        .into_par_iter()
        .map(|j| snp_qc(g, j, t))
        .collect();
    let keep: Vec<usize> = stats
        .iter()
        .enumerate()
        .filter(|(_, s)| s.status == SnpStatus::Retained)
        .map(|(j, _)| j)
        .collect();
    let count = |st: SnpStatus| stats.iter().filter(|s| s.status == st).count();
    let report = QcReport {
        input_snps: g.n_snps(),
        retained: keep.len(),
        dropped_call_rate: count(SnpStatus::CallRate),
        dropped_maf: count(SnpStatus::Maf),
        dropped_hwe: count(SnpStatus::Hwe),
        snps: stats,
    };
    if keep.is_empty() {
        return Err(KnnError::EmptyResult);
    }
    let mut out = g.select_columns(&keep);
    mean_impute(&mut out);
    Ok((out, report))
}

/// Mean-QC variant that still hands back the report when everything is dropped.
pub fn apply_qc_with_report(
    g: &GenotypeMatrix,
    t: &QcThresholds,
) -> Result<(Option<GenotypeMatrix>, QcReport)> {
    match apply_qc(g, t) {
        Ok((m, r)) => Ok((Some(m), r)),
        Err(KnnError::EmptyResult) => {
            let stats: Vec<SnpQc> = (0..g.n_snps()).map(|j| snp_qc(g, j, t)).collect();
            let count = |st: SnpStatus| stats.iter().filter(|s| s.status == st).count();
            Ok((
                None,
                QcReport {
                    input_snps: g.n_snps(),
                    retained: 0,
                    dropped_call_rate: count(SnpStatus::CallRate),
                    dropped_maf: count(SnpStatus::Maf),
                    dropped_hwe: count(SnpStatus::Hwe),
                    snps: stats,
                },
            ))
        }
        Err(e) => Err(e),
    }
}

fn mean_impute(g: &mut GenotypeMatrix) {
    let n = g.n_samples();
    for j in 0..g.n_snps() {
        let (sum, cnt) = (0..n)
            .filter(|&i| g.is_observed(i, j))
            .fold((0.0, 0usize), |(s, c), i| (s + g.values[(i, j)], c + 1));
        if cnt == 0 {
            continue;
        }
        let mean = sum / cnt as f64;
        for i in 0..n {
            if !g.is_observed(i, j) {
                g.values[(i, j)] = mean;
                g.imputed[(i, j)] = true;
            }
        }
    }
}

/// Recodes additive minor-allele counts: dominant is `code >= 1`, recessive is
/// `code == 2`. Imputed cells are re-imputed from the recoded column.
pub fn recode(g: &GenotypeMatrix, mode: Inheritance) -> Result<GenotypeMatrix> {
    if g.coding != Coding::Additive {
        return Err(KnnError::State(format!(
            "recode expects additive coding, matrix is already {:?}",
            g.coding
        )));
    }
    let map = |v: f64| match mode {
        Inheritance::Dominant => (v >= 1.0) as u8 as f64,
        Inheritance::Recessive => (v == 2.0) as u8 as f64,
    };
    let mut out = g.clone();
    out.coding = match mode {
        Inheritance::Dominant => Coding::Dominant,
        Inheritance::Recessive => Coding::Recessive,
    };
    for j in 0..g.n_snps() {
        for i in 0..g.n_samples() {
            if g.is_observed(i, j) {
                out.values[(i, j)] = map(g.values[(i, j)]);
            }
        }
    }
    if out.imputed.iter().any(|&b| b) {
        mean_impute(&mut out);
    }
    Ok(out)
}
