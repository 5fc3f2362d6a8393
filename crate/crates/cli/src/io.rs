//! File helpers: phenotype and covariate tables, JSON and CSV outputs, and
//! the run manifest.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use sha2::{Digest, Sha256};

use knn_core::genotype::{load_genotypes, GenotypeMatrix, TableFormat};

pub fn read_genotypes(path: &Path) -> Result<GenotypeMatrix> {
    load_genotypes(path, TableFormat::from_path(path))
        .with_context(|| format!("reading genotypes {}", path.display()))
}

/// A table keyed by the first column; remaining columns must be numeric.
struct Table {
    columns: Vec<String>,
    rows: HashMap<String, Vec<f64>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(TableFormat::from_path(path).delimiter())
        .from_reader(file);
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        bail!(
            "{}: need an id column and at least one value column",
            path.display()
        );
    }
    let columns: Vec<String> = header
        .iter()
        .skip(1)
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != header.len() {
            bail!(
                "{} line {line}: expected {} fields, found {}",
                path.display(),
                header.len(),
                rec.len()
            );
        }
        let values = rec
            .iter()
            .skip(1)
            .enumerate()
            .map(|(f, c)| {
                c.trim().parse::<f64>().with_context(|| {
                    format!("{} line {line} field {}: {c:?}", path.display(), f + 2)
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.insert(rec[0].trim().to_string(), values);
    }
    Ok(Table { columns, rows })
}

fn aligned(table: &Table, ids: &[String], path: &Path) -> Result<DMatrix<f64>> {
    let q = table.columns.len();
    let mut m = DMatrix::zeros(ids.len(), q);
    for (i, id) in ids.iter().enumerate() {
        let row = table
            .rows
            .get(id)
            .with_context(|| format!("{}: no row for sample {id:?}", path.display()))?;
        for j in 0..q {
            m[(i, j)] = row[j];
        }
    }
    Ok(m)
}

/// First value column, in genotype sample order.
pub fn read_phenotype(path: &Path, ids: &[String]) -> Result<DVector<f64>> {
    let t = read_table(path)?;
    Ok(aligned(&t, ids, path)?.column(0).into_owned())
}

/// Design matrix: optional intercept followed by the covariate columns.
pub fn design_matrix(
    path: Option<&Path>,
    ids: &[String],
    intercept: bool,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    let n = ids.len();
    let (cov, mut names) = match path {
        Some(p) => {
            let t = read_table(p)?;
            (aligned(&t, ids, p)?, t.columns)
        }
        None => (DMatrix::zeros(n, 0), Vec::new()),
    };
    if !intercept {
        return Ok((cov, names));
    }
    let mut z = DMatrix::from_element(n, cov.ncols() + 1, 1.0);
    z.columns_mut(1, cov.ncols()).copy_from(&cov);
    names.insert(0, "intercept".into());
    Ok((z, names))
}

pub fn create_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))
}

pub fn out_file(out: &Path, name: &str) -> Result<(BufWriter<File>, PathBuf)> {
    let path = out.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok((BufWriter::new(f), path))
}

pub fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<()> {
    let (mut w, path) = out_file(out, name)?;
    serde_json::to_writer_pretty(&mut w, value)
        .with_context(|| format!("writing {}", path.display()))?;
    use std::io::Write;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn write_predictions(
    out: &Path,
    ids: &[String],
    y: &DVector<f64>,
    y_hat: &DVector<f64>,
) -> Result<()> {
    let (w, _) = out_file(out, "predictions.csv")?;
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["sample", "y", "y_hat"])?;
    for i in 0..ids.len() {
        wtr.write_record([ids[i].clone(), y[i].to_string(), y_hat[i].to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    arguments: Vec<String>,
    config: &'a serde_json::Value,
    config_sha256: String,
    seed: Option<u64>,
    version: &'static str,
}

/// Records what produced the outputs in `out`, enough to rerun it exactly.
pub fn write_manifest(
    out: &Path,
    command: &str,
    config: &serde_json::Value,
    seed: Option<u64>,
) -> Result<()> {
    let digest = Sha256::digest(serde_json::to_vec(config)?);
    let config_sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
    let m = Manifest {
        command,
        arguments: std::env::args().collect(),
        config,
        config_sha256,
        seed,
        version: env!("CARGO_PKG_VERSION"),
    };
    write_json(out, "manifest.json", &m)
}
