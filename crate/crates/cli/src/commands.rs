//! Subcommand implementations. Each returns the process exit status.

use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use knn_core::genotype::{
    apply_qc_with_report, recode, write_genotypes, Inheritance, QcThresholds, TableFormat,
};
use knn_core::kernels::{
    expand_output_basis, write_kernel_csv, write_matrix_csv, KernelMatrix, KernelRegistry,
    OutputKernelSpec,
};
use knn_core::knn::{
    self, random_unit_psd, schur_sweep, FittedKnn, FittedKnnSummary, KnnSpec, SchurSweep,
};
use knn_core::lmm::{self, FittedLmm};
use knn_core::methods::MethodRegistry;
use knn_core::simulate::{run_monte_carlo, summarize};

use crate::config::{self, BoundsConfig, RunConfig};
use crate::io;
use crate::{Command, Common};

pub const EXIT_OK: u8 = 0;
pub const EXIT_QC_EMPTY: u8 = 2;

pub fn run(command: Command) -> Result<u8> {
    match command {
        Command::Qc {
            genotypes,
            min_call_rate,
            min_maf,
            hwe_alpha,
            common,
        } => cmd_qc(&genotypes, [min_call_rate, min_maf, hwe_alpha], &common),
        Command::Kernel {
            genotypes,
            kernel,
            recode,
            common,
        } => cmd_kernel(&genotypes, &kernel, recode.as_deref(), &common),
        Command::Fit {
            genotypes,
            phenotype,
            covariates,
            model,
            input_kernels,
            output_kernel,
            no_intercept,
            write_predictor,
            common,
        } => {
            let opts = FitOptions {
                model,
                input_kernels,
                output_kernel,
                no_intercept,
                write_predictor,
            };
            cmd_fit(&genotypes, &phenotype, covariates.as_deref(), opts, &common)
        }
        Command::Predict {
            model,
            genotypes,
            phenotype,
            covariates,
            out,
        } => cmd_predict(&model, &genotypes, &phenotype, covariates.as_deref(), &out),
        Command::Simulate {
            seed,
            iterations,
            common,
        } => cmd_simulate(seed, iterations, &common),
        Command::CheckBounds { seed, common } => cmd_check_bounds(seed, &common),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(p) => config::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn require_config(common: &Common) -> Result<RunConfig> {
    if common.config.is_none() {
        bail!("this command needs --config");
    }
    load_config(common)
}

fn cmd_qc(genotypes: &Path, flags: [Option<f64>; 3], common: &Common) -> Result<u8> {
    let file = load_config(common)?.qc.unwrap_or_default();
    let d = QcThresholds::default();
    let t = QcThresholds {
        min_call_rate: flags[0].or(file.min_call_rate).unwrap_or(d.min_call_rate),
        min_maf: flags[1].or(file.min_maf).unwrap_or(d.min_maf),
        hwe_alpha: flags[2].or(file.hwe_alpha).unwrap_or(d.hwe_alpha),
    };
    let g = io::read_genotypes(genotypes)?;
    io::create_dir(&common.out)?;
    let (filtered, report) = apply_qc_with_report(&g, &t)?;
    io::write_json(&common.out, "qc_report.json", &report)?;
    io::write_manifest(
        &common.out,
        "qc",
        &json!({ "genotypes": genotypes, "thresholds": t }),
        None,
    )?;
    eprintln!(
        "qc: {} of {} SNPs retained ({} call rate, {} MAF, {} HWE)",
        report.retained,
        report.input_snps,
        report.dropped_call_rate,
        report.dropped_maf,
        report.dropped_hwe
    );
    match filtered {
        Some(m) => {
            let (w, _) = io::out_file(&common.out, "genotypes_qc.csv")?;
            write_genotypes(&m, w, TableFormat::Csv)?;
            Ok(EXIT_OK)
        }
        None => {
            eprintln!("qc: every SNP was removed");
            Ok(EXIT_QC_EMPTY)
        }
    }
}

fn cmd_kernel(genotypes: &Path, kernel: &str, mode: Option<&str>, common: &Common) -> Result<u8> {
    let registry = KernelRegistry::standard();
    let builder = registry.get(kernel)?;
    let mut g = io::read_genotypes(genotypes)?;
    if let Some(mode) = mode {
        g = recode(&g, mode.parse::<Inheritance>()?)?;
    }
    let k = builder.build(&g)?;
    io::create_dir(&common.out)?;
    let (w, _) = io::out_file(&common.out, "kernel.csv")?;
    write_kernel_csv(&k, w)?;
    io::write_json(&common.out, "kernel.json", &k.meta())?;
    io::write_manifest(
        &common.out,
        "kernel",
        &json!({ "genotypes": genotypes, "kernel": kernel, "recode": mode }),
        None,
    )?;
    eprintln!("kernel: {} ({}x{})", k.label(), k.n(), k.n());
    Ok(EXIT_OK)
}

pub struct FitOptions {
    model: Option<String>,
    input_kernels: Vec<String>,
    output_kernel: Option<String>,
    no_intercept: bool,
    write_predictor: bool,
}

/// What `fit` writes and `predict` reads back.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
enum SavedModel {
    Knn {
        kernels: Vec<String>,
        covariates: Vec<String>,
        fit: FittedKnnSummary,
    },
    Lmm {
        kernels: Vec<String>,
        covariates: Vec<String>,
        fit: FittedLmm,
    },
}

fn build_kernels(
    g: &knn_core::genotype::GenotypeMatrix,
    names: &[String],
) -> Result<Vec<KernelMatrix>> {
    let registry = KernelRegistry::standard();
    names
        .iter()
        .map(|name| {
            registry
                .get(name)?
                .build(g)
                .with_context(|| format!("building {name} kernel"))
        })
        .collect()
}

#[derive(Serialize)]
struct PredictionSummary {
    n: usize,
    pe_total: f64,
    pe_avg: f64,
    /// KNN only: the plug-in estimate of the total.
    pe_plug_in: Option<f64>,
    degenerate: Option<bool>,
}

fn cmd_fit(
    genotypes: &Path,
    phenotype: &Path,
    covariates: Option<&Path>,
    opts: FitOptions,
    common: &Common,
) -> Result<u8> {
    let file = load_config(common)?.fit.unwrap_or_default();
    let model = opts.model.or(file.model).unwrap_or_else(|| "knn".into());
    let kernel_names = if opts.input_kernels.is_empty() {
        file.input_kernels.unwrap_or_else(|| vec!["product".into()])
    } else {
        opts.input_kernels
    };
    let intercept = !opts.no_intercept && file.intercept.unwrap_or(true);
    let output_name = opts
        .output_kernel
        .or(file.output_kernel)
        .unwrap_or_else(|| "poly2".into());
    let output: OutputKernelSpec = output_name.parse()?;

    let g = io::read_genotypes(genotypes)?;
    let ids = g.sample_ids().to_vec();
    let y = io::read_phenotype(phenotype, &ids)?;
    let (z, covariate_names) = io::design_matrix(covariates, &ids, intercept)?;
    let kernels = build_kernels(&g, &kernel_names)?;
    io::create_dir(&common.out)?;
    let resolved = json!({
        "genotypes": genotypes, "phenotype": phenotype, "covariates": covariates,
        "model": model, "input_kernels": kernel_names, "output_kernel": output, "intercept": intercept,
    });

    let (saved, y_hat, summary) = match model.as_str() {
        "knn" => {
            let spec = KnnSpec::new(kernels, output)?;
            let z_opt = (z.ncols() > 0).then_some(&z);
            let fitted = knn::fit(&spec, &y, z_opt)?;
            let y_hat = knn::predict(&fitted, &y, z_opt)?;
            let pe = knn::prediction_error(&fitted, &y, z_opt)?;
            eprintln!(
                "knn: basis of size {} [{}]",
                fitted.basis().len(),
                fitted.basis().tags().join(", ")
            );
            eprintln!("knn: theta = {:?}", fitted.theta().theta);
            if opts.write_predictor {
                let (w, _) = io::out_file(&common.out, "predictor.csv")?;
                write_matrix_csv(knn::predictor_matrix(&fitted), w)?;
            }
            let summary = PredictionSummary {
                n: y.len(),
                pe_total: pe.empirical,
                pe_avg: pe.average,
                pe_plug_in: Some(pe.plug_in),
                degenerate: None,
            };
            let saved = SavedModel::Knn {
                kernels: kernel_names,
                covariates: covariate_names,
                fit: fitted.summary(&spec),
            };
            (saved, y_hat, summary)
        }
        "lmm" => {
            let fit = lmm::reml_fit(&y, &z, &kernels)?;
            let b = lmm::blup(&fit, &y, &z, &kernels)?;
            eprintln!(
                "lmm: tau = {:?}, tau_err = {:e}, converged = {} after {} iterations",
                fit.tau, fit.tau_err, fit.converged, fit.iterations
            );
            for w in &fit.warnings {
                eprintln!("lmm: warning: {w}");
            }
            let pe = (&y - &b.prediction).norm_squared();
            let summary = PredictionSummary {
                n: y.len(),
                pe_total: pe,
                pe_avg: pe / y.len() as f64,
                pe_plug_in: None,
                degenerate: Some(b.degenerate),
            };
            (
                SavedModel::Lmm {
                    kernels: kernel_names,
                    covariates: covariate_names,
                    fit,
                },
                b.prediction,
                summary,
            )
        }
        other => bail!("unknown model {other:?}; valid models: knn, lmm"),
    };
    io::write_json(&common.out, "model.json", &saved)?;
    io::write_json(&common.out, "prediction_error.json", &summary)?;
    io::write_predictions(&common.out, &ids, &y, &y_hat)?;
    io::write_manifest(&common.out, "fit", &resolved, None)?;
    Ok(EXIT_OK)
}

fn cmd_predict(
    model: &Path,
    genotypes: &Path,
    phenotype: &Path,
    covariates: Option<&Path>,
    out: &Path,
) -> Result<u8> {
    let text = std::fs::read_to_string(model)
        .with_context(|| format!("reading model {}", model.display()))?;
    let saved: SavedModel = serde_json::from_str(&text)
        .with_context(|| format!("parsing model {}", model.display()))?;
    let g = io::read_genotypes(genotypes)?;
    let ids = g.sample_ids().to_vec();
    let y = io::read_phenotype(phenotype, &ids)?;
    let (kernel_names, stored_covariates) = match &saved {
        SavedModel::Knn {
            kernels,
            covariates,
            ..
        }
        | SavedModel::Lmm {
            kernels,
            covariates,
            ..
        } => (kernels, covariates),
    };
    let intercept = stored_covariates
        .first()
        .map(|c| c == "intercept")
        .unwrap_or(false);
    let (z, names) = io::design_matrix(covariates, &ids, intercept)?;
    if &names != stored_covariates {
        bail!("covariates {names:?} do not match the model's {stored_covariates:?}");
    }
    let kernels = build_kernels(&g, kernel_names)?;
    io::create_dir(out)?;
    let (y_hat, summary) = match saved {
        SavedModel::Knn { fit, .. } => {
            let basis = expand_output_basis(&kernels, &fit.output)?;
            if basis.tags() != fit.theta.tags {
                bail!(
                    "rebuilt basis {:?} does not match the model's {:?}",
                    basis.tags(),
                    fit.theta.tags
                );
            }
            let beta = fit.beta.map(DVector::from_vec);
            let fitted =
                FittedKnn::from_parts(basis, fit.theta, fit.phi_used, beta, fit.diagnostics)?;
            let z_opt = (z.ncols() > 0).then_some(&z);
            let y_hat = knn::predict(&fitted, &y, z_opt)?;
            let pe = knn::prediction_error(&fitted, &y, z_opt)?;
            let s = PredictionSummary {
                n: y.len(),
                pe_total: pe.empirical,
                pe_avg: pe.average,
                pe_plug_in: Some(pe.plug_in),
                degenerate: None,
            };
            (y_hat, s)
        }
        SavedModel::Lmm { fit, .. } => {
            let b = lmm::blup(&fit, &y, &z, &kernels)?;
            let pe = (&y - &b.prediction).norm_squared();
            let s = PredictionSummary {
                n: y.len(),
                pe_total: pe,
                pe_avg: pe / y.len() as f64,
                pe_plug_in: None,
                degenerate: Some(b.degenerate),
            };
            (b.prediction, s)
        }
    };
    io::write_predictions(out, &ids, &y, &y_hat)?;
    io::write_json(out, "prediction_error.json", &summary)?;
    io::write_manifest(
        out,
        "predict",
        &json!({ "model": model, "genotypes": genotypes, "phenotype": phenotype, "covariates": covariates }),
        None,
    )?;
    Ok(EXIT_OK)
}

fn cmd_simulate(seed: Option<u64>, iterations: Option<usize>, common: &Common) -> Result<u8> {
    let mut cfg = require_config(common)?
        .simulate
        .context("config has no [simulate] table")?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if let Some(i) = iterations {
        cfg.iterations = i;
    }
    let methods = MethodRegistry::standard();
    cfg.validate(&methods)?;
    io::create_dir(&common.out)?;
    let (w, _) = io::out_file(&common.out, "results.csv")?;
    let mut wtr = csv::Writer::from_writer(w);
    let total = cfg.scenarios.len() * cfg.iterations * cfg.methods.len();
    let mut written = 0usize;
    let table = run_monte_carlo(&cfg, &methods, &KernelRegistry::standard(), |row| {
        wtr.serialize(row)?;
        written += 1;
        if written.is_multiple_of(cfg.methods.len())
            && (written / cfg.methods.len()).is_multiple_of(50)
        {
            eprintln!("simulate: {written}/{total} rows");
        }
        Ok(())
    })?;
    wtr.flush()?;
    let summary = summarize(&table);
    for s in &summary {
        eprintln!(
            "{:<22} {:<14} median pe_avg {:.4} ({} failed)",
            s.scenario, s.method, s.median, s.failures
        );
    }
    io::write_json(&common.out, "summary.json", &summary)?;
    io::write_manifest(
        &common.out,
        "simulate",
        &serde_json::to_value(&cfg)?,
        Some(cfg.master_seed),
    )?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct BoundsReport {
    instances: usize,
    hypothesis_met: usize,
    violations: usize,
    /// True when every instance meeting the hypotheses satisfied the bound.
    bound_holds: bool,
    max_ratio: f64,
    schur: Option<SchurReport>,
}

#[derive(Serialize)]
struct SchurReport {
    #[serde(flatten)]
    sweep: SchurSweep,
    possible_negative_eigenvalues: bool,
}

fn cmd_check_bounds(seed: Option<u64>, common: &Common) -> Result<u8> {
    let mut cfg: BoundsConfig = require_config(common)?.bounds.unwrap_or_default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if cfg.xi.is_empty() || cfg.n < 1 {
        bail!("bounds config needs n >= 1 and at least one weight in xi");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let min_xi = cfg.xi.iter().copied().fold(f64::INFINITY, f64::min);
    let s2 = cfg.sigma_tilde_sq.unwrap_or(cfg.tau_tilde * min_xi);
    let (mut met, mut violations, mut max_ratio) = (0, 0, 0.0f64);
    for _ in 0..cfg.instances {
        let inputs: Vec<KernelMatrix> = cfg
            .xi
            .iter()
            .map(|_| KernelMatrix::new(random_unit_psd(cfg.n, &mut rng), "sigma"))
            .collect::<knn_core::Result<_>>()?;
        let r = knn::pe_bound_check(&inputs, &cfg.xi, cfg.tau_tilde, s2, &cfg.output, cfg.phi)?;
        if r.hypothesis_met {
            met += 1;
            violations += !r.bound_holds as usize;
            max_ratio = max_ratio.max(r.pe_knn / r.pe_lmm);
        } else if met == 0 && violations == 0 {
            eprintln!(
                "check-bounds: hypothesis not met: {}",
                r.reason.as_deref().unwrap_or("")
            );
        }
    }
    let schur = match cfg.output {
        OutputKernelSpec::Polynomial { c, d } if d >= 2 => {
            let sweep = schur_sweep(c, d, cfg.n, cfg.schur_instances, &mut rng)?;
            eprintln!(
                "check-bounds: Schur threshold for d={d}: {}",
                sweep.threshold
            );
            if c < sweep.threshold {
                eprintln!(
                    "check-bounds: c = {c} is below the threshold; (f - x)[S] may be indefinite"
                );
            }
            Some(SchurReport {
                possible_negative_eigenvalues: sweep.negative_instances > 0,
                sweep,
            })
        }
        _ => None,
    };
    let report = BoundsReport {
        instances: cfg.instances,
        hypothesis_met: met,
        violations,
        bound_holds: met > 0 && violations == 0,
        max_ratio,
        schur,
    };
    eprintln!(
        "check-bounds: {met}/{} instances meet the hypotheses, {violations} violations",
        cfg.instances
    );
    io::create_dir(&common.out)?;
    io::write_json(&common.out, "bounds.json", &report)?;
    io::write_manifest(
        &common.out,
        "check-bounds",
        &serde_json::to_value(&cfg)?,
        Some(cfg.seed),
    )?;
    Ok(EXIT_OK)
}
