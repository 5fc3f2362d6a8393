use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use knn_core::genotype::{write_genotypes, TableFormat};
use knn_core::simulate::{gen_genotypes, gen_nonlinear, NonlinearFn};
use tempfile::TempDir;

fn knn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_knn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(
        &fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display())),
    )
    .unwrap()
}

/// Genotypes, phenotype and one covariate for 40 samples.
fn dataset(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let g = gen_genotypes(40, 60, 3).unwrap();
    let sim = gen_nonlinear(&g, NonlinearFn::Sine, 4).unwrap();
    let geno = dir.join("geno.csv");
    write_genotypes(&g, fs::File::create(&geno).unwrap(), TableFormat::Csv).unwrap();
    let pheno = dir.join("pheno.csv");
    let cov = dir.join("cov.csv");
    let mut p = String::from("sample,y\n");
    let mut c = String::from("sample,zeta\n");
    for (i, id) in g.sample_ids().iter().enumerate() {
        p += &format!("{id},{}\n", sim.y[i]);
        c += &format!("{id},{}\n", sim.z[(i, 1)]);
    }
    fs::write(&pheno, p).unwrap();
    fs::write(&cov, c).unwrap();
    (geno, pheno, cov)
}

#[test]
fn qc_writes_matrix_and_report() {
    let dir = TempDir::new().unwrap();
    let (geno, _, _) = dataset(dir.path());
    let out = dir.path().join("qc");
    let o = knn(&["qc", "--genotypes", s(&geno), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("genotypes_qc.csv").exists());
    let report = json(out.join("qc_report.json"));
    assert_eq!(report["input_snps"], 60);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn qc_empty_result_exits_2() {
    let dir = TempDir::new().unwrap();
    let geno = dir.path().join("mono.csv");
    fs::write(&geno, "sample,a,b\ns1,0,2\ns2,0,2\ns3,0,2\n").unwrap();
    let out = dir.path().join("qc");
    let o = knn(&["qc", "--genotypes", s(&geno), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(json(out.join("qc_report.json"))["retained"], 0);
    assert!(!out.join("genotypes_qc.csv").exists());
}

#[test]
fn qc_malformed_input_exits_1() {
    let dir = TempDir::new().unwrap();
    let geno = dir.path().join("bad.csv");
    fs::write(&geno, "sample,a,b\ns1,0,1\ns2,0,7\n").unwrap();
    let o = knn(&[
        "qc",
        "--genotypes",
        s(&geno),
        "--out",
        s(&dir.path().join("qc")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("row 3") && err.contains("\"7\""), "{err}");
}

#[test]
fn kernel_command_writes_square_csv() {
    let dir = TempDir::new().unwrap();
    let (geno, _, _) = dataset(dir.path());
    let out = dir.path().join("k");
    let o = knn(&[
        "kernel",
        "--genotypes",
        s(&geno),
        "--kernel",
        "ibs",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("kernel.csv")).unwrap();
    assert_eq!(text.lines().count(), 40);
    assert_eq!(json(out.join("kernel.json"))["label"], "ibs");
    let bad = knn(&[
        "kernel",
        "--genotypes",
        s(&geno),
        "--kernel",
        "rbf",
        "--out",
        s(&out),
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("product"));
}

#[test]
fn knn_fit_expands_two_kernels_and_predict_round_trips() {
    let dir = TempDir::new().unwrap();
    let (geno, pheno, cov) = dataset(dir.path());
    let out = dir.path().join("fit");
    let o = knn(&[
        "fit",
        "--genotypes",
        s(&geno),
        "--phenotype",
        s(&pheno),
        "--covariates",
        s(&cov),
        "--model",
        "knn",
        "--input-kernel",
        "product",
        "--input-kernel",
        "ibs",
        "--output-kernel",
        "poly2",
        "--write-predictor",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let model = json(out.join("model.json"));
    assert_eq!(model["model"], "knn");
    assert_eq!(model["fit"]["basis"].as_array().unwrap().len(), 7);
    assert!(out.join("predictor.csv").exists());
    let pe = json(out.join("prediction_error.json"));
    let (plug, emp) = (
        pe["pe_plug_in"].as_f64().unwrap(),
        pe["pe_total"].as_f64().unwrap(),
    );
    assert!((plug - emp).abs() <= 1e-8 * emp.max(1.0));

    let pred = dir.path().join("pred");
    let o = knn(&[
        "predict",
        "--model",
        s(&out.join("model.json")),
        "--genotypes",
        s(&geno),
        "--phenotype",
        s(&pheno),
        "--covariates",
        s(&cov),
        "--out",
        s(&pred),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let a = fs::read_to_string(out.join("predictions.csv")).unwrap();
    let b = fs::read_to_string(pred.join("predictions.csv")).unwrap();
    for (la, lb) in a.lines().zip(b.lines()).skip(1) {
        let ya: f64 = la.rsplit(',').next().unwrap().parse().unwrap();
        let yb: f64 = lb.rsplit(',').next().unwrap().parse().unwrap();
        assert!((ya - yb).abs() < 1e-8, "{la} vs {lb}");
    }
}

#[test]
fn lmm_fit_records_convergence_trace() {
    let dir = TempDir::new().unwrap();
    let (geno, pheno, cov) = dataset(dir.path());
    let out = dir.path().join("fit");
    let o = knn(&[
        "fit",
        "--genotypes",
        s(&geno),
        "--phenotype",
        s(&pheno),
        "--covariates",
        s(&cov),
        "--model",
        "lmm",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let model = json(out.join("model.json"));
    assert_eq!(model["model"], "lmm");
    assert!(!model["fit"]["trace"].as_array().unwrap().is_empty());
    assert_eq!(
        model["covariates"],
        serde_json::json!(["intercept", "zeta"])
    );
}

#[test]
fn fit_without_phenotype_file_fails() {
    let dir = TempDir::new().unwrap();
    let (geno, _, _) = dataset(dir.path());
    let missing = dir.path().join("nope.csv");
    let o = knn(&[
        "fit",
        "--genotypes",
        s(&geno),
        "--phenotype",
        s(&missing),
        "--out",
        s(&dir.path().join("f")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.csv"));
}

fn write_sim_config(dir: &Path, scenarios: &str) -> PathBuf {
    let cfg = dir.join("sim.toml");
    fs::write(
        &cfg,
        format!("[simulate]\nn = 20\np = 30\niterations = 2\nscenarios = [{scenarios}]\nmaster_seed = 5\n"),
    )
    .unwrap();
    cfg
}

#[test]
fn simulate_smoke_run_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = write_sim_config(dir.path(), "\"nonlinear-linear\"");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = knn(&[
            "--threads",
            "1",
            "simulate",
            "--config",
            s(&cfg),
            "--out",
            s(out),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let rows = fs::read_to_string(a.join("results.csv")).unwrap();
    assert_eq!(
        rows.lines().next().unwrap(),
        "scenario,method,iteration,pe_total,pe_avg,flags"
    );
    assert_eq!(rows.lines().count(), 11);
    assert_eq!(rows, fs::read_to_string(b.join("results.csv")).unwrap());
    assert_eq!(json(a.join("summary.json")).as_array().unwrap().len(), 5);
    let manifest = json(a.join("manifest.json"));
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn simulate_seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write_sim_config(dir.path(), "\"interaction\"");
    let out = dir.path().join("o");
    let o = knn(&[
        "simulate",
        "--config",
        s(&cfg),
        "--seed",
        "11",
        "--iterations",
        "1",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(json(out.join("manifest.json"))["seed"], 11);
    assert_eq!(
        fs::read_to_string(out.join("results.csv"))
            .unwrap()
            .lines()
            .count(),
        6
    );
}

#[test]
fn simulate_unknown_scenario_lists_valid_names() {
    let dir = TempDir::new().unwrap();
    let cfg = write_sim_config(dir.path(), "\"nonlinear-cosine\"");
    let o = knn(&[
        "simulate",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(
        err.contains("nonlinear-sine") && err.contains("interaction"),
        "{err}"
    );
}

#[test]
fn check_bounds_reports_bound_and_threshold() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("b.toml");
    fs::write(
        &cfg,
        "[bounds]\nn = 15\ninstances = 50\nxi = [0.5, 1.5]\ntau_tilde = 2.0\n",
    )
    .unwrap();
    let out = dir.path().join("o");
    let o = knn(&["check-bounds", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(
        stderr(&o).contains("Schur threshold for d=2: 0.5\n"),
        "{}",
        stderr(&o)
    );
    let r = json(out.join("bounds.json"));
    assert_eq!(r["bound_holds"], true);
    assert_eq!(r["hypothesis_met"], 50);
    assert_eq!(r["schur"]["possible_negative_eigenvalues"], false);
}

#[test]
fn check_bounds_flags_offsets_below_threshold() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("b.toml");
    fs::write(
        &cfg,
        "[bounds]\nn = 10\ninstances = 20\noutput = { kind = \"polynomial\", c = 0.0, d = 2 }\n",
    )
    .unwrap();
    let out = dir.path().join("o");
    let o = knn(&["check-bounds", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = json(out.join("bounds.json"));
    assert_eq!(r["schur"]["possible_negative_eigenvalues"], true);
    assert!(r["schur"]["negative_instances"].as_u64().unwrap() > 0);
}
