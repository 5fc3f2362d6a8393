//! Monte-Carlo runs: fresh genotypes and response per iteration, every
//! method fitted and scored in-sample.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    gen_coding, gen_error_dist, gen_genotypes, gen_interaction, gen_nonlinear, ErrorDist,
    NonlinearFn, SimulatedResponse,
};
use crate::error::{KnnError, Result};
use crate::genotype::{GenotypeMatrix, Inheritance};
use crate::kernels::KernelRegistry;
use crate::methods::{Dataset, MethodRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Scenario {
    Nonlinear(NonlinearFn),
    Interaction,
    Coding(Inheritance),
    ErrorDist(ErrorDist),
}

impl Scenario {
    pub fn all() -> Vec<Scenario> {
        let mut v: Vec<Scenario> = NonlinearFn::ALL
            .into_iter()
            .map(Scenario::Nonlinear)
            .collect();
        v.push(Scenario::Interaction);
        v.push(Scenario::Coding(Inheritance::Dominant));
        v.push(Scenario::Coding(Inheritance::Recessive));
        v.push(Scenario::ErrorDist(ErrorDist::T2));
        v.push(Scenario::ErrorDist(ErrorDist::Chisq1));
        v
    }

    pub fn generate(
        &self,
        g: &GenotypeMatrix,
        n_causal: usize,
        seed: u64,
    ) -> Result<SimulatedResponse> {
        match *self {
            Scenario::Nonlinear(f) => gen_nonlinear(g, f, seed),
            Scenario::Interaction => gen_interaction(g, n_causal, seed),
            Scenario::Coding(mode) => gen_coding(g, mode, seed),
            Scenario::ErrorDist(d) => gen_error_dist(g, d, seed),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::Nonlinear(g) => write!(f, "nonlinear-{}", g.name()),
            Scenario::Interaction => write!(f, "interaction"),
            Scenario::Coding(Inheritance::Dominant) => write!(f, "coding-dominant"),
            Scenario::Coding(Inheritance::Recessive) => write!(f, "coding-recessive"),
            Scenario::ErrorDist(d) => write!(f, "error-{}", d.name()),
        }
    }
}

impl FromStr for Scenario {
    type Err = KnnError;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::all()
            .into_iter()
            .find(|sc| sc.to_string() == s)
            .ok_or_else(|| KnnError::UnknownName {
                kind: "scenario",
                name: s.to_string(),
                valid: Scenario::all()
                    .iter()
                    .map(|sc| sc.to_string())
                    .collect::<Vec<_>>()
                    .join(", "),
            })
    }
}

impl TryFrom<String> for Scenario {
    type Error = KnnError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Scenario> for String {
    fn from(s: Scenario) -> String {
        s.to_string()
    }
}

fn default_n() -> usize {
    100
}
fn default_p() -> usize {
    500
}
fn default_iterations() -> usize {
    500
}
fn default_n_causal() -> usize {
    10
}
fn default_methods() -> Vec<String> {
    [
        "lmm",
        "knn-prod-prod",
        "knn-prod-poly",
        "knn-poly-prod",
        "knn-poly-poly",
    ]
    .map(String::from)
    .to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_p")]
    pub p: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    pub scenarios: Vec<Scenario>,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_n_causal")]
    pub n_causal: usize,
}

impl SimulationConfig {
    pub fn new(scenarios: Vec<Scenario>) -> Self {
        SimulationConfig {
            n: default_n(),
            p: default_p(),
            iterations: default_iterations(),
            scenarios,
            methods: default_methods(),
            master_seed: 0,
            n_causal: default_n_causal(),
        }
    }

    pub fn validate(&self, methods: &MethodRegistry) -> Result<()> {
        if self.n < 2 || self.p < 1 || self.iterations < 1 {
            return Err(KnnError::Domain(format!(
                "need n >= 2, p >= 1, iterations >= 1; got n = {}, p = {}, iterations = {}",
                self.n, self.p, self.iterations
            )));
        }
        if self.scenarios.is_empty() || self.methods.is_empty() {
            return Err(KnnError::Domain(
                "need at least one scenario and one method".into(),
            ));
        }
        for m in &self.methods {
            methods.get(m)?;
        }
        if self.scenarios.contains(&Scenario::Interaction) && self.p < self.n_causal {
            return Err(KnnError::Dimension(format!(
                "{} causal SNPs requested from p = {}",
                self.n_causal, self.p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: String,
    pub method: String,
    pub iteration: usize,
    pub pe_total: f64,
    pub pe_avg: f64,
    /// `;`-separated diagnostics; `failed:` marks a method error.
    pub flags: String,
}

impl ResultRow {
    pub fn failed(&self) -> bool {
        self.flags.split(';').any(|f| f.starts_with("failed"))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Successful `pe_avg` values for one arm, in iteration order.
    pub fn pe_avg(&self, scenario: &str, method: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.scenario == scenario && r.method == method && !r.failed())
            .map(|r| r.pe_avg)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub method: String,
    pub count: usize,
    pub failures: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

/// Five-number summaries of `pe_avg` per scenario and method, in first-seen order.
pub fn summarize(table: &ResultsTable) -> Vec<SummaryRow> {
    let mut arms: Vec<(String, String)> = Vec::new();
    for r in &table.rows {
        let key = (r.scenario.clone(), r.method.clone());
        if !arms.contains(&key) {
            arms.push(key);
        }
    }
    arms.into_iter()
        .map(|(scenario, method)| {
            let mut v = table.pe_avg(&scenario, &method);
            let total = table
                .rows
                .iter()
                .filter(|r| r.scenario == scenario && r.method == method)
                .count();
            v.sort_by(f64::total_cmp);
            SummaryRow {
                count: v.len(),
                failures: total - v.len(),
                min: quantile(&v, 0.0),
                q1: quantile(&v, 0.25),
                median: quantile(&v, 0.5),
                q3: quantile(&v, 0.75),
                max: quantile(&v, 1.0),
                scenario,
                method,
            }
        })
        .collect()
}

fn run_iteration(
    config: &SimulationConfig,
    scenario: Scenario,
    iteration: usize,
    methods: &MethodRegistry,
    kernels: &KernelRegistry,
) -> Vec<ResultRow> {
    let seed = config.master_seed.wrapping_add(iteration as u64);
    let fail_all = |msg: String| -> Vec<ResultRow> {
        config
            .methods
            .iter()
            .map(|m| ResultRow {
                scenario: scenario.to_string(),
                method: m.clone(),
                iteration,
                pe_total: f64::NAN,
                pe_avg: f64::NAN,
                flags: format!("failed: {msg}"),
            })
            .collect()
    };
    let g = match gen_genotypes(config.n, config.p, seed) {
        Ok(g) => g,
        Err(e) => return fail_all(e.to_string()),
    };
    let sim = match scenario.generate(&g, config.n_causal, seed) {
        Ok(s) => s,
        Err(e) => return fail_all(e.to_string()),
    };
    let data = Dataset::new(&g, &sim.y, &sim.z, kernels);
    config
        .methods
        .iter()
        .map(|name| {
            let outcome = methods.get(name).and_then(|m| m.evaluate(&data));
            let (pe_total, pe_avg, flags) = match outcome {
                Ok(o) => (o.pe_total, o.pe_avg, o.flags.join(";")),
                Err(e) => (f64::NAN, f64::NAN, format!("failed: {e}")),
            };
            ResultRow {
                scenario: scenario.to_string(),
                method: name.clone(),
                iteration,
                pe_total,
                pe_avg,
                flags,
            }
        })
        .collect()
}

/// Runs every scenario for `config.iterations` iterations. Iterations run in
/// parallel; `sink` sees rows in (scenario, iteration, method) order.
pub fn run_monte_carlo(
    config: &SimulationConfig,
    methods: &MethodRegistry,
    kernels: &KernelRegistry,
    mut sink: impl FnMut(&ResultRow) -> Result<()>,
) -> Result<ResultsTable> {
    config.validate(methods)?;
    let chunk = (4 * rayon::current_num_threads()).max(1);
    let mut table = ResultsTable::default();
    for &scenario in &config.scenarios {
        let mut start = 0;
        while start < config.iterations {
            let end = (start + chunk).min(config.iterations);
            let batch: Vec<Vec<ResultRow>> = (start..end)
                .into_par_iter()
                .map(|it| run_iteration(config, scenario, it, methods, kernels))
                .collect();
            for row in batch.into_iter().flatten() {
                sink(&row)?;
                table.rows.push(row);
            }
            start = end;
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::all() {
            assert_eq!(s.to_string().parse::<Scenario>().unwrap(), s);
        }
        let err = "nonlinear-cosine"
            .parse::<Scenario>()
            .unwrap_err()
            .to_string();
        assert!(err.contains("nonlinear-sine"), "{err}");
    }

    #[test]
    fn quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.25), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn small_run_shape_and_determinism() {
        let mut config = SimulationConfig::new(vec![Scenario::Nonlinear(NonlinearFn::Linear)]);
        config.n = 20;
        config.p = 30;
        config.iterations = 2;
        let (m, k) = (MethodRegistry::standard(), KernelRegistry::standard());
        let mut seen = 0;
        let a = run_monte_carlo(&config, &m, &k, |_| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(a.rows.len(), 10);
        assert_eq!(seen, 10);
        let b = run_monte_carlo(&config, &m, &k, |_| Ok(())).unwrap();
        assert_eq!(format!("{:?}", a.rows), format!("{:?}", b.rows));
        let summary = summarize(&a);
        assert_eq!(summary.len(), 5);
        assert!(summary.iter().all(|s| s.count + s.failures == 2));
    }

    #[test]
    fn unknown_method_is_rejected() {
        let mut config = SimulationConfig::new(vec![Scenario::Interaction]);
        config.methods = vec!["svm".into()];
        let r = run_monte_carlo(
            &config,
            &MethodRegistry::standard(),
            &KernelRegistry::standard(),
            |_| Ok(()),
        );
        assert!(matches!(r, Err(KnnError::UnknownName { .. })));
    }
}
