//! Run configuration files (TOML). Each subcommand reads its own table;
//! command-line flags override file values.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use knn_core::kernels::OutputKernelSpec;
use knn_core::simulate::SimulationConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub qc: Option<QcSection>,
    pub fit: Option<FitSection>,
    pub simulate: Option<SimulationConfig>,
    pub bounds: Option<BoundsConfig>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QcSection {
    pub min_call_rate: Option<f64>,
    pub min_maf: Option<f64>,
    pub hwe_alpha: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub model: Option<String>,
    pub input_kernels: Option<Vec<String>>,
    pub output_kernel: Option<String>,
    pub intercept: Option<bool>,
}

fn default_bounds_n() -> usize {
    20
}
fn default_instances() -> usize {
    200
}
fn default_xi() -> Vec<f64> {
    vec![1.0]
}
fn one() -> f64 {
    1.0
}
fn default_output() -> OutputKernelSpec {
    OutputKernelSpec::poly2()
}
fn default_schur_instances() -> usize {
    100
}

/// Random instances for comparing the KNN and LMM prediction errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    #[serde(default = "default_bounds_n")]
    pub n: usize,
    #[serde(default = "default_instances")]
    pub instances: usize,
    /// One weight per input kernel.
    #[serde(default = "default_xi")]
    pub xi: Vec<f64>,
    #[serde(default = "one")]
    pub tau_tilde: f64,
    /// Defaults to `tau_tilde * min(xi)`, the largest value the bound allows.
    pub sigma_tilde_sq: Option<f64>,
    #[serde(default = "one")]
    pub phi: f64,
    #[serde(default = "default_output")]
    pub output: OutputKernelSpec,
    #[serde(default = "default_schur_instances")]
    pub schur_instances: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}
