//! Prediction methods selectable by name, scored by in-sample prediction
//! error on one simulated or observed dataset.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{KnnError, Result};
use crate::genotype::GenotypeMatrix;
use crate::kernels::{KernelMatrix, KernelRegistry, OutputKernelSpec};
use crate::knn::{self, KnnSpec};
use crate::lmm;

/// A response with its covariates and the genotypes kernels are built from.
/// Kernels are built on first use and reused across methods.
pub struct Dataset<'a> {
    pub genotypes: &'a GenotypeMatrix,
    pub y: &'a DVector<f64>,
    pub z: &'a DMatrix<f64>,
    kernels: &'a KernelRegistry,
    cache: RefCell<BTreeMap<String, KernelMatrix>>,
}

impl<'a> Dataset<'a> {
    pub fn new(
        genotypes: &'a GenotypeMatrix,
        y: &'a DVector<f64>,
        z: &'a DMatrix<f64>,
        kernels: &'a KernelRegistry,
    ) -> Self {
        Dataset {
            genotypes,
            y,
            z,
            kernels,
            cache: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn kernel(&self, name: &str) -> Result<KernelMatrix> {
        if let Some(k) = self.cache.borrow().get(name) {
            return Ok(k.clone());
        }
        let k = self.kernels.get(name)?.build(self.genotypes)?;
        self.cache.borrow_mut().insert(name.to_string(), k.clone());
        Ok(k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub pe_total: f64,
    pub pe_avg: f64,
    pub flags: Vec<String>,
}

impl MethodOutcome {
    fn from_residual(y: &DVector<f64>, y_hat: &DVector<f64>, flags: Vec<String>) -> Self {
        let pe_total = (y - y_hat).norm_squared();
        MethodOutcome {
            pe_total,
            pe_avg: pe_total / y.len() as f64,
            flags,
        }
    }
}

pub trait PredictionMethod: Send + Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, data: &Dataset<'_>) -> Result<MethodOutcome>;
}

/// REML-fitted LMM scored by its BLUP.
pub struct LmmMethod {
    pub name: String,
    pub kernels: Vec<String>,
}

impl PredictionMethod for LmmMethod {
    fn name(&self) -> &str {
        &self.name
    }

    fn evaluate(&self, data: &Dataset<'_>) -> Result<MethodOutcome> {
        let kernels: Vec<KernelMatrix> = self
            .kernels
            .iter()
            .map(|k| data.kernel(k))
            .collect::<Result<_>>()?;
        let fit = lmm::reml_fit(data.y, data.z, &kernels)?;
        let b = lmm::blup(&fit, data.y, data.z, &kernels)?;
        let mut flags = Vec::new();
        if !fit.converged {
            flags.push("not_converged".to_string());
        }
        if b.degenerate {
            flags.push("degenerate".to_string());
        }
        Ok(MethodOutcome::from_residual(data.y, &b.prediction, flags))
    }
}

/// MINQUE-fitted KNN scored by the asymptotic predictor.
pub struct KnnMethod {
    pub name: String,
    pub inputs: Vec<String>,
    pub output: OutputKernelSpec,
}

impl PredictionMethod for KnnMethod {
    fn name(&self) -> &str {
        &self.name
    }

    fn evaluate(&self, data: &Dataset<'_>) -> Result<MethodOutcome> {
        let kernels: Vec<KernelMatrix> = self
            .inputs
            .iter()
            .map(|k| data.kernel(k))
            .collect::<Result<_>>()?;
        let spec = KnnSpec::new(kernels, self.output)?;
        let fit = knn::fit(&spec, data.y, Some(data.z))?;
        let y_hat = knn::predict(&fit, data.y, Some(data.z))?;
        let d = fit.diagnostics();
        let mut flags = Vec::new();
        if d.phi_floored {
            flags.push("phi_floored".to_string());
        }
        if d.error_projected {
            flags.push("error_projected".to_string());
        }
        if d.ridge_applied {
            flags.push("ridge".to_string());
        }
        Ok(MethodOutcome::from_residual(data.y, &y_hat, flags))
    }
}

#[derive(Clone)]
pub struct MethodRegistry {
    methods: BTreeMap<String, Arc<dyn PredictionMethod>>,
}

impl MethodRegistry {
    pub fn empty() -> Self {
        MethodRegistry {
            methods: BTreeMap::new(),
        }
    }

    /// The LMM baseline and the four KNN input/output combinations.
    pub fn standard() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(LmmMethod {
            name: "lmm".into(),
            kernels: vec!["product".into()],
        }));
        let inputs = [("prod", "product"), ("poly", "poly2")];
        let outputs = [
            ("prod", OutputKernelSpec::Identity),
            ("poly", OutputKernelSpec::poly2()),
        ];
        for (in_tag, input) in inputs {
            for (out_tag, output) in outputs {
                r.register(Arc::new(KnnMethod {
                    name: format!("knn-{in_tag}-{out_tag}"),
                    inputs: vec![input.to_string()],
                    output,
                }));
            }
        }
        r
    }

    pub fn register(&mut self, method: Arc<dyn PredictionMethod>) {
        self.methods.insert(method.name().to_string(), method);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn PredictionMethod>> {
        self.methods
            .get(name)
            .cloned()
            .ok_or_else(|| KnnError::UnknownName {
                kind: "method",
                name: name.to_string(),
                valid: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<String> {
        self.methods.keys().cloned().collect()
    }
}

impl Default for MethodRegistry {
    fn default() -> Self {
        Self::standard()
    }
}
