//! Named input-kernel constructors, selectable at runtime.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{covariance_kernel, hadamard_power, ibs_kernel, product_kernel, KernelMatrix};
use crate::error::{KnnError, Result};
use crate::genotype::GenotypeMatrix;

/// Builds an n×n sample kernel from a genotype matrix.
pub trait InputKernel: Send + Sync {
    fn name(&self) -> &'static str;
    fn build(&self, g: &GenotypeMatrix) -> Result<KernelMatrix>;
}

pub struct ProductKernel;

impl InputKernel for ProductKernel {
    fn name(&self) -> &'static str {
        "product"
    }

    fn build(&self, g: &GenotypeMatrix) -> Result<KernelMatrix> {
        product_kernel(g.complete_values()?)
    }
}

pub struct CovarianceKernel;

impl InputKernel for CovarianceKernel {
    fn name(&self) -> &'static str {
        "covariance"
    }

    fn build(&self, g: &GenotypeMatrix) -> Result<KernelMatrix> {
        covariance_kernel(g)
    }
}

pub struct IbsKernel;

impl InputKernel for IbsKernel {
    fn name(&self) -> &'static str {
        "ibs"
    }

    fn build(&self, g: &GenotypeMatrix) -> Result<KernelMatrix> {
        ibs_kernel(g)
    }
}

/// Polynomial input kernel of order two, `(1 + p⁻¹GGᵀ)^∘2`.
pub struct Poly2Kernel;

impl InputKernel for Poly2Kernel {
    fn name(&self) -> &'static str {
        "poly2"
    }

    fn build(&self, g: &GenotypeMatrix) -> Result<KernelMatrix> {
        let base = product_kernel(g.complete_values()?)?;
        let shifted = KernelMatrix::gram(base.values().add_scalar(1.0), "poly2-base");
        let mut k = hadamard_power(&shifted, 2);
        k.label = "poly2".into();
        Ok(k)
    }
}

#[derive(Clone, Default)]
pub struct KernelRegistry {
    entries: BTreeMap<&'static str, Arc<dyn InputKernel>>,
}

impl KernelRegistry {
    pub fn empty() -> Self {
        KernelRegistry::default()
    }

    /// product, covariance, ibs, poly2.
    pub fn standard() -> Self {
        let mut r = KernelRegistry::empty();
        r.register(Arc::new(ProductKernel));
        r.register(Arc::new(CovarianceKernel));
        r.register(Arc::new(IbsKernel));
        r.register(Arc::new(Poly2Kernel));
        r
    }

    /// Later registrations under the same name replace earlier ones.
    pub fn register(&mut self, kernel: Arc<dyn InputKernel>) {
        self.entries.insert(kernel.name(), kernel);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn InputKernel>> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| KnnError::UnknownName {
                kind: "input kernel",
                name: name.to_string(),
                valid: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}
