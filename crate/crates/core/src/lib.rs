//! Kernel neural network mixed models for genetic risk prediction.
//!
//! Genotypes are turned into input kernels, an output kernel maps their
//! weighted sum to the covariance of the genetic effect, and variance
//! components are estimated with MINQUE. A linear mixed model fitted by
//! REML serves as the baseline.

pub mod error;
pub mod genotype;
pub mod kernels;
pub mod knn;
pub mod linalg;
pub mod lmm;
pub mod methods;
pub mod minque;
pub mod restrict;
pub mod simulate;

pub use error::{KnnError, Result};
