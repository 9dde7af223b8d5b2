//! Differentially private estimation of Gaussians and Boolean product
//! distributions, with the metrics and tracing attacks used to check them.
//!
//! All randomness is drawn from a [`NoiseSource`], so every estimator is a
//! pure function of its inputs and seed.

pub mod attacks;
pub mod cov;
pub mod cov_unbounded;
pub mod error;
pub mod histogram;
pub mod linalg;
pub mod mean;
pub mod metrics;
pub mod noise;
pub mod normal;
pub mod privacy;
pub mod product;

pub use error::{Error, Result};
pub use histogram::{BucketKey, HistogramResult};
pub use linalg::{GaussianParams, SymMatrix};
pub use noise::NoiseSource;
pub use privacy::PrivacyBudget;
