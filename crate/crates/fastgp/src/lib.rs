//! Exact fast Matérn kernel matrix-vector multiplication via weighted
//! empirical-CDF decomposition, plus the iterative Gaussian-process
//! inference stack built on top of it: preconditioned conjugate gradients
//! with partial Lanczos tridiagonalization, stochastic log-determinant and
//! trace estimation, ADAM hyperparameter optimization, and joint
//! fixed-effects / nugget estimation.

pub mod block;
pub mod cdf;
pub mod data;
pub mod dense;
pub mod error;
pub mod kernels;
pub mod check;
pub mod gp;
pub mod mvm;
pub mod scaling;
pub mod solver;

pub use data::Dataset;
pub use error::{Error, Result};
pub use kernels::{KernelForm, KernelSpec, MaternNu};
