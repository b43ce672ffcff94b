//! Factor analysis for high-dimensional data with dependent observations.
//!
//! The crate provides:
//! - [`covmodel`]: the basis-parametrized sample covariance model
//!   V(theta) = sum_j theta_j B_j, its constraint sets and nuisance rotation;
//! - [`reml`]: constrained restricted quasi-likelihood variance fits;
//! - [`falco`]: iterative subspace and variance estimation with warm starts,
//!   bias-corrected eigenvalues and identified factors and loadings;
//! - [`cbcv`]: cross-validated selection of the number of factors via
//!   rotated leave-one-out losses;
//! - [`denoise`]: per-gene effect estimation and factor-on-covariate
//!   inference after the factor fit;
//! - [`simgen`]: a ground-truth simulation harness and evaluation metrics;
//! - [`io`]: TSV matrix round-tripping and run manifests.

pub mod cbcv;
pub mod covmodel;
pub mod denoise;
pub mod error;
pub mod falco;
pub mod io;
pub mod linalg;
pub mod reml;
pub mod simgen;

pub use error::{Error, Result};
