//! Fixed-effects synthesis of regression slopes reported by independent
//! studies.
//!
//! Each study contributes a vector of OLS coefficients together with some
//! description of their sampling covariance. The coefficient vectors are
//! stacked, a zero/one design matrix maps them onto a common parameter vector
//! (optionally extended with moderator columns), and the parameters are
//! estimated by generalized least squares against the block-diagonal
//! covariance. Diagonal weighting (per-coefficient inverse variance) and the
//! pooled-MSE variant, which reproduces a one-shot OLS fit on the
//! concatenated raw data, are special cases of the same machinery.
//!
//! The [`oracle`] module works with case-level data: it fits the per-study
//! and pooled regressions directly, checks the pooled-sample equivalence, and
//! drives Monte Carlo calibration runs.

pub mod cli;
pub mod design;
pub mod distributions;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod io;
mod linalg;
pub mod model;
pub mod oracle;

pub use design::{build_system, BuildOptions, FeatureCondition, Mode, ModeratorSpec, StackedSystem};
pub use error::{Error, Result};
pub use estimators::{gls_estimate, pooled_gls_estimate, pooled_mse, wls_univariate, SynthesisResult};
pub use inference::{TestKind, TestResult};
pub use model::{
    CovSpec, PredictorCatalog, Provenance, SlopeCovariance, StudyRegression, ValidationReport,
};
