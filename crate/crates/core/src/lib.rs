//! Any-order score-function gradient estimators for Markov stochastic
//! computation graphs.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: scalar reverse-mode AD whose derivatives are graph
//!   expressions, plus `stop_gradient` and the magic-box operator.
//! * [`mdp`]: tabular MDPs, random generation, softmax policies, rollouts.
//! * [`oracle`]: analytic values, exact derivatives of any order and a
//!   brute-force trajectory enumerator.
//! * [`advantage`]: GAE and discounted returns.
//! * [`estimators`]: DiCE, DiCE with baseline, LVC and Loaded DiCE.
//! * [`experiments`]: batch estimation, bias/variance sweeps, correlation.
//! * [`gradcheck`]: finite-difference checks and random expressions.
//! * [`metademo`]: a tabular meta-learning loop that differentiates through
//!   a policy-gradient step.

pub mod advantage;
pub mod autodiff;
mod error;
pub mod estimators;
pub mod experiments;
pub mod gradcheck;
pub mod mdp;
pub mod metademo;
pub mod oracle;
pub mod rng;

pub use advantage::{AdvantageConfig, AdvantageKind, AdvantageSeries};
pub use autodiff::{AutodiffError, ExprRef, GradientRequest, Graph};
pub use error::{Error, Result};
pub use estimators::{EstimatorConfig, EstimatorFamily, ObjectiveValue};
pub use mdp::{Mdp, PolicyTable, TabularPolicy, Trajectory};
pub use oracle::{DerivativeStack, ValueSource, ValueTable};
pub use rng::RngSeed;

/// Version string recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
