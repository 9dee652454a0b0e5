//! certkit: a model-agnostic certification harness for probabilistic
//! regression systems.
//!
//! The crate bundles the statistical machinery needed to decide whether a
//! trained regression model with distributional outputs is fit for
//! safety-critical use:
//!
//! - marginal and conditional calibration tests, dispersion tests and the
//!   binomial aggregation rule ([`calibration`]);
//! - linear-model disentanglement verification built on OLS t-tests
//!   ([`linear`]);
//! - feature-combination holdout, feature-collapse and ensemble-disagreement
//!   checks ([`generalization`]);
//! - the parameter-free model head, median-ensemble selection and the
//!   Gaussian-mixture OOD rule ([`head`]);
//! - the weakly-supervised pairwise ELBO loss with a desk-scale trainer
//!   ([`elbo`]);
//! - bi-Lipschitz bound calculators and an empirical probe ([`lipschitz`]);
//! - seeded synthetic scenarios and the sample-size study ([`simstudy`]).
//!
//! Datasets are JSON Lines files of [`data::CertRecord`]s; external models
//! participate through the subprocess protocol in [`data::model`].

pub mod calibration;
pub mod data;
pub mod dist;
pub mod elbo;
pub mod error;
pub mod generalization;
pub mod head;
pub mod linear;
pub mod lipschitz;
pub mod report;
pub mod seeds;
pub mod simstudy;

pub use error::{Error, Result};
