//! Penalized model-based clustering with variable-role selection (relevant,
//! regressor, redundant, independent) and likelihood-based handling of
//! missing-not-at-random data through a class-dependent mask mechanism.
//!
//! The crate provides:
//! * masked datasets and variable-role partitions ([`data`]),
//! * Gaussian block algebra for marginalizing missing coordinates ([`gauss`]),
//! * mixture EM under MAR with BIC scoring ([`em_mar`]),
//! * the penalized estimator with spectral penalty weights ([`penalized`]),
//! * variable ranking over a regularization grid ([`ranking`]),
//! * role assignment and full model selection ([`sruw`]),
//! * the class-dependent missingness mechanism ([`mnarz`]),
//! * reproducible simulation designs ([`simgen`]),
//! * evaluation metrics ([`metrics`]).

pub mod data;
pub mod em_mar;
pub mod error;
pub mod gauss;
pub mod metrics;
pub mod mnarz;
pub mod penalized;
pub mod ranking;
pub mod rng;
pub mod simgen;
pub mod sruw;

pub use data::{
    CovForm, GammaForm, GmmParams, MaskedDataset, MnarzParams, ModelSpec, OmegaForm, SruwParams,
    VariablePartition,
};
pub use error::{Error, Result};
