//! Bayesian cell-type deconvolution of bulk expression, feature-based
//! disease classification with attributions, and report generation.

pub mod classifier;
pub mod data;
pub mod divergence;
pub mod error;
pub mod io;
pub mod linalg;
pub mod reference;
pub mod report;
pub mod rng;
pub mod select;
pub mod simulate;
pub mod stats;
pub mod unmix;

pub use data::{
    AdjustmentParams, BulkMatrix, CtsTensor, GenePrior, Hyperpriors, RefinementConfig, SampleMeta,
    SampleMetaTable,
};
pub use error::{Error, Result};
