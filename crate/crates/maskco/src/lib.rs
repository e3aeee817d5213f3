//! Training driver, file formats and command line for MaskCo.
//!
//! The numerical work lives in `maskco-core`; this crate adds image folders,
//! a procedural dataset generator, checkpoints, run manifests, metrics logs
//! and the `maskco` binary.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod pretrain;
pub mod synth;

pub use error::{Error, Result};
