//! Contrastive mask prediction (MaskCo) building blocks.
//!
//! The crate is `no_std` + `alloc`. Everything here is a pure function of its
//! inputs and an explicit RNG: view geometry, region sampling and masking, the
//! Siamese encoder with its mask prediction head, the region-level InfoNCE loss,
//! the training step with its momentum target update, and the analysis tools
//! (feature distance, linear probing, mask response maps).
//!
//! File formats, image decoding, the command line and the training driver live
//! in the `maskco` companion crate.
#![no_std]
#![deny(unsafe_op_in_unsafe_fn)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod analysis;
pub mod contrast;
mod error;
pub mod geometry;
pub mod model;
pub mod nn;
mod real;
pub mod sampling;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{BBox, ViewTransform};
pub use real::Real;
pub use tensor::Tensor;
