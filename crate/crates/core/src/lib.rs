//! Numerical core for dynamic feature alignment in semi-supervised domain
//! adaptation.
//!
//! Everything here is pure computation over `alloc` collections: episode
//! generation, the normalized MLP extractor and cosine classifier, the
//! class-balanced prototype bank, multi-kernel MMD, gated pseudo-labels,
//! perturbation consistency and the training loop that composes them.
//! File formats, configuration and the command line live in the `dfa` crate.

#![no_std]
#![deny(missing_debug_implementations)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod alignment;
pub mod datasets;
mod error;
pub mod gradcheck;
pub mod linalg;
pub mod membank;
pub mod model;
pub mod perturb;
pub mod pseudolabel;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::Matrix;
