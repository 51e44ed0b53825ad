//! Adaptive multi-stage non-edge token pruning for transformer edge
//! detectors, a streamlined linear-decoder edge detector built around it, an
//! analytic cost model, and a boundary-benchmark evaluation harness.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense kernels and a reverse-mode gradient tape.
//! - [`prune`]: edge scoring, thresholding, hard token projection, pruned
//!   attention, mask accumulation and full-length recovery.
//! - [`model`]: the edge detector (patch embedding, encoder with pruning
//!   hooks, multi-stage linear fusion decoder) and its checkpoint format.
//! - [`flops`]: analytic multiply-accumulate accounting.
//! - [`eval`]: non-maximum suppression, tolerance matching, ODS/OIS/AP.
//! - [`data`]: NetPBM I/O and a deterministic synthetic dataset.
//! - [`train`]: class-balanced losses, score-head supervision and training.
//! - [`config`]: the JSON run configuration shared by the CLI.

pub mod config;
pub mod data;
pub mod eval;
pub mod flops;
pub mod model;
pub mod prune;
pub mod tensor;
pub mod train;

mod error;

pub use error::{Error, Result};
pub use tensor::{Matrix, Real};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/pruning.md")]
    mod pruning {}
    #[doc = include_str!("../../../book/src/recovery.md")]
    mod recovery {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/cost-model.md")]
    mod cost_model {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
}
