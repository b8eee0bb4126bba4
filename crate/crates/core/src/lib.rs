//! Metadata (confounder) normalization for neural-network training.
//!
//! The crate provides the closed-form MDN layer, the trainable PMDN layer
//! with its alternating optimization loop, a small hand-written network
//! library to host them, the synthetic Gaussian-quadrant benchmark, and the
//! statistics used to measure residual confounding.

pub mod error;
pub mod experiment;
pub mod linalg;
pub mod mdn;
pub mod metrics;
pub mod nn;
pub mod sweep;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::{ColumnRole, GramInverse, MetaBatch, MetadataMatrix};
pub use mdn::{MdnState, PmdnParams};
pub use nn::{CnnConfig, Mode, Network, NormMode};
pub use tensor::Tensor;
