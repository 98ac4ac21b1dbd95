//! Audio-visual saliency prediction at desk scale.
//!
//! The crate implements a full pipeline: a minimal autodiff tensor core,
//! a log-Mel audio frontend, a hierarchical video encoder with atrous
//! pooling, kernelized cross-modal attention in quadratic and linear
//! forms, consistency-correcting predictive-coding inference, a
//! multi-scale saliency decoder, the training losses, the standard
//! saliency metrics, and a deterministic synthetic-data harness.
//!
//! Start with the runnable programs in `examples/` (one per subsystem) or
//! the `avsal` CLI for the end-to-end workflow.

pub mod audio;
pub mod attention;
pub mod bench;
pub mod config;
pub mod cpc;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod saliency;
pub mod synth;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
