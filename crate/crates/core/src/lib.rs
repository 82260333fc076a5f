//! Semantic consistency cross-attention fusion of two transformer backbones.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` arrays with the handful of primitives the model
//!   needs, each paired with an explicit backward rule.
//! - [`mscff`]: the fusion block (channel cross-attention, spatial
//!   consistency gating, residual + norm + feed-forward), forward and backward.
//! - [`ssl`]: the self-supervised objectives used before target-task training
//!   (masked token reconstruction and InfoNCE) plus their data preparation.
//! - [`backbones`]: a global-attention encoder with masking and a light decoder,
//!   and a windowed-attention encoder.
//! - [`gradcheck`]: central finite differences for validating every backward pass.
//! - [`harness`]: synthetic data, the two-step training pipeline, ablation grid,
//!   checkpoints and CSV metrics.

pub mod backbones;
pub mod block;
mod error;
pub mod gradcheck;
pub mod harness;
pub mod mscff;
pub mod params;
pub mod ssl;
pub mod tensor;

pub use error::{Error, Result};
pub use mscff::{FeatureMap, FusionParams};
pub use params::Parameters;
pub use tensor::Tensor;
