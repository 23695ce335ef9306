//! RGB-D facial expression recognition with a single-branch vision
//! transformer.
//!
//! The crate implements the full training stack at desk scale: a tape-based
//! reverse-mode autodiff engine over dense f64 tensors, a pre-norm
//! transformer encoder, channel-replacement fusion of RGB and depth inputs,
//! confidence-gated relabeling of noisy samples into expression subclasses,
//! and a subject-disjoint cross-validation harness with a synthetic dataset
//! generator for end-to-end testing.

pub mod encoder;
pub mod error;
pub mod filter;
pub mod fusion;
pub mod harness;
pub mod pipeline;
pub mod tensor;

pub use encoder::{EncoderParams, FusionMode, ModelConfig};
pub use error::Error;
pub use filter::LabelState;
pub use fusion::ImagePair;
pub use harness::{ConfusionMatrix, ExperimentConfig, FoldPlan, OptimizerConfig};
pub use pipeline::{AugmentationConfig, DatasetManifest, ManifestRecord};
pub use tensor::{Tape, Tensor, Var};

pub type Result<T> = std::result::Result<T, Error>;
