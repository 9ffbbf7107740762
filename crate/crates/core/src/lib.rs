//! Label-quality tooling for multi-class segmentation: synthetic label-error
//! injection, variance-of-gradients detection of suspect labels, and
//! refurbishment of flagged labels with averaged-prediction pseudo-labels.

pub mod corruption;
pub mod dataset;
pub mod detection;
pub mod error;
pub mod experiment;
pub mod mask;
pub mod metrics;
pub mod morphology;
pub mod ops;
pub mod pipeline;
pub mod refurbish;
pub mod rng;
pub mod segmenter;
pub mod tensor;

pub use error::{Error, Result};
pub use mask::ClassMask;
pub use tensor::{Real, Tensor};
