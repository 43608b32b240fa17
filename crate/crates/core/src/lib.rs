//! Joint two-modality image classification at desk scale.
//!
//! The pipeline: ordered slice stacks are compressed into single "dynamic
//! feature images" by fitting a linear ranking function over prefix-mean
//! features ([`rankpool`]); still images and pooled images pass through a
//! frozen convolutional feature extractor ([`features`]); feature maps of
//! the two modalities are fused along a dedicated modality axis; shallow
//! trainable classifiers ([`classifier`]) consume single or fused maps; a
//! weighted majority vote combines them ([`ensemble`]); and [`metrics`]
//! scores the result.

pub mod classifier;
pub mod dataprep;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod metrics;
pub mod predictions;
pub mod rankpool;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
