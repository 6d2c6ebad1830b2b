//! Cascaded semi-dense feature matching.

pub mod backbone;
pub mod cascade;
pub mod config;
pub mod error;
pub mod eval;
pub mod feature;
pub mod geometry;
pub mod interaction;
pub mod layers;
pub mod ops;
pub mod pipeline;
pub mod refine;
pub mod selftest;
pub mod supervision;
pub mod tensor;
pub mod weights;

pub use config::{Mode, PadPolicy, PipelineConfig};
pub use backbone::{Backbone, BackboneConfig, Variant};
pub use error::{CaspError, Result};
pub use feature::{FeatureMap, FeaturePyramid};
pub use pipeline::{MatchReport, Pipeline, PipelineOutput, PipelineWeights};
pub use tensor::Tensor;
pub use weights::WeightStore;
