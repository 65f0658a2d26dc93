//! Adaptive-proxy video object segmentation: forward inference, image
//! perturbation benchmark and J/F evaluation.
//!
//! Dense maths is generic over [`Real`]; the aliases below fix the storage
//! type used by the inference pipeline.

pub mod calibration;
pub mod correlation;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod num;
pub mod perturbation;
pub mod pipeline;
pub mod proxy;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod weights;

pub use error::{Result, VosError};
pub use num::Real;
pub use tensor::{ConditionCode, FeatureMap, Image, LabelMask};
pub use weights::{Param, ParamSpec, WeightBundle};

/// Single-precision feature map, the storage type of the inference pipeline.
pub type FeatureMap32 = FeatureMap<f32>;
/// Double-precision feature map, used by oracles and analysis code.
pub type FeatureMap64 = FeatureMap<f64>;
pub type ConditionCode32 = ConditionCode<f32>;
