//! Power-aware color transforms for emissive displays.
//!
//! The pipeline: a per-channel quadratic [`PowerModel`] of display power,
//! closed-form transforms that trade power against fidelity under a single
//! knob `lambda`, a rating-study pipeline that turns opinion scores into a
//! lower bound on `lambda`, and regressors that predict that bound from
//! simple color statistics of an unseen image.

pub mod colorspace;
pub mod error;
pub mod features;
pub mod image;
pub mod powermodel;
pub mod predictor;
pub mod study;
pub mod transform;

pub use colorspace::{ColorSpace, ColorTriple, WhitePoint};
pub use error::{Error, Result};
pub use features::{extract_features, FeatureVector};
pub use image::ImageBuffer;
pub use powermodel::PowerModel;
pub use predictor::{RegressorKind, TrainedPredictor};
pub use study::{LowerBoundFit, RatingRecord};
pub use transform::{DistanceMetric, LambdaRange, TransformConfig, TransformResult};
