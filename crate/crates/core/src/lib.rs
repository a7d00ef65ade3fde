//! Multi-frame to single-frame distillation for pillar-based BEV object detection.
//!
//! The numeric core (tensors, detector, losses) is generic over [`Scalar`]; the
//! aliases below fix the precision. Training runs in `f32`, gradient checks in `f64`.

pub mod detector;
pub mod eval;
pub mod geometry;
pub mod scalar;
pub mod simdata;
pub mod tensor;
pub mod training;

pub use scalar::Scalar;

pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type ParamSet32 = tensor::ParamSet<f32>;
pub type ParamSet64 = tensor::ParamSet<f64>;
pub type Detector32 = detector::Detector<f32>;
pub type Detector64 = detector::Detector<f64>;
pub type DetectionOutput32 = detector::DetectionOutput<f32>;
