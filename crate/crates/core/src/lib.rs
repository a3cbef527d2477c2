//! Multi-oriented text detection by direct vertex regression.
//!
//! The pipeline: [`labelgen`] turns word quadrilaterals into dense training
//! targets, [`network`] is a small fully-convolutional bi-task model built on
//! [`tensorcore`], trained against [`loss`]; [`inference`] runs it over
//! multi-scale sliding windows and [`postprocess`] reduces the dense
//! candidates with recalled NMS. [`evalharness`] parses ICDAR-style ground
//! truth, scores detections and renders synthetic scenes.

pub mod evalharness;
pub mod geometry;
pub mod image_ops;
pub mod inference;
pub mod labelgen;
pub mod loss;
pub mod network;
pub mod postprocess;
pub mod tensorcore;

pub use geometry::{Point2, QuarterTurn, Quadrilateral};
pub use tensorcore::Tensor;
