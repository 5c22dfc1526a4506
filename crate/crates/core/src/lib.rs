//! Delay-aware streaming object detection toolkit.
//!
//! * [`detmetrics`] scores detections (IoU, greedy matching, COCO AP).
//! * [`numerics`] is a small dense-tensor kernel with reverse-mode autodiff.
//! * [`model`] is the windowed temporal cross-attention forecaster.
//! * [`strategy`] holds the delay estimator, proposal planner and buffers.
//! * [`harness`] simulates a streaming run on a virtual clock and evaluates it.

pub mod detmetrics;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod strategy;
pub mod timebase;

pub use detmetrics::{APReport, BBox, DetectionSet};
pub use error::{Error, Result};
