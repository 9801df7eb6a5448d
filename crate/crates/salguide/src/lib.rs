//! Explanation-aware training engine and saliency-evaluation toolkit.
//!
//! Trains a small convolutional binary classifier whose objective combines
//! binary cross-entropy with a Grad-CAM-derived explanation loss computed
//! against coarse bounding-box annotations, and evaluates explanation
//! quality with annotation-coverage and saliency-precision metrics.

pub mod annotations;
pub mod cli;
pub mod diffcore;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod scores;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
