//! Multi-patch aesthetics scoring: rating distributions and EMD, the
//! EMD-certainty loss family, aspect-ratio-preserving patch selection, a small
//! convolutional scorer, training loops, evaluation metrics and dataset I/O.

pub mod dataio;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod patchgrid;
pub mod ratings;
pub mod scorer;
pub mod trainer;

pub use error::{Error, Result};
