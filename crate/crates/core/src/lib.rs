//! Ensemble landmark detection: a face detector, a region-center detector,
//! eye alignment, and per-region specialist regressors whose outputs are
//! mapped back into the original image.

pub mod cascade;
pub mod dataset;
pub mod evaluation;
pub mod geometry;
pub mod nets;
pub mod schema;

/// Side of every model input, in pixels.
pub const MODEL_SIDE: u32 = 224;
