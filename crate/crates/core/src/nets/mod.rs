//! Coordinate regressors: a pluggable feature extractor under a fixed dense
//! head, per-stage target construction and the training loop.

pub mod extractor;
pub mod model;
pub mod run;
pub mod targets;
pub mod train;

use std::path::Path;

use image::RgbImage;
use thiserror::Error;

use crate::geometry::{GeometryError, TransformChain};

pub use extractor::{build_extractor, FeatureExtractor, TinyConv, TINY_CONV};
pub use model::{CoordinateModel, ModelSpec, RegressionHead};
pub use run::{train_all, RunOptions, RunSummary, StageSummary};
pub use targets::{build_center_targets, build_face_targets, build_group_targets, GroupTarget, TeacherView};
pub use train::{fit, train_stage, EpochRecord, History, PlateauScheduler, TrainConfig, TrainPair, Trainable};

#[derive(Debug, Error)]
pub enum NetsError {
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error("extractor {id:?} is not available in this build (available: {})", available.join(", "))]
    UnknownExtractor { id: String, available: Vec<String> },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model input must be 224x224, got {width}x{height}")]
    InputSize { width: u32, height: u32 },
    #[error("target has {found} values, model outputs {expected}")]
    TargetSize { expected: usize, found: usize },
    #[error("non-finite {which} loss {value} at epoch {epoch}")]
    NonFinite {
        epoch: usize,
        which: &'static str,
        value: f64,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Schema(#[from] crate::schema::SchemaError),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<NetsError>,
    },
}

impl NetsError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        NetsError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// What a cascade stage sees: the model-side image and the chain from the
/// original image to it.
#[derive(Debug, Clone, Copy)]
pub struct StageInput<'a> {
    pub image: &'a RgbImage,
    pub chain: &'a TransformChain,
}

/// A stage model. Outputs are coordinates normalized by the input side.
pub trait Regressor: Send + Sync {
    fn output_len(&self) -> usize;
    fn regress(&self, input: &StageInput<'_>) -> Result<Vec<f64>, NetsError>;
}
