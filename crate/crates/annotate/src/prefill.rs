//! Sources of model predictions used to prefill tasks, and the retraining hook.

use std::path::Path;
use std::sync::Arc;

use eld_core::cascade::{predict, CheckpointSet};
use eld_core::dataset::{split, Manifest, Sample};
use eld_core::geometry::Point2;
use eld_core::nets::{train_all, RunOptions};
use image::RgbImage;

pub trait PrefillSource: Send + Sync {
    fn prefill(&self, sample: &Sample, image: &RgbImage) -> Result<Vec<Point2>, String>;
}

/// Full cascade prediction from a loaded run.
pub struct CheckpointPrefill(pub CheckpointSet);

impl PrefillSource for CheckpointPrefill {
    fn prefill(&self, _sample: &Sample, image: &RgbImage) -> Result<Vec<Point2>, String> {
        predict(image, &self.0).map(|p| p.landmarks).map_err(|e| e.to_string())
    }
}

/// Turns the `checkpoint_run` string of a batch request into a source.
pub trait SourceResolver: Send + Sync {
    fn resolve(&self, run: &str) -> Result<Arc<dyn PrefillSource>, String>;
}

/// Treats the string as a run directory.
#[derive(Debug, Default, Clone, Copy)]
pub struct RunDirResolver;

impl SourceResolver for RunDirResolver {
    fn resolve(&self, run: &str) -> Result<Arc<dyn PrefillSource>, String> {
        let set = CheckpointSet::load(Path::new(run)).map_err(|e| format!("{run}: {e}"))?;
        Ok(Arc::new(CheckpointPrefill(set)))
    }
}

/// Trains a model set on the corrected pool and returns it as the next
/// prefill source.
pub trait Trainer: Send + Sync {
    fn train(&self, pool: &Manifest, out_dir: &Path) -> Result<Arc<dyn PrefillSource>, String>;
}

/// Full cascade training. Pools of at least ten samples are split 85:15
/// into train and validation; smaller pools validate on the training set.
pub struct CascadeTrainer {
    pub options: RunOptions,
    pub seed: u64,
}

impl Trainer for CascadeTrainer {
    fn train(&self, pool: &Manifest, out_dir: &Path) -> Result<Arc<dyn PrefillSource>, String> {
        let schema = pool.resolve_schema().map_err(|e| e.to_string())?;
        let (train, val) = if pool.len() >= 10 {
            let s = split(pool, [0.85, 0.15, 0.0], self.seed).map_err(|e| e.to_string())?;
            (s.train, s.val)
        } else {
            (pool.clone(), pool.clone())
        };
        train_all(&train, &val, &schema, &self.options, out_dir, |_, _| {}).map_err(|e| e.to_string())?;
        let set = CheckpointSet::load(out_dir).map_err(|e| e.to_string())?;
        Ok(Arc::new(CheckpointPrefill(set)))
    }
}
