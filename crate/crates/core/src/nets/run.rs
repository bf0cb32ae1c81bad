//! Trains every stage of the cascade and writes the run directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use image::RgbImage;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::CoordinateModel;
use super::targets::{build_center_targets, build_face_targets, build_group_targets, TeacherView};
use super::train::{train_stage, EpochRecord, TrainConfig, TrainPair};
use super::NetsError;
use crate::cascade::{CascadeConfig, CASCADE_FILE, SCHEMA_FILE};
use crate::dataset::{augment, worker_rng, Manifest, Sample};
use crate::schema::LandmarkSchema;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub extractor: String,
    pub train: TrainConfig,
    pub cascade: CascadeConfig,
    /// Stage names to train; `None` trains all of them.
    pub stages: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub final_lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub extractor: String,
    pub schema: String,
    pub n_train: usize,
    pub n_val: usize,
    pub stages: Vec<StageSummary>,
}

pub const SUMMARY_FILE: &str = "run.json";

struct Loaded {
    sample: Sample,
    image: RgbImage,
}

fn load_all(manifest: &Manifest) -> Result<Vec<Loaded>, NetsError> {
    manifest
        .samples
        .par_iter()
        .map(|s| {
            Ok(Loaded {
                image: manifest.load_image(s)?,
                sample: s.clone(),
            })
        })
        .collect()
}

/// Originals followed by `copies` augmented variants of each.
fn with_augmented(items: Vec<Loaded>, config: &TrainConfig) -> Vec<Loaded> {
    let Some(aug) = &config.augment else {
        return items;
    };
    let copies = aug.copies;
    let extra: Vec<Loaded> = items
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, it)| {
            (0..copies).map(move |c| {
                let mut rng = worker_rng(config.seed, (i * copies.max(1) + c) as u64);
                let a = augment(&it.sample, &it.image, aug, &mut rng);
                Loaded {
                    sample: a.sample,
                    image: a.image,
                }
            })
        })
        .collect();
    let mut all = items;
    all.extend(extra);
    all
}

fn stage_stream(stage: &str) -> u64 {
    stage
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Pairs for `stage` over `items`, with optional center jitter.
fn stage_pairs(
    stage: &str,
    items: &[Loaded],
    schema: &LandmarkSchema,
    cascade: &CascadeConfig,
    jitter: f64,
    seed: u64,
) -> Result<Vec<TrainPair>, NetsError> {
    let stream = stage_stream(stage);
    items
        .par_iter()
        .enumerate()
        .map(|(i, it)| {
            let s = &it.sample;
            match stage {
                "face" => Ok(build_face_targets(s, &it.image, cascade)?.0),
                "centers" => {
                    let face = crate::cascade::face_view(&it.image, &s.bbox, cascade)
                        .map_err(|e| NetsError::Config(e.to_string()))?;
                    Ok(build_center_targets(s, &face, schema))
                }
                region => {
                    let spec = schema.region(region)?;
                    let tv = TeacherView::new(s, &it.image, schema, cascade)?;
                    let mut center = tv.center_of(schema, region);
                    if let (Some(c), true) = (center.as_mut(), jitter > 0.0) {
                        let mut rng = worker_rng(seed ^ stream, i as u64);
                        c.x += rng.random_range(-jitter..=jitter);
                        c.y += rng.random_range(-jitter..=jitter);
                    }
                    let g = build_group_targets(s, &tv.aligned, &tv.aligned_chain, spec, center, cascade)?;
                    if !g.outside.is_empty() {
                        log::debug!("{}: {} {region} landmarks outside the crop", s.image, g.outside.len());
                    }
                    Ok(g.pair)
                }
            }
        })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), NetsError> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| NetsError::io(path, e))
}

fn stage_dir(out: &Path, stage: &str) -> PathBuf {
    out.join(stage)
}

/// Trains the requested stages on `train`, selecting checkpoints on `val`,
/// and writes `<out>/<stage>/` plus `cascade.json`, `schema.json` and `run.json`.
pub fn train_all(
    train: &Manifest,
    val: &Manifest,
    schema: &LandmarkSchema,
    options: &RunOptions,
    out: &Path,
    mut progress: impl FnMut(&str, &EpochRecord),
) -> Result<RunSummary, NetsError> {
    options.train.validate()?;
    let schema = schema.clone().validated()?;
    for m in [train, val] {
        if m.is_empty() {
            return Err(NetsError::Config("train and validation splits must be non-empty".into()));
        }
        for (i, s) in m.samples.iter().enumerate() {
            s.validate(&schema, i)?;
        }
    }
    let all = schema.stage_names();
    let stages: Vec<String> = match &options.stages {
        None => all.clone(),
        Some(list) => {
            if let Some(bad) = list.iter().find(|s| !all.contains(s)) {
                return Err(NetsError::Config(format!(
                    "unknown stage {bad:?}; expected one of {}",
                    all.join(", ")
                )));
            }
            all.iter().filter(|s| list.contains(s)).cloned().collect()
        }
    };

    std::fs::create_dir_all(out).map_err(|e| NetsError::io(out, e))?;
    std::fs::write(out.join(SCHEMA_FILE), schema.to_json()).map_err(|e| NetsError::io(out, e))?;
    write_json(&out.join(CASCADE_FILE), &options.cascade)?;

    let train_items = with_augmented(load_all(train)?, &options.train);
    let val_items = load_all(val)?;
    let mut summary = RunSummary {
        extractor: options.extractor.clone(),
        schema: schema.name.clone(),
        n_train: train_items.len(),
        n_val: val_items.len(),
        stages: Vec::new(),
    };

    for (k, stage) in stages.iter().enumerate() {
        let started = Instant::now();
        let cfg = &options.train;
        let wrap = |e: NetsError| NetsError::Stage {
            stage: stage.clone(),
            source: Box::new(e),
        };
        let train_pairs = stage_pairs(stage, &train_items, &schema, &options.cascade, cfg.center_jitter_px, cfg.seed)
            .map_err(wrap)?;
        let val_pairs = stage_pairs(stage, &val_items, &schema, &options.cascade, 0.0, cfg.seed).map_err(wrap)?;
        let out_dim = train_pairs[0].target.len();
        let model_seed = cfg.seed.wrapping_add(k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stage_stream(stage);
        let model = CoordinateModel::new(&options.extractor, out_dim, DType::F32, model_seed).map_err(wrap)?;
        let mut rng = worker_rng(cfg.seed, stage_stream(stage));
        let history = train_stage(&model, &train_pairs, &val_pairs, cfg, &mut rng, |r| progress(stage, r)).map_err(wrap)?;

        let dir = stage_dir(out, stage);
        model.save(&dir).map_err(wrap)?;
        write_json(&dir.join("train_config.json"), cfg)?;
        std::fs::write(dir.join(SCHEMA_FILE), schema.to_json()).map_err(|e| NetsError::io(&dir, e))?;
        history.write_csv(&dir.join("history.csv"))?;
        summary.stages.push(StageSummary {
            name: stage.clone(),
            epochs: history.epochs.len(),
            best_epoch: history.best_epoch,
            best_val_loss: history.best_val_loss,
            final_lr: history.epochs.last().map(|r| r.lr).unwrap_or(cfg.learning_rate),
            seconds: started.elapsed().as_secs_f64(),
        });
        log::info!(
            "stage {stage}: best val loss {:.6} at epoch {} ({:.1}s)",
            history.best_val_loss,
            history.best_epoch,
            started.elapsed().as_secs_f64()
        );
    }
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}
