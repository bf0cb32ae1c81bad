//! Annotation workflow: batches of prefilled tasks, leased claiming,
//! versioned corrections, metrics and background retraining.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};

use chrono::Duration;
use eld_core::dataset::{Labels, Manifest, Sample};
use eld_core::geometry::Point2;
use eld_core::schema::LandmarkSchema;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::{format_ts, parse_ts, Clock, SystemClock};
use crate::error::{AnnotateError, Result};
use crate::metrics::{batch_metrics, median_time_reduction, shifted_flags, BatchMetrics, DoneRecord};
use crate::prefill::{PrefillSource, RunDirResolver, SourceResolver, Trainer};
use crate::store::{CorrectionRecord, NewCorrection, NewTask, RunRecord, Store, TaskRecord, TaskState};

pub const DEFAULT_LEASE_MINUTES: i64 = 30;
pub const STORE_FILE: &str = "annotate.sqlite";
pub const POOL_FILE: &str = "pool.json";

#[derive(Debug, Clone)]
pub struct AnnotatorConfig {
    pub data_dir: PathBuf,
    /// How long a claim is held before the task returns to the queue.
    pub lease: Duration,
}

impl AnnotatorConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            lease: Duration::minutes(DEFAULT_LEASE_MINUTES),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionView {
    pub name: String,
    pub indices: Vec<usize>,
}

/// Task as served to annotators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: i64,
    pub batch_id: i64,
    pub image_url: String,
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub schema: String,
    pub k: usize,
    pub regions: Vec<RegionView>,
    pub prefill: Vec<Point2>,
    pub state: TaskState,
    pub annotator: Option<String>,
    pub lease_expires_at: Option<String>,
    pub prefill_warning: Option<String>,
}

/// Body of a correction submission. Coordinates are nullable on the wire so
/// that non-finite values are reported as such rather than as parse errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectionRequest {
    pub landmarks: Vec<[Option<f64>; 2]>,
    pub annotator: String,
    pub started_at: String,
    pub finished_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pool {
    pub batches: Vec<i64>,
    pub hash: String,
    pub manifest: Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub from: i64,
    pub to: i64,
    pub median_from: Option<f64>,
    pub median_to: Option<f64>,
    pub reduction_percent: Option<f64>,
}

/// SHA-256 of the manifest's canonical JSON.
pub fn snapshot_hash(manifest: &Manifest) -> String {
    hex::encode(Sha256::digest(manifest.to_json().as_bytes()))
}

pub struct Annotator {
    store: Store,
    config: AnnotatorConfig,
    clock: Arc<dyn Clock>,
    resolver: Arc<dyn SourceResolver>,
    trainer: Arc<dyn Trainer>,
    default_source: RwLock<Option<Arc<dyn PrefillSource>>>,
    retraining: AtomicBool,
}

impl Annotator {
    /// Opens (or creates) the store under `config.data_dir`.
    pub fn open(config: AnnotatorConfig, trainer: Arc<dyn Trainer>) -> Result<Self> {
        std::fs::create_dir_all(&config.data_dir).map_err(|source| AnnotateError::Io {
            path: config.data_dir.clone(),
            source,
        })?;
        let store = Store::open(&config.data_dir.join(STORE_FILE))?;
        Ok(Self {
            store,
            config,
            clock: Arc::new(SystemClock),
            resolver: Arc::new(RunDirResolver),
            trainer,
            default_source: RwLock::new(None),
            retraining: AtomicBool::new(false),
        })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_resolver(mut self, resolver: Arc<dyn SourceResolver>) -> Self {
        self.resolver = resolver;
        self
    }

    pub fn with_default_source(self, source: Arc<dyn PrefillSource>) -> Self {
        self.set_default_source(source);
        self
    }

    pub fn set_default_source(&self, source: Arc<dyn PrefillSource>) {
        *self.default_source.write().unwrap_or_else(|p| p.into_inner()) = Some(source);
    }

    fn default_source(&self) -> Option<Arc<dyn PrefillSource>> {
        self.default_source.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn config(&self) -> &AnnotatorConfig {
        &self.config
    }

    pub fn is_retraining(&self) -> bool {
        self.retraining.load(Ordering::SeqCst)
    }

    /// One pending task per manifest image. Prefill comes from
    /// `checkpoint_run` if given, else from the current default source; with
    /// neither, tasks start empty.
    pub fn enqueue_batch(&self, manifest_path: &Path, checkpoint_run: Option<&str>) -> Result<i64> {
        let manifest = Manifest::load_with(manifest_path, Labels::Optional)?;
        let schema = manifest.resolve_schema()?;
        let source = match checkpoint_run {
            Some(run) => Some(self.resolver.resolve(run).map_err(AnnotateError::BadRequest)?),
            None => self.default_source(),
        };
        let tasks = manifest
            .samples
            .par_iter()
            .map(|s| new_task(&manifest, s, &schema, source.as_deref()))
            .collect::<Result<Vec<_>>>()?;
        let path = std::path::absolute(manifest_path).unwrap_or_else(|_| manifest_path.to_path_buf());
        self.store.insert_batch(
            &path.to_string_lossy(),
            &manifest.schema,
            checkpoint_run,
            &tasks,
            self.clock.now(),
        )
    }

    pub fn next_task(&self, annotator: &str) -> Result<Option<TaskView>> {
        if annotator.is_empty() {
            return Err(AnnotateError::BadRequest("annotator id is required".into()));
        }
        let now = self.clock.now();
        match self.store.claim_next(annotator, now, now + self.config.lease)? {
            Some(t) => Ok(Some(self.view(t)?)),
            None => Ok(None),
        }
    }

    pub fn task(&self, id: i64) -> Result<TaskView> {
        self.view(self.store.task(id)?)
    }

    fn view(&self, t: TaskRecord) -> Result<TaskView> {
        let batch = self.store.batch(t.batch_id)?;
        let schema = LandmarkSchema::by_name(&batch.schema).map_err(|e| AnnotateError::Internal(e.to_string()))?;
        Ok(TaskView {
            task_id: t.id,
            batch_id: t.batch_id,
            image_url: format!("/images/{}", t.id),
            image: t.image_path,
            width: t.sample.width,
            height: t.sample.height,
            schema: schema.name.clone(),
            k: schema.k,
            regions: schema
                .regions
                .iter()
                .map(|r| RegionView {
                    name: r.name.clone(),
                    indices: r.indices.clone(),
                })
                .collect(),
            prefill: t.prefill,
            state: t.state,
            annotator: t.owner,
            lease_expires_at: t.lease_until.filter(|_| t.state == TaskState::Claimed),
            prefill_warning: t.prefill_warning,
        })
    }

    pub fn submit(&self, task_id: i64, req: &CorrectionRequest) -> Result<CorrectionRecord> {
        let task = self.store.task(task_id)?;
        let batch = self.store.batch(task.batch_id)?;
        let schema = LandmarkSchema::by_name(&batch.schema).map_err(|e| AnnotateError::Internal(e.to_string()))?;
        if req.annotator.is_empty() {
            return Err(AnnotateError::BadRequest("annotator id is required".into()));
        }
        if req.landmarks.len() != schema.k {
            return Err(AnnotateError::Unprocessable(format!(
                "schema {} expects {} landmarks, got {}",
                schema.name,
                schema.k,
                req.landmarks.len()
            )));
        }
        let mut landmarks = Vec::with_capacity(schema.k);
        for (i, [x, y]) in req.landmarks.iter().enumerate() {
            match (x, y) {
                (Some(x), Some(y)) if x.is_finite() && y.is_finite() => landmarks.push(Point2::new(*x, *y)),
                _ => return Err(AnnotateError::Unprocessable(format!("landmark {i} is not finite"))),
            }
        }
        let ts = |field: &str, s: &str| {
            parse_ts(s).ok_or_else(|| AnnotateError::BadRequest(format!("{field}: not an ISO-8601 timestamp: {s:?}")))
        };
        let started = ts("started_at", &req.started_at)?;
        let finished = ts("finished_at", &req.finished_at)?;
        if finished < started {
            return Err(AnnotateError::Unprocessable("finished_at precedes started_at".into()));
        }
        let (started_at, finished_at) = (format_ts(started), format_ts(finished));
        let c = NewCorrection {
            annotator: &req.annotator,
            landmarks: &landmarks,
            started_at: &started_at,
            finished_at: &finished_at,
        };
        self.store
            .submit(task_id, &c, |t| shifted_flags(&t.prefill, &landmarks), self.clock.now())
    }

    pub fn corrections(&self, task_id: i64) -> Result<Vec<CorrectionRecord>> {
        self.store.task(task_id)?;
        self.store.corrections(task_id)
    }

    /// Image bytes and content type.
    pub fn image(&self, task_id: i64) -> Result<(Vec<u8>, &'static str)> {
        let t = self.store.task(task_id)?;
        let path = PathBuf::from(&t.image_path);
        let bytes = std::fs::read(&path).map_err(|source| AnnotateError::Io { path: path.clone(), source })?;
        Ok((bytes, content_type(&path)))
    }

    pub fn batch_metrics(&self, batch_id: i64) -> Result<BatchMetrics> {
        let batch = self.store.batch(batch_id)?;
        let k = LandmarkSchema::by_name(&batch.schema)
            .map_err(|e| AnnotateError::Internal(e.to_string()))?
            .k;
        let n_tasks = self.store.batch_tasks(batch_id)?.len();
        let done = self
            .store
            .latest_corrections(&[batch_id])?
            .into_iter()
            .map(|(_, c)| DoneRecord {
                seconds: seconds_between(&c.started_at, &c.finished_at),
                shifted: c.shifted,
            })
            .collect::<Vec<_>>();
        Ok(batch_metrics(batch_id, n_tasks, k, &done))
    }

    pub fn reduction(&self, from: i64, to: i64) -> Result<Reduction> {
        let a = self.batch_metrics(from)?;
        let b = self.batch_metrics(to)?;
        Ok(Reduction {
            from,
            to,
            median_from: a.time.as_ref().map(|t| t.median),
            median_to: b.time.as_ref().map(|t| t.median),
            reduction_percent: median_time_reduction(&a, &b),
        })
    }

    /// Latest corrections of the done tasks in `batches`, as a manifest
    /// ordered by task id.
    pub fn pool(&self, batches: &[i64]) -> Result<Pool> {
        if batches.is_empty() {
            return Err(AnnotateError::Unprocessable("no batches selected".into()));
        }
        let mut ids = batches.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let mut schema: Option<String> = None;
        for &b in &ids {
            let rec = self.store.batch(b)?;
            match &schema {
                Some(s) if *s != rec.schema => {
                    return Err(AnnotateError::Unprocessable(format!(
                        "batch {b} uses schema {}, others use {s}",
                        rec.schema
                    )));
                }
                _ => schema = Some(rec.schema),
            }
        }
        let samples = self
            .store
            .latest_corrections(&ids)?
            .into_iter()
            .map(|(t, c)| corrected_sample(t.sample, c.landmarks))
            .collect();
        let manifest = Manifest::new(schema.as_deref().unwrap_or_default(), samples);
        Ok(Pool {
            batches: ids,
            hash: snapshot_hash(&manifest),
            manifest,
        })
    }

    /// Snapshots the pool and trains on it in the background. At most one
    /// retraining runs at a time.
    pub fn retrain(self: &Arc<Self>, batches: &[i64]) -> Result<i64> {
        if self
            .retraining
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .is_err()
        {
            return Err(AnnotateError::Conflict("a retraining run is already in progress".into()));
        }
        match self.start_run(batches) {
            Ok(id) => Ok(id),
            Err(e) => {
                self.retraining.store(false, Ordering::SeqCst);
                Err(e)
            }
        }
    }

    fn start_run(self: &Arc<Self>, batches: &[i64]) -> Result<i64> {
        let pool = self.pool(batches)?;
        if pool.manifest.is_empty() {
            return Err(AnnotateError::Unprocessable("the selected pool has no corrected samples".into()));
        }
        let id = self
            .store
            .insert_run(&pool.batches, &pool.hash, pool.manifest.len(), self.clock.now())?;
        let out_dir = self.config.data_dir.join("runs").join(format!("run-{id}"));
        let prepared = pool
            .manifest
            .save(&out_dir.join(POOL_FILE))
            .map_err(AnnotateError::from)
            .and_then(|_| self.store.set_run_dir(id, &out_dir.to_string_lossy()));
        if let Err(e) = prepared {
            self.store.finish_run(id, Some(&e.to_string()), self.clock.now())?;
            return Err(e);
        }
        let me = Arc::clone(self);
        let spawned = std::thread::Builder::new()
            .name(format!("retrain-{id}"))
            .spawn(move || me.run_training(id, pool.manifest, out_dir));
        if let Err(e) = spawned {
            self.store.finish_run(id, Some(&e.to_string()), self.clock.now())?;
            return Err(AnnotateError::Internal(e.to_string()));
        }
        Ok(id)
    }

    fn run_training(&self, id: i64, manifest: Manifest, out_dir: PathBuf) {
        log::info!("run {id}: training on {} samples in {}", manifest.len(), out_dir.display());
        let trainer = Arc::clone(&self.trainer);
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| trainer.train(&manifest, &out_dir)))
            .unwrap_or_else(|_| Err("trainer panicked".to_string()));
        let error = match result {
            Ok(source) => {
                self.set_default_source(source);
                None
            }
            Err(e) => {
                log::error!("run {id} failed: {e}");
                Some(e)
            }
        };
        if let Err(e) = self.store.finish_run(id, error.as_deref(), self.clock.now()) {
            log::error!("run {id}: could not record completion: {e}");
        }
        self.retraining.store(false, Ordering::SeqCst);
    }

    pub fn run(&self, id: i64) -> Result<RunRecord> {
        self.store.run(id)
    }
}

fn new_task(
    manifest: &Manifest,
    sample: &Sample,
    schema: &LandmarkSchema,
    source: Option<&dyn PrefillSource>,
) -> Result<NewTask> {
    let path = manifest.image_path(sample);
    let path = std::path::absolute(&path).unwrap_or(path);
    let (prefill, prefill_warning) = match source {
        None => (Vec::new(), None),
        Some(src) => {
            let image = eld_core::dataset::load_rgb(&path)
                .map_err(|e| AnnotateError::Unprocessable(format!("image not readable: {e}")))?;
            match src.prefill(sample, &image) {
                Ok(p) if p.len() == schema.k && p.iter().all(Point2::is_finite) => (p, None),
                Ok(p) => (Vec::new(), Some(format!("prediction returned {} usable points", p.len()))),
                Err(e) => {
                    log::warn!("prefill failed for {}: {e}", path.display());
                    (Vec::new(), Some(e))
                }
            }
        }
    };
    if source.is_none() {
        image::image_dimensions(&path)
            .map_err(|e| AnnotateError::Unprocessable(format!("image not readable: {}: {e}", path.display())))?;
    }
    let image_path = path.to_string_lossy().into_owned();
    Ok(NewTask {
        sample: Sample {
            image: image_path.clone(),
            ..sample.clone()
        },
        image_path,
        prefill,
        prefill_warning,
    })
}

fn corrected_sample(sample: Sample, landmarks: Vec<Point2>) -> Sample {
    let visible = sample.visible.filter(|v| v.len() == landmarks.len());
    Sample {
        landmarks,
        visible,
        ..sample
    }
}

fn seconds_between(started: &str, finished: &str) -> f64 {
    match (parse_ts(started), parse_ts(finished)) {
        (Some(a), Some(b)) => (b - a).num_microseconds().map_or(f64::NAN, |us| us as f64 / 1e6),
        _ => f64::NAN,
    }
}

fn content_type(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("bmp") => "image/bmp",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}
