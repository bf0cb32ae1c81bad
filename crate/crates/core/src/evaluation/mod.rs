//! Normalized mean error and dataset-level reports.

pub mod ablation;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{predict, predict_with_bbox, CheckpointSet};
use crate::dataset::Manifest;
use crate::geometry::Point2;
use crate::schema::LandmarkSchema;

pub use ablation::{
    ablate_regions, data_size_curve, nested_subsets, parse_fraction, parse_grid, rows_to_csv, AblationData, AblationRow,
    GridPoint,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("inter-ocular distance is zero; NME undefined")]
    ZeroIod,
    #[error("prediction has {pred} points, ground truth {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("landmark index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("empty landmark subset")]
    EmptySubset,
    #[error("nothing to evaluate: {0}")]
    Empty(String),
    #[error("invalid ablation request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Nets(#[from] crate::nets::NetsError),
    #[error(transparent)]
    Cascade(#[from] crate::cascade::CascadeError),
    #[error(transparent)]
    Schema(#[from] crate::schema::SchemaError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Distance between the two ground-truth landmarks of `iod_pair`.
pub fn iod(gt: &[Point2], iod_pair: [usize; 2]) -> Result<f64, EvalError> {
    let [a, b] = iod_pair;
    let (pa, pb) = (
        gt.get(a).ok_or(EvalError::IndexOutOfRange(a))?,
        gt.get(b).ok_or(EvalError::IndexOutOfRange(b))?,
    );
    let d = pa.distance(pb);
    if d > 0.0 && d.is_finite() {
        Ok(d)
    } else {
        Err(EvalError::ZeroIod)
    }
}

/// Mean Euclidean error over `subset` (all landmarks when `None`) divided by
/// the ground-truth inter-ocular distance, in percent.
pub fn nme(pred: &[Point2], gt: &[Point2], iod_pair: [usize; 2], subset: Option<&[usize]>) -> Result<f64, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let norm = iod(gt, iod_pair)?;
    let all: Vec<usize>;
    let idx = match subset {
        Some(s) => s,
        None => {
            all = (0..gt.len()).collect();
            &all
        }
    };
    if idx.is_empty() {
        return Err(EvalError::EmptySubset);
    }
    let mut sum = 0.0;
    for &i in idx {
        let (p, g) = (pred.get(i).ok_or(EvalError::IndexOutOfRange(i))?, &gt[i]);
        sum += p.distance(g);
    }
    Ok(100.0 * sum / (idx.len() as f64 * norm))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Face box from the face model.
    Detector,
    /// Face box from ground truth.
    GtBbox,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "detector" => Ok(Mode::Detector),
            "gt-bbox" => Ok(Mode::GtBbox),
            other => Err(format!("unknown mode {other:?} (detector|gt-bbox)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub image: String,
    pub nme_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub image: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub mode: Mode,
    pub n_samples: usize,
    pub n_evaluated: usize,
    pub n_fail: usize,
    pub nme_percent: f64,
    pub per_region: BTreeMap<String, f64>,
    /// Mean error per landmark in pixels.
    pub per_landmark_px: Vec<f64>,
    /// Mean error per landmark divided by iod, in percent.
    pub per_landmark_iod_percent: Vec<f64>,
    pub per_sample: Vec<SampleResult>,
    pub failures: Vec<Failure>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One row per sample: `image,nme_percent,status`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["image", "nme_percent", "status"]).expect("in-memory write");
        for s in &self.per_sample {
            w.write_record([s.image.as_str(), &s.nme_percent.to_string(), "ok"])
                .expect("in-memory write");
        }
        for f in &self.failures {
            w.write_record([f.image.as_str(), "", &format!("failed: {}", f.reason)])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Per-sample errors of one evaluated prediction.
struct Scored {
    nme: f64,
    per_region: Vec<f64>,
    per_landmark_px: Vec<f64>,
    norm: f64,
}

fn score(pred: &[Point2], gt: &[Point2], schema: &LandmarkSchema) -> Result<Scored, EvalError> {
    let nme_all = nme(pred, gt, schema.iod_pair, None)?;
    let per_region = schema
        .regions
        .iter()
        .map(|r| nme(pred, gt, schema.iod_pair, Some(&r.indices)))
        .collect::<Result<_, _>>()?;
    Ok(Scored {
        nme: nme_all,
        per_region,
        per_landmark_px: pred.iter().zip(gt).map(|(p, g)| p.distance(g)).collect(),
        norm: iod(gt, schema.iod_pair)?,
    })
}

/// Runs the cascade on every sample of `manifest` and aggregates NME.
/// Samples whose prediction fails are listed and excluded.
pub fn evaluate(checkpoints: &CheckpointSet, manifest: &Manifest, mode: Mode) -> Result<EvalReport, EvalError> {
    evaluate_with(manifest, &checkpoints.schema, mode, |_, img, s| match mode {
        Mode::Detector => predict(img, checkpoints),
        Mode::GtBbox => predict_with_bbox(img, &s.bbox, checkpoints),
    })
}

/// [`evaluate`] with a caller-supplied predictor, given the sample index,
/// image and record.
pub fn evaluate_with<F>(
    manifest: &Manifest,
    schema: &LandmarkSchema,
    mode: Mode,
    predictor: F,
) -> Result<EvalReport, EvalError>
where
    F: Fn(usize, &image::RgbImage, &crate::dataset::Sample) -> Result<crate::cascade::Prediction, crate::cascade::CascadeError>
        + Sync,
{
    if manifest.is_empty() {
        return Err(EvalError::Empty("split has no samples".into()));
    }
    let outcomes: Vec<Result<Scored, String>> = manifest
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            s.validate(schema, i).map_err(|e| e.to_string())?;
            let img = manifest.load_image(s).map_err(|e| e.to_string())?;
            let pred = predictor(i, &img, s).map_err(|e| e.to_string())?;
            score(&pred.landmarks, &s.landmarks, schema).map_err(|e| e.to_string())
        })
        .collect();

    let k = schema.k;
    let mut report = EvalReport {
        schema: schema.name.clone(),
        mode,
        n_samples: manifest.len(),
        n_evaluated: 0,
        n_fail: 0,
        nme_percent: 0.0,
        per_region: BTreeMap::new(),
        per_landmark_px: vec![0.0; k],
        per_landmark_iod_percent: vec![0.0; k],
        per_sample: Vec::new(),
        failures: Vec::new(),
    };
    let mut region_sums = vec![0.0; schema.regions.len()];
    let mut total = 0.0;
    for (s, outcome) in manifest.samples.iter().zip(outcomes) {
        match outcome {
            Ok(sc) => {
                total += sc.nme;
                for (acc, v) in region_sums.iter_mut().zip(&sc.per_region) {
                    *acc += v;
                }
                for (j, e) in sc.per_landmark_px.iter().enumerate() {
                    report.per_landmark_px[j] += e;
                    report.per_landmark_iod_percent[j] += 100.0 * e / sc.norm;
                }
                report.per_sample.push(SampleResult {
                    image: s.image.clone(),
                    nme_percent: sc.nme,
                });
            }
            Err(reason) => {
                log::warn!("{}: {reason}", s.image);
                report.failures.push(Failure {
                    image: s.image.clone(),
                    reason,
                });
            }
        }
    }
    let n = report.per_sample.len();
    report.n_evaluated = n;
    report.n_fail = report.failures.len();
    if n == 0 {
        report.nme_percent = f64::NAN;
        return Ok(report);
    }
    let nf = n as f64;
    report.nme_percent = total / nf;
    for (r, sum) in schema.regions.iter().zip(region_sums) {
        report.per_region.insert(r.name.clone(), sum / nf);
    }
    for v in report
        .per_landmark_px
        .iter_mut()
        .chain(report.per_landmark_iod_percent.iter_mut())
    {
        *v /= nf;
    }
    Ok(report)
}
