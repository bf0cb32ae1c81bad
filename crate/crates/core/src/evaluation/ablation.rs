//! Region-size and training-set-size sweeps.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, EvalError, Mode};
use crate::cascade::CheckpointSet;
use crate::dataset::Manifest;
use crate::nets::{train_all, CoordinateModel, RunOptions};
use crate::schema::LandmarkSchema;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    /// `eyes`, `ears` or a region name.
    pub axis: String,
    pub fraction: f64,
    /// The fraction as written, e.g. `1/3`.
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub nme_percent: f64,
    pub n_fail: usize,
}

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["axis", "value", "nme_percent", "n_fail"]).expect("in-memory write");
    for r in rows {
        w.write_record([r.axis.as_str(), &r.value, &r.nme_percent.to_string(), &r.n_fail.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// `a/b` or a decimal in (0, 1].
pub fn parse_fraction(text: &str) -> Result<f64, EvalError> {
    let t = text.trim();
    let bad = || EvalError::Invalid(format!("bad fraction {t:?}"));
    let v = match t.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            a / b
        }
        None => t.parse().map_err(|_| bad())?,
    };
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(bad())
    }
}

/// Parses `eyes=1/2,1/3,1/4;ears=1/2`.
pub fn parse_grid(spec: &str) -> Result<Vec<GridPoint>, EvalError> {
    let mut out = Vec::new();
    for block in spec.split(';').map(str::trim).filter(|b| !b.is_empty()) {
        let (axis, values) = block
            .split_once('=')
            .ok_or_else(|| EvalError::Invalid(format!("expected axis=values in {block:?}")))?;
        for v in values.split(',').map(str::trim).filter(|v| !v.is_empty()) {
            out.push(GridPoint {
                axis: axis.trim().to_string(),
                fraction: parse_fraction(v)?,
                label: v.to_string(),
            });
        }
    }
    if out.is_empty() {
        return Err(EvalError::Invalid("empty grid".into()));
    }
    Ok(out)
}

/// Regions an axis name refers to.
pub fn axis_regions(schema: &LandmarkSchema, axis: &str) -> Result<Vec<String>, EvalError> {
    let names: Vec<String> = match axis {
        "eyes" => schema.eye_regions.to_vec(),
        "ears" => schema
            .regions
            .iter()
            .filter(|r| r.name.ends_with("ear"))
            .map(|r| r.name.clone())
            .collect(),
        name => vec![schema.region(name)?.name.clone()],
    };
    for n in &names {
        if !schema.region(n)?.magnified {
            return Err(EvalError::Invalid(format!("region {n:?} is not cropped")));
        }
    }
    if names.is_empty() {
        return Err(EvalError::Invalid(format!("axis {axis:?} matches no region")));
    }
    Ok(names)
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

/// Splits a manifest list for ablation runs.
pub struct AblationData<'a> {
    pub train: &'a Manifest,
    pub val: &'a Manifest,
    pub test: &'a Manifest,
}

/// For each grid point, retrains only the affected region models with the
/// new crop fraction, reuses every other model of `base_run`, and
/// evaluates on the test split.
pub fn ablate_regions(
    base_run: &Path,
    data: &AblationData<'_>,
    grid: &[GridPoint],
    options: &RunOptions,
    mode: Mode,
    work_dir: &Path,
) -> Result<Vec<AblationRow>, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::Invalid("empty grid".into()));
    }
    let base = CheckpointSet::load(base_run)?;
    let mut rows = Vec::with_capacity(grid.len());
    for point in grid {
        let regions = axis_regions(&base.schema, &point.axis)?;
        let mut schema = base.schema.clone();
        for r in &regions {
            schema.region_mut(r)?.crop_fraction = point.fraction;
        }
        let out = work_dir.join(format!("{}-{}", sanitize(&point.axis), sanitize(&point.label)));
        let opts = RunOptions {
            stages: Some(regions.clone()),
            ..options.clone()
        };
        train_all(data.train, data.val, &schema, &opts, &out, |_, _| {})?;

        let mut set = CheckpointSet::load(base_run)?;
        set.schema = schema;
        for r in &regions {
            set.regions.insert(r.clone(), Box::new(CoordinateModel::load(&out.join(r))?));
        }
        set.validate()?;
        let report = evaluate(&set, data.test, mode)?;
        log::info!("{}={}: NME {:.4}", point.axis, point.label, report.nme_percent);
        rows.push(AblationRow {
            axis: point.axis.clone(),
            value: point.label.clone(),
            nme_percent: report.nme_percent,
            n_fail: report.n_fail,
        });
    }
    Ok(rows)
}

/// Prefixes of one seeded permutation of `0..pool`, one per size, so each
/// smaller subset lies inside every larger one.
pub fn nested_subsets(pool: usize, sizes: &[usize], seed: u64) -> Result<Vec<Vec<usize>>, EvalError> {
    if sizes.is_empty() {
        return Err(EvalError::Invalid("no sizes given".into()));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s == 0 || s > pool) {
        return Err(EvalError::Invalid(format!("size {s} outside 1..={pool}")));
    }
    let mut order: Vec<usize> = (0..pool).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(sizes.iter().map(|&s| order[..s].to_vec()).collect())
}

/// Full retrain on nested training subsets, evaluated on a fixed test split.
pub fn data_size_curve(
    data: &AblationData<'_>,
    schema: &LandmarkSchema,
    sizes: &[usize],
    options: &RunOptions,
    seed: u64,
    mode: Mode,
    work_dir: &Path,
) -> Result<Vec<AblationRow>, EvalError> {
    let subsets = nested_subsets(data.train.len(), sizes, seed)?;
    let mut rows = Vec::with_capacity(sizes.len());
    for (size, idx) in sizes.iter().zip(subsets) {
        let out = work_dir.join(format!("n{size}"));
        train_all(&data.train.subset(&idx), data.val, schema, options, &out, |_, _| {})?;
        let set = CheckpointSet::load(&out)?;
        let report = evaluate(&set, data.test, mode)?;
        log::info!("train size {size}: NME {:.4}", report.nme_percent);
        rows.push(AblationRow {
            axis: "train_size".into(),
            value: size.to_string(),
            nme_percent: report.nme_percent,
            n_fail: report.n_fail,
        });
    }
    Ok(rows)
}
