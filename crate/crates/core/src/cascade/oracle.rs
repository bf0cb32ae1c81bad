//! Stage stand-ins that emit exact normalized ground truth for one sample by
//! pushing it through whatever transform chain the cascade hands them.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{CascadeConfig, CheckpointSet};
use crate::dataset::Sample;
use crate::geometry::Point2;
use crate::nets::{NetsError, Regressor, StageInput};
use crate::schema::LandmarkSchema;
use crate::MODEL_SIDE;

#[derive(Debug, Clone)]
enum Kind {
    Face,
    Centers(Vec<Vec<usize>>),
    Group(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct OracleStage {
    truth: Arc<Sample>,
    kind: Kind,
}

impl OracleStage {
    pub fn face(truth: Arc<Sample>) -> Self {
        Self { truth, kind: Kind::Face }
    }

    pub fn centers(truth: Arc<Sample>, schema: &LandmarkSchema) -> Self {
        let groups = schema.magnified_regions().map(|r| r.indices.clone()).collect();
        Self {
            truth,
            kind: Kind::Centers(groups),
        }
    }

    pub fn group(truth: Arc<Sample>, indices: Vec<usize>) -> Self {
        Self {
            truth,
            kind: Kind::Group(indices),
        }
    }
}

fn normalized(points: impl IntoIterator<Item = Point2>) -> Vec<f64> {
    let s = MODEL_SIDE as f64;
    points.into_iter().flat_map(|p| [p.x / s, p.y / s]).collect()
}

impl Regressor for OracleStage {
    fn output_len(&self) -> usize {
        match &self.kind {
            Kind::Face => 4,
            Kind::Centers(g) => 2 * g.len(),
            Kind::Group(i) => 2 * i.len(),
        }
    }

    fn regress(&self, input: &StageInput<'_>) -> Result<Vec<f64>, NetsError> {
        let t = input.chain.composed();
        let lm = &self.truth.landmarks;
        Ok(match &self.kind {
            Kind::Face => {
                let b = &self.truth.bbox;
                normalized([t.apply(Point2::new(b.x1, b.y1)), t.apply(Point2::new(b.x2, b.y2))])
            }
            Kind::Centers(groups) => normalized(groups.iter().map(|g| {
                let pts: Vec<Point2> = g.iter().map(|&i| t.apply(lm[i])).collect();
                Point2::mean(&pts).expect("regions are non-empty")
            })),
            Kind::Group(indices) => normalized(indices.iter().map(|&i| t.apply(lm[i]))),
        })
    }
}

/// A full checkpoint set answering with `truth` at every stage.
pub fn oracle_checkpoints(truth: &Sample, schema: &LandmarkSchema, config: CascadeConfig) -> CheckpointSet {
    let truth = Arc::new(truth.clone());
    let mut regions: BTreeMap<String, Box<dyn Regressor>> = BTreeMap::new();
    for r in &schema.regions {
        regions.insert(
            r.name.clone(),
            Box::new(OracleStage::group(truth.clone(), r.indices.clone())),
        );
    }
    CheckpointSet {
        schema: schema.clone(),
        config,
        face: Box::new(OracleStage::face(truth.clone())),
        centers: Box::new(OracleStage::centers(truth, schema)),
        regions,
    }
}
