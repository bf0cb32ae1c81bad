//! Landmark layouts: semantic groups, ensemble regions with their crop
//! fractions, the inter-ocular pair and the two eye regions used for
//! alignment.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("unknown schema {0:?}")]
    Unknown(String),
    #[error("landmark index {index} out of range for K = {k}")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("no region named {0:?}")]
    NoSuchRegion(String),
    #[error("invalid schema: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("schema io: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One ensemble member: a group of landmarks regressed from a square crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: String,
    pub indices: Vec<usize>,
    /// Crop side as a fraction of the face-image side.
    pub crop_fraction: f64,
    /// `false` for a residual group regressed from the whole aligned face.
    pub magnified: bool,
}

impl RegionSpec {
    pub fn new(name: &str, indices: impl IntoIterator<Item = usize>, crop_fraction: f64) -> Self {
        Self {
            name: name.to_string(),
            indices: indices.into_iter().collect(),
            crop_fraction,
            magnified: true,
        }
    }

    pub fn residual(name: &str, indices: impl IntoIterator<Item = usize>) -> Self {
        Self {
            name: name.to_string(),
            indices: indices.into_iter().collect(),
            crop_fraction: 1.0,
            magnified: false,
        }
    }

    /// Crop side in pixels on a face image of side `face_side`.
    pub fn crop_side(&self, face_side: f64) -> f64 {
        self.crop_fraction * face_side
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSchema {
    pub name: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub groups: BTreeMap<String, Vec<usize>>,
    pub regions: Vec<RegionSpec>,
    pub iod_pair: [usize; 2],
    /// Left and right eye region names, in that order.
    pub eye_regions: [String; 2],
}

/// A single schema invariant failure.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Overlap { index: usize, regions: Vec<String> },
    Gap { index: usize },
    OutOfRange { index: usize, region: String },
    BadFraction { region: String, fraction: f64 },
    CountMismatch { k: usize, members: usize },
    BadIodPair { pair: [usize; 2] },
    EyeRegions { names: [String; 2] },
    DuplicateRegionName { name: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Overlap { index, regions } => {
                write!(f, "overlap: index {index} in regions {}", regions.join(", "))
            }
            Violation::Gap { index } => write!(f, "gap: index {index} belongs to no region"),
            Violation::OutOfRange { index, region } => {
                write!(f, "index {index} in region {region} is out of range")
            }
            Violation::BadFraction { region, fraction } => {
                write!(f, "region {region} has crop fraction {fraction} outside (0, 1]")
            }
            Violation::CountMismatch { k, members } => {
                write!(f, "K = {k} but regions hold {members} members")
            }
            Violation::BadIodPair { pair } => write!(f, "bad iod pair {pair:?}"),
            Violation::EyeRegions { names } => {
                write!(f, "eye regions {names:?} must be two distinct existing regions")
            }
            Violation::DuplicateRegionName { name } => write!(f, "duplicate region name {name}"),
        }
    }
}

impl LandmarkSchema {
    /// Looks up a built-in schema by name.
    pub fn by_name(name: &str) -> Result<Self, SchemaError> {
        match name {
            "catflw48" => Ok(catflw48()),
            "wflw98" => Ok(wflw98()),
            other => Err(SchemaError::Unknown(other.to_string())),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SchemaError> {
        let schema: LandmarkSchema = serde_json::from_str(text)?;
        schema.validated()
    }

    pub fn load(path: &Path) -> Result<Self, SchemaError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn validated(self) -> Result<Self, SchemaError> {
        let v = validate(&self);
        if v.is_empty() {
            Ok(self)
        } else {
            Err(SchemaError::Invalid(v))
        }
    }

    pub fn region(&self, name: &str) -> Result<&RegionSpec, SchemaError> {
        self.regions
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| SchemaError::NoSuchRegion(name.to_string()))
    }

    pub fn region_mut(&mut self, name: &str) -> Result<&mut RegionSpec, SchemaError> {
        self.regions
            .iter_mut()
            .find(|r| r.name == name)
            .ok_or_else(|| SchemaError::NoSuchRegion(name.to_string()))
    }

    pub fn region_index(&self, name: &str) -> Result<usize, SchemaError> {
        self.regions
            .iter()
            .position(|r| r.name == name)
            .ok_or_else(|| SchemaError::NoSuchRegion(name.to_string()))
    }

    pub fn region_of(&self, index: usize) -> Result<&str, SchemaError> {
        region_of(self, index)
    }

    /// Positions of the left and right eye regions in `regions`.
    pub fn eye_region_indices(&self) -> Result<(usize, usize), SchemaError> {
        Ok((
            self.region_index(&self.eye_regions[0])?,
            self.region_index(&self.eye_regions[1])?,
        ))
    }

    pub fn magnified_regions(&self) -> impl Iterator<Item = &RegionSpec> {
        self.regions.iter().filter(|r| r.magnified)
    }

    pub fn residual_regions(&self) -> impl Iterator<Item = &RegionSpec> {
        self.regions.iter().filter(|r| !r.magnified)
    }

    /// Length of the flattened coordinate vector.
    pub fn output_len(&self) -> usize {
        2 * self.k
    }

    /// Names of every model a full training run produces, in training order.
    pub fn stage_names(&self) -> Vec<String> {
        let mut names = vec!["face".to_string(), "centers".to_string()];
        names.extend(self.regions.iter().map(|r| r.name.clone()));
        names
    }
}

/// Every invariant violation of `schema`; empty means valid.
pub fn validate(schema: &LandmarkSchema) -> Vec<Violation> {
    let k = schema.k;
    let mut out = Vec::new();
    let mut owners: Vec<Vec<String>> = vec![Vec::new(); k];
    let mut members = 0;
    let mut seen_names = std::collections::BTreeSet::new();

    for r in &schema.regions {
        if !seen_names.insert(r.name.as_str()) {
            out.push(Violation::DuplicateRegionName {
                name: r.name.clone(),
            });
        }
        if !(r.crop_fraction > 0.0 && r.crop_fraction <= 1.0) {
            out.push(Violation::BadFraction {
                region: r.name.clone(),
                fraction: r.crop_fraction,
            });
        }
        members += r.indices.len();
        for &i in &r.indices {
            if i >= k {
                out.push(Violation::OutOfRange {
                    index: i,
                    region: r.name.clone(),
                });
            } else {
                owners[i].push(r.name.clone());
            }
        }
    }
    for (index, o) in owners.iter().enumerate() {
        match o.len() {
            0 => out.push(Violation::Gap { index }),
            1 => {}
            _ => out.push(Violation::Overlap {
                index,
                regions: o.clone(),
            }),
        }
    }
    if members != k {
        out.push(Violation::CountMismatch { k, members });
    }
    let [a, b] = schema.iod_pair;
    if a == b || a >= k || b >= k {
        out.push(Violation::BadIodPair {
            pair: schema.iod_pair,
        });
    }
    let [l, r] = &schema.eye_regions;
    let exists = |n: &str| schema.regions.iter().any(|x| x.name == n);
    if l == r || !exists(l) || !exists(r) {
        out.push(Violation::EyeRegions {
            names: schema.eye_regions.clone(),
        });
    }
    out
}

/// The unique region owning landmark `index`.
pub fn region_of(schema: &LandmarkSchema, index: usize) -> Result<&str, SchemaError> {
    if index >= schema.k {
        return Err(SchemaError::IndexOutOfRange { index, k: schema.k });
    }
    schema
        .regions
        .iter()
        .find(|r| r.indices.contains(&index))
        .map(|r| r.name.as_str())
        .ok_or(SchemaError::IndexOutOfRange { index, k: schema.k })
}

/// Index layout of the 48-point cat schema. Left/right refer to image
/// columns, so the left eye has the smaller x in an upright frontal face.
pub mod catflw {
    use std::ops::Range;

    pub const K: usize = 48;
    pub const LEFT_EYE: Range<usize> = 0..8;
    pub const RIGHT_EYE: Range<usize> = 8..16;
    pub const LEFT_EAR: Range<usize> = 16..21;
    pub const RIGHT_EAR: Range<usize> = 21..26;
    pub const NOSE: Range<usize> = 26..48;
    /// Nose, whisker pads and cheeks.
    pub const LOWER_FACE: Range<usize> = 26..42;
    /// Mouth and chin.
    pub const JAW: Range<usize> = 42..48;

    // Each eye lists its eight contour points starting at the outer corner
    // and running over the upper lid to the inner corner and back below.
    pub const LEFT_EYE_OUTER: usize = 0;
    pub const RIGHT_EYE_OUTER: usize = 8;
}

pub fn catflw48() -> LandmarkSchema {
    use catflw::*;
    let mut groups = BTreeMap::new();
    groups.insert("Upper Face".to_string(), (0..16).collect());
    groups.insert("Ears".to_string(), (16..26).collect());
    groups.insert("Lower Face".to_string(), LOWER_FACE.collect());
    groups.insert("Jaw".to_string(), JAW.collect());
    LandmarkSchema {
        name: "catflw48".into(),
        k: K,
        groups,
        regions: vec![
            RegionSpec::new("left_eye", LEFT_EYE, 0.25),
            RegionSpec::new("right_eye", RIGHT_EYE, 0.25),
            RegionSpec::new("left_ear", LEFT_EAR, 0.5),
            RegionSpec::new("right_ear", RIGHT_EAR, 0.5),
            RegionSpec::new("nose", NOSE, 0.5),
        ],
        iod_pair: [LEFT_EYE_OUTER, RIGHT_EYE_OUTER],
        eye_regions: ["left_eye".into(), "right_eye".into()],
    }
}

/// 98-point human face layout: four magnified regions plus the 33-point
/// face contour regressed from the aligned face.
pub fn wflw98() -> LandmarkSchema {
    let left_eye: Vec<usize> = (33..42).chain(60..68).chain([96]).collect();
    let right_eye: Vec<usize> = (42..51).chain(68..76).chain([97]).collect();
    let mut groups = BTreeMap::new();
    groups.insert("Jaw".to_string(), (0..33).collect());
    groups.insert("Left Eye".to_string(), left_eye.clone());
    groups.insert("Right Eye".to_string(), right_eye.clone());
    groups.insert("Nose".to_string(), (51..60).collect());
    groups.insert("Mouth".to_string(), (76..96).collect());
    LandmarkSchema {
        name: "wflw98".into(),
        k: 98,
        groups,
        regions: vec![
            RegionSpec::new("left_eye", left_eye, 1.0 / 3.0),
            RegionSpec::new("right_eye", right_eye, 1.0 / 3.0),
            RegionSpec::new("nose", 51..60, 1.0 / 3.0),
            RegionSpec::new("mouth", 76..96, 1.0 / 3.0),
            RegionSpec::residual("jaw", 0..33),
        ],
        iod_pair: [60, 72],
        eye_regions: ["left_eye".into(), "right_eye".into()],
    }
}
