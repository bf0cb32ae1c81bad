//! Sample manifests, deterministic splits, training augmentation and the
//! procedural cat-face generator.

mod augment;
mod split;
pub mod synth;

pub use augment::{augment, AugmentConfig, Augmented, Method, MethodProbabilities};
pub use split::{split, split_sizes, Splits, DEFAULT_RATIOS};

use std::collections::HashSet;
use std::path::{Component, Path, PathBuf};

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, GeometryError, Point2};
use crate::schema::{LandmarkSchema, SchemaError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("record {record} ({image}): schema {schema} expects {expected} landmarks, found {found}")]
    SchemaMismatch {
        record: usize,
        image: String,
        schema: String,
        expected: usize,
        found: usize,
    },
    #[error("record {record} ({image}): field {field}: {message}")]
    InvalidRecord {
        record: usize,
        image: String,
        field: &'static str,
        message: String,
    },
    #[error("duplicate image path {0}")]
    DuplicateImage(String),
    #[error("manifest has no samples")]
    Empty,
    #[error("invalid split ratios {0:?}")]
    BadRatios([f64; 3]),
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One annotated image. Coordinates are in the original image frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub bbox: BBox,
    pub landmarks: Vec<Point2>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visible: Option<Vec<bool>>,
}

impl Sample {
    pub fn validate(&self, schema: &LandmarkSchema, record: usize) -> Result<(), DatasetError> {
        if self.landmarks.len() != schema.k {
            return Err(DatasetError::SchemaMismatch {
                record,
                image: self.image.clone(),
                schema: schema.name.clone(),
                expected: schema.k,
                found: self.landmarks.len(),
            });
        }
        self.validate_fields(record)
    }

    fn validate_fields(&self, record: usize) -> Result<(), DatasetError> {
        let invalid = |field, message: String| DatasetError::InvalidRecord {
            record,
            image: self.image.clone(),
            field,
            message,
        };
        if self.width == 0 || self.height == 0 {
            return Err(invalid("width/height", "zero image dimension".into()));
        }
        if let Some(i) = self.landmarks.iter().position(|p| !p.is_finite()) {
            return Err(invalid("landmarks", format!("landmark {i} is not finite")));
        }
        if let Some(v) = &self.visible {
            if v.len() != self.landmarks.len() {
                return Err(invalid(
                    "visible",
                    format!("{} flags for {} landmarks", v.len(), self.landmarks.len()),
                ));
            }
        }
        Ok(())
    }
}

// Wire form of a sample; the bbox is checked here so that errors can name
// the record.
#[derive(Deserialize)]
struct RawSample {
    image: String,
    width: u32,
    height: u32,
    bbox: [f64; 4],
    landmarks: Vec<[f64; 2]>,
    #[serde(default)]
    visible: Option<Vec<bool>>,
}

#[derive(Deserialize)]
struct RawManifest {
    schema: String,
    samples: Vec<RawSample>,
    #[serde(default)]
    notes: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub samples: Vec<Sample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
    /// Directory image paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// How strictly [`Manifest::parse`] checks landmark lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Labels {
    /// Every record carries exactly K landmarks.
    #[default]
    Required,
    /// Records may also carry no landmarks at all (images awaiting annotation).
    Optional,
}

impl Manifest {
    pub fn new(schema: &str, samples: Vec<Sample>) -> Self {
        Self {
            schema: schema.to_string(),
            samples,
            notes: None,
            base_dir: PathBuf::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn resolve_schema(&self) -> Result<LandmarkSchema, DatasetError> {
        Ok(LandmarkSchema::by_name(&self.schema)?)
    }

    pub fn parse(text: &str, base_dir: &Path, labels: Labels) -> Result<Manifest, DatasetError> {
        let raw: RawManifest = serde_json::from_str(text)?;
        let schema = LandmarkSchema::by_name(&raw.schema)?;
        let mut seen = HashSet::new();
        let mut samples = Vec::with_capacity(raw.samples.len());
        for (record, r) in raw.samples.into_iter().enumerate() {
            let [x1, y1, x2, y2] = r.bbox;
            let bbox = BBox::new(x1, y1, x2, y2).map_err(|e| DatasetError::InvalidRecord {
                record,
                image: r.image.clone(),
                field: "bbox",
                message: match e {
                    GeometryError::BBoxNotOrdered { .. } => "bbox not ordered".to_string(),
                    other => other.to_string(),
                },
            })?;
            let sample = Sample {
                image: r.image,
                width: r.width,
                height: r.height,
                bbox,
                landmarks: r.landmarks.into_iter().map(Point2::from).collect(),
                visible: r.visible,
            };
            if labels == Labels::Optional && sample.landmarks.is_empty() {
                sample.validate_fields(record)?;
            } else {
                sample.validate(&schema, record)?;
            }
            if !seen.insert(sample.image.clone()) {
                return Err(DatasetError::DuplicateImage(sample.image));
            }
            samples.push(sample);
        }
        Ok(Manifest {
            schema: raw.schema,
            samples,
            notes: raw.notes,
            base_dir: base_dir.to_path_buf(),
        })
    }

    /// Reads and validates a manifest; image paths resolve relative to its directory.
    pub fn load(path: &Path) -> Result<Manifest, DatasetError> {
        Self::load_with(path, Labels::Required)
    }

    pub fn load_with(path: &Path, labels: Labels) -> Result<Manifest, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&text, &base, labels)?;
        for missing in m.missing_images() {
            log::warn!("missing image {}", missing.display());
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        write_file(path, self.to_json().as_bytes())
    }

    pub fn image_path(&self, sample: &Sample) -> PathBuf {
        self.base_dir.join(&sample.image)
    }

    pub fn load_image(&self, sample: &Sample) -> Result<RgbImage, DatasetError> {
        load_rgb(&self.image_path(sample))
    }

    pub fn missing_images(&self) -> Vec<PathBuf> {
        self.samples
            .iter()
            .map(|s| self.image_path(s))
            .filter(|p| !p.exists())
            .collect()
    }

    /// Same samples with image paths re-expressed relative to `new_base`.
    pub fn rebased(&self, new_base: &Path) -> Manifest {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let abs = absolute(&self.base_dir.join(&s.image));
                let rel = relative_to(&abs, &absolute(new_base));
                Sample {
                    image: rel.to_string_lossy().replace('\\', "/"),
                    ..s.clone()
                }
            })
            .collect();
        Manifest {
            schema: self.schema.clone(),
            samples,
            notes: self.notes.clone(),
            base_dir: new_base.to_path_buf(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Manifest {
        Manifest {
            schema: self.schema.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            notes: self.notes.clone(),
            base_dir: self.base_dir.clone(),
        }
    }
}

/// Free-function form of [`Manifest::load`].
pub fn load_manifest(path: &Path) -> Result<Manifest, DatasetError> {
    Manifest::load(path)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, DatasetError> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|source| DatasetError::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let io = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
    }
    std::fs::write(path, bytes).map_err(io)
}

/// Random stream for one data-loading worker. Streams with the same seed but
/// different ids are independent and individually reproducible.
pub fn worker_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn absolute(p: &Path) -> PathBuf {
    let joined = if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().unwrap_or_default().join(p)
    };
    let mut out = PathBuf::new();
    for c in joined.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

fn relative_to(path: &Path, base: &Path) -> PathBuf {
    let p: Vec<_> = path.components().collect();
    let b: Vec<_> = base.components().collect();
    let common = p.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &p[common..] {
        out.push(c);
    }
    out
}
