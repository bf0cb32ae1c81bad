//! Ensemble inference: face detection, region-center detection, eye
//! alignment, fixed-fraction region crops, per-region regression and
//! assembly back into original-image coordinates.

pub mod oracle;

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    self, Affine, BBox, Frame, GeometryError, Point2, TransformChain, MID_GRAY,
};
use crate::nets::{CoordinateModel, NetsError, Regressor, StageInput};
use crate::schema::{LandmarkSchema, RegionSpec, SchemaError};
use crate::MODEL_SIDE;

const SIDE: f64 = MODEL_SIDE as f64;

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("face detection failed: {0}")]
    DetectionFailure(String),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: NetsError,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cascade config: {0}")]
    Config(String),
}

/// How the face crop is brought to the model side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaceResize {
    #[default]
    Letterbox,
    Stretch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    pub face_resize: FaceResize,
    pub fill: [u8; 3],
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            face_resize: FaceResize::Letterbox,
            fill: MID_GRAY.0,
        }
    }
}

impl CascadeConfig {
    pub fn fill(&self) -> Rgb<u8> {
        Rgb(self.fill)
    }
}

/// A model-side image together with the chain that produced it.
#[derive(Debug, Clone)]
pub struct View {
    pub image: RgbImage,
    pub chain: TransformChain,
}

/// Letterboxed full image for the face detector.
pub fn detector_view(image: &RgbImage, config: &CascadeConfig) -> Result<View, CascadeError> {
    let (img, t) = geometry::letterbox(image, MODEL_SIDE, config.fill())?;
    Ok(View {
        image: img,
        chain: TransformChain::new(Frame::Original).with(Frame::Letterboxed, t),
    })
}

/// The bbox cut out of `image` and resized to the model side in one resampling.
pub fn face_view(image: &RgbImage, bbox: &BBox, config: &CascadeConfig) -> Result<View, CascadeError> {
    if !(bbox.width() > 0.0 && bbox.height() > 0.0) {
        return Err(GeometryError::InvalidInput(format!("empty face box {bbox:?}")).into());
    }
    let to_crop = Affine::translation(-bbox.x1, -bbox.y1);
    let to_face = match config.face_resize {
        FaceResize::Letterbox => geometry::letterbox_transform(bbox.width(), bbox.height(), SIDE)?,
        FaceResize::Stretch => geometry::stretch_transform(bbox.width(), bbox.height(), SIDE)?,
    };
    let chain = TransformChain::new(Frame::Original)
        .with(Frame::FaceCrop, to_crop)
        .with(Frame::Face, to_face);
    let img = geometry::warp(image, &chain.composed(), MODEL_SIDE, MODEL_SIDE, config.fill())?;
    Ok(View { image: img, chain })
}

/// Runs the face model and maps its box back to original coordinates.
pub fn detect_face(
    image: &RgbImage,
    face: &dyn Regressor,
    config: &CascadeConfig,
) -> Result<BBox, CascadeError> {
    let view = detector_view(image, config)?;
    let out = run(face, "face", &view, 4)?;
    let back = view.chain.composed().invert()?;
    let a = back.apply(Point2::new(out[0] * SIDE, out[1] * SIDE));
    let b = back.apply(Point2::new(out[2] * SIDE, out[3] * SIDE));
    if !(a.is_finite() && b.is_finite()) {
        return Err(CascadeError::DetectionFailure(format!("non-finite box {out:?}")));
    }
    if a.x == b.x || a.y == b.y {
        return Err(CascadeError::DetectionFailure(format!("degenerate box {out:?}")));
    }
    Ok(BBox::from_corners(a, b)?)
}

fn run(model: &dyn Regressor, stage: &str, view: &View, expected: usize) -> Result<Vec<f64>, CascadeError> {
    let out = model
        .regress(&StageInput {
            image: &view.image,
            chain: &view.chain,
        })
        .map_err(|source| CascadeError::Stage {
            stage: stage.to_string(),
            source,
        })?;
    if out.len() != expected {
        return Err(CascadeError::Mismatch(format!(
            "stage {stage} produced {} values, expected {expected}",
            out.len()
        )));
    }
    Ok(out)
}

/// Positions of the two eye regions among the magnified regions, which is
/// the order of the center model's outputs.
pub fn eye_slots(schema: &LandmarkSchema) -> Result<(usize, usize), CascadeError> {
    let slot = |name: &str| {
        schema
            .magnified_regions()
            .position(|r| r.name == name)
            .ok_or_else(|| CascadeError::Config(format!("eye region {name:?} is not magnified")))
    };
    Ok((slot(&schema.eye_regions[0])?, slot(&schema.eye_regions[1])?))
}

/// Number of centers the center model emits.
pub fn center_count(schema: &LandmarkSchema) -> usize {
    schema.magnified_regions().count()
}

#[derive(Debug, Clone)]
pub struct Alignment {
    pub image: RgbImage,
    /// Face → Aligned.
    pub transform: Affine,
    pub angle: f64,
    /// Region centers in the aligned frame.
    pub centers: Vec<Point2>,
    /// Set when the eye centers coincide and no rotation was applied.
    pub skipped: bool,
}

/// Rotation leveling the left→right eye vector; the vector is taken with
/// Δx ≥ 0 so the face is never turned upside down.
pub fn eye_angle(left: Point2, right: Point2) -> Option<f64> {
    let (mut dx, mut dy) = (right.x - left.x, right.y - left.y);
    if dx == 0.0 && dy == 0.0 {
        return None;
    }
    if dx < 0.0 {
        dx = -dx;
        dy = -dy;
    }
    Some(dy.atan2(dx))
}

/// The face-frame → aligned-frame rotation for the given centers.
pub fn alignment_transform(centers: &[Point2], schema: &LandmarkSchema) -> Result<(Affine, f64, bool), CascadeError> {
    let (l, r) = eye_slots(schema)?;
    if centers.len() != center_count(schema) {
        return Err(CascadeError::Mismatch(format!(
            "{} centers for {} regions",
            centers.len(),
            center_count(schema)
        )));
    }
    let (left, right) = (centers[l], centers[r]);
    match eye_angle(left, right) {
        None => Ok((Affine::IDENTITY, 0.0, true)),
        Some(angle) => {
            let mid = Point2::new((left.x + right.x) * 0.5, (left.y + right.y) * 0.5);
            Ok((Affine::rotation_about(mid, -angle), angle, false))
        }
    }
}

/// Rotates the face so the eye centers are level.
pub fn align_by_eyes(
    face: &RgbImage,
    centers: &[Point2],
    schema: &LandmarkSchema,
    fill: Rgb<u8>,
) -> Result<Alignment, CascadeError> {
    let (transform, angle, skipped) = alignment_transform(centers, schema)?;
    let image = if skipped {
        face.clone()
    } else {
        geometry::warp(face, &transform, face.width(), face.height(), fill)?
    };
    Ok(Alignment {
        image,
        transform,
        angle,
        centers: transform.apply_all(centers),
        skipped,
    })
}

#[derive(Debug, Clone)]
pub struct RegionCrop {
    pub name: String,
    pub image: RgbImage,
    /// Aligned → Region → RegionResized.
    pub chain: TransformChain,
    /// Crop box in the aligned frame.
    pub crop_box: BBox,
}

/// The square crop of `region` around `center`, resized to the model side.
/// A crop fraction of 1 takes the whole aligned face whatever the center.
pub fn region_transform(center: Point2, region: &RegionSpec) -> Result<(TransformChain, BBox), CascadeError> {
    let side = region.crop_side(SIDE);
    let center = if region.crop_fraction >= 1.0 {
        Point2::new(SIDE * 0.5, SIDE * 0.5)
    } else {
        center
    };
    let crop_box = BBox::square_around(center, side)?;
    let chain = TransformChain::new(Frame::Aligned)
        .with(Frame::Region, Affine::translation(-crop_box.x1, -crop_box.y1))
        .with(Frame::RegionResized, Affine::scale(SIDE / side, SIDE / side));
    Ok((chain, crop_box))
}

pub fn region_crop(
    aligned: &RgbImage,
    center: Point2,
    region: &RegionSpec,
    fill: Rgb<u8>,
) -> Result<RegionCrop, CascadeError> {
    let (chain, crop_box) = region_transform(center, region)?;
    let image = geometry::warp(aligned, &chain.composed(), MODEL_SIDE, MODEL_SIDE, fill)?;
    Ok(RegionCrop {
        name: region.name.clone(),
        image,
        chain,
        crop_box,
    })
}

/// One crop per magnified region, in schema order.
pub fn crop_regions(
    aligned: &RgbImage,
    centers: &[Point2],
    schema: &LandmarkSchema,
    fill: Rgb<u8>,
) -> Result<Vec<RegionCrop>, CascadeError> {
    if centers.len() != center_count(schema) {
        return Err(CascadeError::Mismatch(format!(
            "{} centers for {} regions",
            centers.len(),
            center_count(schema)
        )));
    }
    schema
        .magnified_regions()
        .zip(centers)
        .map(|(r, &c)| region_crop(aligned, c, r, fill))
        .collect()
}

/// Everything needed to run the cascade on new images.
pub struct CheckpointSet {
    pub schema: LandmarkSchema,
    pub config: CascadeConfig,
    pub face: Box<dyn Regressor>,
    pub centers: Box<dyn Regressor>,
    pub regions: BTreeMap<String, Box<dyn Regressor>>,
}

pub const CASCADE_FILE: &str = "cascade.json";
pub const SCHEMA_FILE: &str = "schema.json";

impl CheckpointSet {
    /// Checks every model's output size against the schema.
    pub fn validate(&self) -> Result<(), CascadeError> {
        let check = |stage: &str, model: &dyn Regressor, expected: usize| {
            if model.output_len() == expected {
                Ok(())
            } else {
                Err(CascadeError::Mismatch(format!(
                    "stage {stage} outputs {} values, schema {} needs {expected}",
                    model.output_len(),
                    self.schema.name
                )))
            }
        };
        check("face", self.face.as_ref(), 4)?;
        check("centers", self.centers.as_ref(), 2 * center_count(&self.schema))?;
        for r in &self.schema.regions {
            let m = self
                .regions
                .get(&r.name)
                .ok_or_else(|| CascadeError::Mismatch(format!("missing model for region {:?}", r.name)))?;
            check(&r.name, m.as_ref(), 2 * r.indices.len())?;
        }
        if let Some(extra) = self.regions.keys().find(|k| self.schema.region(k).is_err()) {
            return Err(CascadeError::Mismatch(format!("model {extra:?} matches no schema region")));
        }
        eye_slots(&self.schema)?;
        Ok(())
    }

    /// Loads a training run directory.
    pub fn load(run: &Path) -> Result<Self, CascadeError> {
        let io = |path: &Path, source| CascadeError::Io {
            path: path.display().to_string(),
            source,
        };
        let schema = LandmarkSchema::load(&run.join(SCHEMA_FILE))?.validated()?;
        let cfg_path = run.join(CASCADE_FILE);
        let config = match std::fs::read_to_string(&cfg_path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| CascadeError::Config(e.to_string()))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => CascadeConfig::default(),
            Err(e) => return Err(io(&cfg_path, e)),
        };
        let load = |stage: &str| -> Result<Box<dyn Regressor>, CascadeError> {
            let m = CoordinateModel::load(&run.join(stage)).map_err(|source| CascadeError::Stage {
                stage: stage.to_string(),
                source,
            })?;
            Ok(Box::new(m))
        };
        let mut regions = BTreeMap::new();
        for r in &schema.regions {
            regions.insert(r.name.clone(), load(&r.name)?);
        }
        let set = Self {
            face: load("face")?,
            centers: load("centers")?,
            regions,
            schema,
            config,
        };
        set.validate()?;
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDiagnostic {
    pub name: String,
    /// Region center in the aligned frame; absent for residual groups.
    pub center: Option<Point2>,
    /// Crop box in the aligned frame; absent for residual groups.
    pub crop_box: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub landmarks: Vec<Point2>,
    pub bbox: BBox,
    pub angle_rad: f64,
    pub schema: String,
    #[serde(default)]
    pub alignment_skipped: bool,
    #[serde(default)]
    pub regions: Vec<RegionDiagnostic>,
}

impl Prediction {
    /// `[x0, y0, x1, y1, ...]`, length 2K.
    pub fn flattened(&self) -> Vec<f64> {
        self.landmarks.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("prediction serializes") + "\n"
    }
}

/// Full pipeline including face detection.
pub fn predict(image: &RgbImage, checkpoints: &CheckpointSet) -> Result<Prediction, CascadeError> {
    let bbox = detect_face(image, checkpoints.face.as_ref(), &checkpoints.config)?;
    predict_with_bbox(image, &bbox, checkpoints)
}

/// The pipeline from a given face box onwards.
pub fn predict_with_bbox(
    image: &RgbImage,
    bbox: &BBox,
    checkpoints: &CheckpointSet,
) -> Result<Prediction, CascadeError> {
    let schema = &checkpoints.schema;
    let fill = checkpoints.config.fill();
    if !(bbox.to_array().iter().all(|v| v.is_finite()) && bbox.width() > 0.0 && bbox.height() > 0.0) {
        return Err(GeometryError::InvalidInput(format!("invalid bbox {:?}", bbox.to_array())).into());
    }
    let face = face_view(image, bbox, &checkpoints.config)?;

    let n_centers = center_count(schema);
    let raw = run(checkpoints.centers.as_ref(), "centers", &face, 2 * n_centers)?;
    let centers: Vec<Point2> = raw
        .chunks(2)
        .map(|c| Point2::new(c[0] * SIDE, c[1] * SIDE))
        .collect();
    let aligned = align_by_eyes(&face.image, &centers, schema, fill)?;
    let mut aligned_chain = face.chain.clone();
    aligned_chain.push(Frame::Aligned, aligned.transform);

    struct Job<'a> {
        region: &'a RegionSpec,
        view: View,
        center: Option<Point2>,
        crop_box: Option<BBox>,
    }
    let mut jobs = Vec::with_capacity(schema.regions.len());
    let mut magnified = aligned.centers.iter();
    for region in &schema.regions {
        if region.magnified {
            let &center = magnified.next().expect("center count checked");
            let crop = region_crop(&aligned.image, center, region, fill)?;
            let mut chain = aligned_chain.clone();
            chain.extend(&crop.chain)?;
            jobs.push(Job {
                region,
                view: View {
                    image: crop.image,
                    chain,
                },
                center: Some(center),
                crop_box: Some(crop.crop_box),
            });
        } else {
            jobs.push(Job {
                region,
                view: View {
                    image: aligned.image.clone(),
                    chain: aligned_chain.clone(),
                },
                center: None,
                crop_box: None,
            });
        }
    }

    let outputs: Vec<Result<Vec<Point2>, CascadeError>> = jobs
        .par_iter()
        .map(|job| {
            let model = checkpoints
                .regions
                .get(&job.region.name)
                .ok_or_else(|| CascadeError::Mismatch(format!("missing model for {:?}", job.region.name)))?;
            let out = run(model.as_ref(), &job.region.name, &job.view, 2 * job.region.indices.len())?;
            let local: Vec<Point2> = out
                .chunks(2)
                .map(|c| Point2::new(c[0] * SIDE, c[1] * SIDE))
                .collect();
            Ok(job.view.chain.backward(&local)?)
        })
        .collect();

    let mut landmarks = vec![Point2::new(f64::NAN, f64::NAN); schema.k];
    let mut regions = Vec::with_capacity(jobs.len());
    for (job, out) in jobs.iter().zip(outputs) {
        for (&idx, p) in job.region.indices.iter().zip(out?) {
            landmarks[idx] = p;
        }
        regions.push(RegionDiagnostic {
            name: job.region.name.clone(),
            center: job.center,
            crop_box: job.crop_box,
        });
    }
    Ok(Prediction {
        landmarks,
        bbox: *bbox,
        angle_rad: aligned.angle,
        schema: schema.name.clone(),
        alignment_skipped: aligned.skipped,
        regions,
    })
}
