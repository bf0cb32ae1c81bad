//! Training pairs for each stage, built from ground truth (teacher forcing).

use image::RgbImage;

use super::train::TrainPair;
use super::NetsError;
use crate::cascade::{self, CascadeConfig, View};
use crate::dataset::Sample;
use crate::geometry::{Affine, Frame, Point2, TransformChain};
use crate::schema::{LandmarkSchema, RegionSpec};
use crate::MODEL_SIDE;

const SIDE: f64 = MODEL_SIDE as f64;

fn normalized(points: &[Point2]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x / SIDE, p.y / SIDE]).collect()
}

/// Letterboxed full image and its normalized GT box corners.
pub fn build_face_targets(
    sample: &Sample,
    image: &RgbImage,
    config: &CascadeConfig,
) -> Result<(TrainPair, TransformChain), NetsError> {
    let view = cascade::detector_view(image, config).map_err(cascade_err)?;
    let t = view.chain.composed();
    let b = &sample.bbox;
    let target = normalized(&[t.apply(Point2::new(b.x1, b.y1)), t.apply(Point2::new(b.x2, b.y2))]);
    Ok((
        TrainPair {
            image: view.image,
            target,
        },
        view.chain,
    ))
}

/// GT region centers (magnified regions, schema order) in the frame reached
/// by `face_chain`.
pub fn gt_centers(sample: &Sample, face_chain: &TransformChain, schema: &LandmarkSchema) -> Vec<Point2> {
    let t = face_chain.composed();
    schema
        .magnified_regions()
        .map(|r| {
            let pts: Vec<Point2> = r.indices.iter().map(|&i| t.apply(sample.landmarks[i])).collect();
            Point2::mean(&pts).expect("regions are non-empty")
        })
        .collect()
}

/// Face crop input with the normalized GT region centers as target.
pub fn build_center_targets(sample: &Sample, face: &View, schema: &LandmarkSchema) -> TrainPair {
    TrainPair {
        image: face.image.clone(),
        target: normalized(&gt_centers(sample, &face.chain, schema)),
    }
}

/// Face crop and eye alignment computed from ground truth.
#[derive(Debug, Clone)]
pub struct TeacherView {
    pub face: View,
    pub aligned: RgbImage,
    /// Original → Aligned.
    pub aligned_chain: TransformChain,
    /// GT region centers in the aligned frame.
    pub centers: Vec<Point2>,
}

impl TeacherView {
    pub fn new(
        sample: &Sample,
        image: &RgbImage,
        schema: &LandmarkSchema,
        config: &CascadeConfig,
    ) -> Result<Self, NetsError> {
        let face = cascade::face_view(image, &sample.bbox, config).map_err(cascade_err)?;
        let centers = gt_centers(sample, &face.chain, schema);
        let a = cascade::align_by_eyes(&face.image, &centers, schema, config.fill()).map_err(cascade_err)?;
        let mut aligned_chain = face.chain.clone();
        aligned_chain.push(Frame::Aligned, a.transform);
        Ok(Self {
            face,
            aligned: a.image,
            aligned_chain,
            centers: a.centers,
        })
    }

    /// Aligned-frame center of magnified `region`.
    pub fn center_of(&self, schema: &LandmarkSchema, region: &str) -> Option<Point2> {
        schema
            .magnified_regions()
            .position(|r| r.name == region)
            .map(|i| self.centers[i])
    }
}

#[derive(Debug, Clone)]
pub struct GroupTarget {
    pub pair: TrainPair,
    /// Original → model input.
    pub chain: TransformChain,
    /// Landmark indices whose target falls outside [0, 1].
    pub outside: Vec<usize>,
}

/// Region crop around `center` (aligned frame) for magnified regions, the
/// whole aligned face for residual ones; targets are the member landmarks.
pub fn build_group_targets(
    sample: &Sample,
    aligned: &RgbImage,
    aligned_chain: &TransformChain,
    region: &RegionSpec,
    center: Option<Point2>,
    config: &CascadeConfig,
) -> Result<GroupTarget, NetsError> {
    let (image, chain) = if region.magnified {
        let center = center.ok_or_else(|| NetsError::Config(format!("region {:?} needs a center", region.name)))?;
        let crop = cascade::region_crop(aligned, center, region, config.fill()).map_err(cascade_err)?;
        let mut chain = aligned_chain.clone();
        chain.extend(&crop.chain)?;
        (crop.image, chain)
    } else {
        (aligned.clone(), aligned_chain.clone())
    };
    let t: Affine = chain.composed();
    let pts: Vec<Point2> = region.indices.iter().map(|&i| t.apply(sample.landmarks[i])).collect();
    let target = normalized(&pts);
    let outside = region
        .indices
        .iter()
        .zip(target.chunks(2))
        .filter(|(_, c)| c.iter().any(|v| !(0.0..=1.0).contains(v)))
        .map(|(&i, _)| i)
        .collect();
    Ok(GroupTarget {
        pair: TrainPair { image, target },
        chain,
        outside,
    })
}

fn cascade_err(e: cascade::CascadeError) -> NetsError {
    match e {
        cascade::CascadeError::Geometry(g) => NetsError::Geometry(g),
        other => NetsError::Config(other.to_string()),
    }
}
