//! Affine maps between the cascade's coordinate frames, and the bilinear
//! resampler that keeps pixels in step with them.
//!
//! Pixel convention: the continuous coordinate `(i, j)` is the sample
//! position of pixel column `i`, row `j`. There is no half-pixel offset, so a
//! pure integer translation moves pixels without interpolation.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default fill for exposed or padded areas.
pub const MID_GRAY: Rgb<u8> = Rgb([128, 128, 128]);

const SINGULAR_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("transform is not invertible (det = {0:e})")]
    NotInvertible(f64),
    #[error("bbox not ordered: ({x1}, {y1})-({x2}, {y2})")]
    BBoxNotOrdered { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("frame mismatch: chain ends in {expected:?}, step starts in {found:?}")]
    FrameMismatch { expected: Frame, found: Frame },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Arithmetic mean of a non-empty point set.
    pub fn mean(points: &[Point2]) -> Option<Point2> {
        if points.is_empty() {
            return None;
        }
        let n = points.len() as f64;
        let (sx, sy) = points
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Some(Point2::new(sx / n, sy / n))
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(v: [f64; 2]) -> Self {
        Point2::new(v[0], v[1])
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

/// Axis-aligned box given by its top-left and bottom-right corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidInput(format!(
                "non-finite bbox ({x1}, {y1})-({x2}, {y2})"
            )));
        }
        if !(x1 < x2 && y1 < y2) {
            return Err(GeometryError::BBoxNotOrdered { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Box spanned by two arbitrary corners, re-ordered so that x1 <= x2 and y1 <= y2.
    pub fn from_corners(a: Point2, b: Point2) -> Result<Self, GeometryError> {
        Self::new(a.x.min(b.x), a.y.min(b.y), a.x.max(b.x), a.y.max(b.y))
    }

    /// Tight hull of a point set.
    pub fn hull(points: &[Point2]) -> Result<Self, GeometryError> {
        let mut it = points.iter();
        let first = it
            .next()
            .ok_or_else(|| GeometryError::InvalidInput("hull of empty point set".into()))?;
        let (mut x1, mut y1, mut x2, mut y2) = (first.x, first.y, first.x, first.y);
        for p in it {
            x1 = x1.min(p.x);
            y1 = y1.min(p.y);
            x2 = x2.max(p.x);
            y2 = y2.max(p.y);
        }
        Self::new(x1, y1, x2, y2)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> Point2 {
        Point2::new(0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Square of side `side` centered on `center`.
    pub fn square_around(center: Point2, side: f64) -> Result<Self, GeometryError> {
        let h = 0.5 * side;
        Self::new(center.x - h, center.y - h, center.x + h, center.y + h)
    }

    /// Grows each side by `fraction` of the box's own extent along that axis.
    pub fn expand(&self, fraction: f64) -> Result<Self, GeometryError> {
        let dx = self.width() * fraction;
        let dy = self.height() * fraction;
        Self::new(self.x1 - dx, self.y1 - dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn corners(&self) -> [Point2; 4] {
        [
            Point2::new(self.x1, self.y1),
            Point2::new(self.x2, self.y1),
            Point2::new(self.x2, self.y2),
            Point2::new(self.x1, self.y2),
        ]
    }

    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// 2×3 matrix acting on `(x, y, 1)`:
///
/// ```text
/// | a  b  tx |
/// | c  d  ty |
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub c: f64,
    pub d: f64,
    pub ty: f64,
}

impl Default for Affine {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        a: 1.0,
        b: 0.0,
        tx: 0.0,
        c: 0.0,
        d: 1.0,
        ty: 0.0,
    };

    pub const fn new(a: f64, b: f64, tx: f64, c: f64, d: f64, ty: f64) -> Self {
        Self { a, b, tx, c, d, ty }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self::new(1.0, 0.0, dx, 0.0, 1.0, dy)
    }

    pub fn scale(sx: f64, sy: f64) -> Self {
        Self::new(sx, 0.0, 0.0, 0.0, sy, 0.0)
    }

    /// Rotation by `angle` radians about the origin. With +y pointing down a
    /// positive angle turns clockwise on screen.
    pub fn rotation(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c, -s, 0.0, s, c, 0.0)
    }

    pub fn rotation_about(center: Point2, angle: f64) -> Self {
        Self::translation(-center.x, -center.y)
            .then(&Self::rotation(angle))
            .then(&Self::translation(center.x, center.y))
    }

    pub fn coefficients(&self) -> [f64; 6] {
        [self.a, self.b, self.tx, self.c, self.d, self.ty]
    }

    pub fn determinant(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    /// `self` followed by `next`; the result maps `p` to `next(self(p))`.
    pub fn then(&self, next: &Affine) -> Affine {
        Affine {
            a: next.a * self.a + next.b * self.c,
            b: next.a * self.b + next.b * self.d,
            tx: next.a * self.tx + next.b * self.ty + next.tx,
            c: next.c * self.a + next.d * self.c,
            d: next.c * self.b + next.d * self.d,
            ty: next.c * self.tx + next.d * self.ty + next.ty,
        }
    }

    pub fn invert(&self) -> Result<Affine, GeometryError> {
        let det = self.determinant();
        if !det.is_finite() || det.abs() < SINGULAR_EPS {
            return Err(GeometryError::NotInvertible(det));
        }
        let ia = self.d / det;
        let ib = -self.b / det;
        let ic = -self.c / det;
        let id = self.a / det;
        Ok(Affine {
            a: ia,
            b: ib,
            tx: -(ia * self.tx + ib * self.ty),
            c: ic,
            d: id,
            ty: -(ic * self.tx + id * self.ty),
        })
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        Point2::new(
            self.a * p.x + self.b * p.y + self.tx,
            self.c * p.x + self.d * p.y + self.ty,
        )
    }

    pub fn apply_all(&self, points: &[Point2]) -> Vec<Point2> {
        points.iter().map(|p| self.apply(*p)).collect()
    }

    /// Largest absolute coefficient difference.
    pub fn max_abs_diff(&self, other: &Affine) -> f64 {
        self.coefficients()
            .iter()
            .zip(other.coefficients())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

/// Free function form of [`Affine::apply_all`].
pub fn apply(transform: &Affine, points: &[Point2]) -> Vec<Point2> {
    transform.apply_all(points)
}

/// Free function form of [`Affine::invert`].
pub fn invert(transform: &Affine) -> Result<Affine, GeometryError> {
    transform.invert()
}

/// Axis-aligned hull of the four transformed corners of `bbox`.
pub fn bbox_through(transform: &Affine, bbox: &BBox) -> BBox {
    let pts = transform.apply_all(&bbox.corners());
    let x1 = pts.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let y1 = pts.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let x2 = pts.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let y2 = pts.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    // A non-degenerate box through an invertible map keeps positive extent.
    BBox { x1, y1, x2, y2 }
}

/// Coordinate frames the cascade moves through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Original,
    /// Letterboxed full image fed to the face detector.
    Letterboxed,
    /// Face bbox cut out of the original.
    FaceCrop,
    /// Face crop rescaled to the model side.
    Face,
    Aligned,
    Region,
    RegionResized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainStep {
    pub from: Frame,
    pub to: Frame,
    pub transform: Affine,
}

/// Ordered affine steps between labelled frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformChain {
    start: Frame,
    steps: Vec<ChainStep>,
}

impl TransformChain {
    pub fn new(start: Frame) -> Self {
        Self {
            start,
            steps: Vec::new(),
        }
    }

    pub fn start(&self) -> Frame {
        self.start
    }

    pub fn end(&self) -> Frame {
        self.steps.last().map_or(self.start, |s| s.to)
    }

    pub fn steps(&self) -> &[ChainStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Appends a step leaving the current end frame.
    pub fn push(&mut self, to: Frame, transform: Affine) {
        let from = self.end();
        self.steps.push(ChainStep {
            from,
            to,
            transform,
        });
    }

    pub fn with(mut self, to: Frame, transform: Affine) -> Self {
        self.push(to, transform);
        self
    }

    /// Concatenates `other`, which must start where `self` ends.
    pub fn extend(&mut self, other: &TransformChain) -> Result<(), GeometryError> {
        if other.start != self.end() {
            return Err(GeometryError::FrameMismatch {
                expected: self.end(),
                found: other.start,
            });
        }
        self.steps.extend_from_slice(&other.steps);
        Ok(())
    }

    /// Product of all steps in order.
    pub fn composed(&self) -> Affine {
        self.steps
            .iter()
            .fold(Affine::IDENTITY, |acc, s| acc.then(&s.transform))
    }

    /// Reversed chain of inverted steps.
    pub fn inverse(&self) -> Result<TransformChain, GeometryError> {
        let mut steps = Vec::with_capacity(self.steps.len());
        for s in self.steps.iter().rev() {
            steps.push(ChainStep {
                from: s.to,
                to: s.from,
                transform: s.transform.invert()?,
            });
        }
        Ok(TransformChain {
            start: self.end(),
            steps,
        })
    }

    /// Applies every step in turn.
    pub fn forward(&self, points: &[Point2]) -> Vec<Point2> {
        let mut out = points.to_vec();
        for s in &self.steps {
            for p in out.iter_mut() {
                *p = s.transform.apply(*p);
            }
        }
        out
    }

    /// Maps points from the end frame back to the start frame.
    pub fn backward(&self, points: &[Point2]) -> Result<Vec<Point2>, GeometryError> {
        Ok(self.inverse()?.forward(points))
    }
}

/// Transform taking a `width`×`height` extent onto a `target`-side square
/// with aspect ratio kept and the content centered.
pub fn letterbox_transform(width: f64, height: f64, target: f64) -> Result<Affine, GeometryError> {
    if !(width > 0.0 && height > 0.0 && target > 0.0) {
        return Err(GeometryError::InvalidInput(format!(
            "letterbox of {width}x{height} onto {target}"
        )));
    }
    let side = width.max(height);
    let pad_x = 0.5 * (side - width);
    let pad_y = 0.5 * (side - height);
    let s = target / side;
    Ok(Affine::translation(pad_x, pad_y).then(&Affine::scale(s, s)))
}

/// Transform stretching a `width`×`height` extent onto a `target` square.
pub fn stretch_transform(width: f64, height: f64, target: f64) -> Result<Affine, GeometryError> {
    if !(width > 0.0 && height > 0.0 && target > 0.0) {
        return Err(GeometryError::InvalidInput(format!(
            "stretch of {width}x{height} onto {target}"
        )));
    }
    Ok(Affine::scale(target / width, target / height))
}

fn check_image(image: &RgbImage) -> Result<(), GeometryError> {
    if image.width() == 0 || image.height() == 0 {
        return Err(GeometryError::InvalidInput(format!(
            "degenerate image {}x{}",
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

/// Resamples `src` into a `width`×`height` output where output pixel `q` takes
/// the bilinear sample at `src_to_dst⁻¹(q)`. Samples outside `src` read `fill`.
pub fn warp(
    src: &RgbImage,
    src_to_dst: &Affine,
    width: u32,
    height: u32,
    fill: Rgb<u8>,
) -> Result<RgbImage, GeometryError> {
    check_image(src)?;
    if src_to_dst.is_identity() && src.dimensions() == (width, height) {
        return Ok(src.clone());
    }
    let inv = src_to_dst.invert()?;
    let (sw, sh) = (src.width() as i64, src.height() as i64);
    let raw = src.as_raw();
    let fetch = |x: i64, y: i64| -> [f64; 3] {
        if x < 0 || y < 0 || x >= sw || y >= sh {
            [fill[0] as f64, fill[1] as f64, fill[2] as f64]
        } else {
            let i = ((y * sw + x) * 3) as usize;
            [raw[i] as f64, raw[i + 1] as f64, raw[i + 2] as f64]
        }
    };

    let mut out = RgbImage::new(width, height);
    for (ox, oy, px) in out.enumerate_pixels_mut() {
        let s = inv.apply(Point2::new(ox as f64, oy as f64));
        let x0 = s.x.floor();
        let y0 = s.y.floor();
        let fx = s.x - x0;
        let fy = s.y - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let mut acc = [0.0f64; 3];
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            if wx == 0.0 {
                continue;
            }
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                if wy == 0.0 {
                    continue;
                }
                let v = fetch(x0 + dx, y0 + dy);
                let w = wx * wy;
                for ch in 0..3 {
                    acc[ch] += w * v[ch];
                }
            }
        }
        *px = Rgb([
            acc[0].round().clamp(0.0, 255.0) as u8,
            acc[1].round().clamp(0.0, 255.0) as u8,
            acc[2].round().clamp(0.0, 255.0) as u8,
        ]);
    }
    Ok(out)
}

/// Aspect-preserving resize onto a `target`×`target` canvas padded with `fill`.
pub fn letterbox(
    image: &RgbImage,
    target: u32,
    fill: Rgb<u8>,
) -> Result<(RgbImage, Affine), GeometryError> {
    check_image(image)?;
    if target == 0 {
        return Err(GeometryError::InvalidInput("letterbox target 0".into()));
    }
    let t = letterbox_transform(image.width() as f64, image.height() as f64, target as f64)?;
    Ok((warp(image, &t, target, target, fill)?, t))
}

/// Plain (non aspect-preserving) resize to `width`×`height`.
pub fn resize(
    image: &RgbImage,
    width: u32,
    height: u32,
) -> Result<(RgbImage, Affine), GeometryError> {
    check_image(image)?;
    let t = Affine::scale(
        width as f64 / image.width() as f64,
        height as f64 / image.height() as f64,
    );
    Ok((warp(image, &t, width, height, MID_GRAY)?, t))
}

/// Cuts `bbox` out of `image`; the output is the box size rounded to whole
/// pixels and areas outside the source read `fill`. The transform is the exact
/// (possibly fractional) translation.
pub fn crop(
    image: &RgbImage,
    bbox: &BBox,
    fill: Rgb<u8>,
) -> Result<(RgbImage, Affine), GeometryError> {
    check_image(image)?;
    let w = bbox.width().round().max(1.0) as u32;
    let h = bbox.height().round().max(1.0) as u32;
    let t = Affine::translation(-bbox.x1, -bbox.y1);
    Ok((warp(image, &t, w, h, fill)?, t))
}

/// Rotation by `angle` radians about `center`; output keeps the input size.
pub fn rotate_about(
    image: &RgbImage,
    center: Point2,
    angle: f64,
    fill: Rgb<u8>,
) -> Result<(RgbImage, Affine), GeometryError> {
    check_image(image)?;
    if !angle.is_finite() {
        return Err(GeometryError::InvalidInput(format!("angle {angle}")));
    }
    if angle == 0.0 {
        return Ok((image.clone(), Affine::IDENTITY));
    }
    let t = Affine::rotation_about(center, angle);
    Ok((warp(image, &t, image.width(), image.height(), fill)?, t))
}

/// Geometric center of the pixel grid under the integer-sample convention.
pub fn image_center(image: &RgbImage) -> Point2 {
    Point2::new(
        (image.width() as f64 - 1.0) * 0.5,
        (image.height() as f64 - 1.0) * 0.5,
    )
}
