//! Procedural cat faces with analytic landmark ground truth.
//!
//! Every face is drawn in a local frame where the head is an ellipse with
//! unit horizontal semi-axis, +y pointing down. A similarity transform
//! (scale, roll, translation) places it on the canvas; landmarks are the same
//! local points pushed through that transform, so they are exact by
//! construction.

use std::f64::consts::PI;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{worker_rng, write_file, DatasetError, Manifest, Sample};
use crate::geometry::{Affine, BBox, Point2};
use crate::schema::catflw;

/// Fraction of the landmark hull added on each side of the face bbox.
pub const BBOX_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub background: [[u8; 3]; 2],
    pub fur: [u8; 3],
    pub ear_inner: [u8; 3],
    pub eye: [u8; 3],
    pub pupil: [u8; 3],
    pub nose: [u8; 3],
    pub mouth: [u8; 3],
    pub pads: [u8; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 2],
    pub radius: f64,
    pub color: [u8; 3],
}

/// Everything needed to redraw one synthetic face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub canvas: [u32; 2],
    pub center: [f64; 2],
    /// Pixels per local unit.
    pub scale: f64,
    pub roll: f64,
    pub head_aspect: f64,
    pub eye_spacing: f64,
    pub eye_height: f64,
    pub eye_size: [f64; 2],
    pub left_ear_tip: [f64; 2],
    pub nose_y: f64,
    pub mouth_width: f64,
    pub palette: Palette,
    pub blobs: Vec<Blob>,
}

// Ellipse parameter angles of the eight eye contour points of the left eye:
// outer corner, upper lid, inner corner, lower lid.
const EYE_ANGLES: [f64; 8] = [
    PI,
    1.25 * PI,
    1.5 * PI,
    1.75 * PI,
    0.0,
    0.25 * PI,
    0.5 * PI,
    0.75 * PI,
];
const PAD_RADIUS: f64 = 0.11;
const PAD_DX: f64 = 0.2;

impl FaceParams {
    /// Local frame to canvas pixels.
    pub fn placement(&self) -> Affine {
        Affine::scale(self.scale, self.scale)
            .then(&Affine::rotation(self.roll))
            .then(&Affine::translation(self.center[0], self.center[1]))
    }

    fn head_point(&self, angle_deg: f64) -> Point2 {
        let a = angle_deg.to_radians();
        Point2::new(a.cos(), self.head_aspect * a.sin())
    }

    fn eye_center(&self, side: f64) -> Point2 {
        Point2::new(side * self.eye_spacing, self.eye_height)
    }

    fn ear_triangle(&self, side: f64) -> [Point2; 3] {
        let bo = self.head_point(200.0);
        let bi = self.head_point(250.0);
        let tip = Point2::from(self.left_ear_tip);
        [bo, tip, bi].map(|p| Point2::new(side * p.x, p.y))
    }

    fn pad_center(&self, side: f64) -> Point2 {
        Point2::new(side * PAD_DX, self.nose_y + 0.26)
    }

    fn nose_triangle(&self) -> [Point2; 3] {
        [
            Point2::new(-0.09, self.nose_y),
            Point2::new(0.09, self.nose_y),
            Point2::new(0.0, self.nose_y + 0.11),
        ]
    }

    fn philtrum(&self) -> Point2 {
        Point2::new(0.0, self.nose_y + 0.2)
    }

    fn mouth_corner(&self, side: f64) -> Point2 {
        Point2::new(side * self.mouth_width, self.nose_y + 0.27)
    }

    fn lower_lip(&self) -> Point2 {
        Point2::new(0.0, self.nose_y + 0.31)
    }

    fn chin_center(&self) -> Point2 {
        Point2::new(0.0, self.nose_y + 0.42)
    }

    /// The 48 landmarks in the local frame, catflw48 order.
    pub fn local_landmarks(&self) -> Vec<Point2> {
        let mut out = Vec::with_capacity(catflw::K);
        let [ea, eb] = self.eye_size;
        for side in [-1.0, 1.0] {
            let c = self.eye_center(side);
            for t in EYE_ANGLES {
                // the right eye mirrors the left, so its first point is also the outer corner
                out.push(Point2::new(c.x - side * ea * t.cos(), c.y + eb * t.sin()));
            }
        }
        for side in [-1.0, 1.0] {
            let [bo, tip, bi] = self.ear_triangle(side);
            let mid = |a: Point2, b: Point2| Point2::new(0.5 * (a.x + b.x), 0.5 * (a.y + b.y));
            out.extend([bo, mid(bo, tip), tip, mid(tip, bi), bi]);
        }
        // lower face
        let [nl, nr, ntip] = self.nose_triangle();
        out.extend([
            nl,
            nr,
            ntip,
            Point2::new(0.0, 0.5 * (self.eye_height + self.nose_y)),
            Point2::new(0.0, self.eye_height),
            self.philtrum(),
        ]);
        for side in [-1.0, 1.0] {
            let p = self.pad_center(side);
            out.extend([
                Point2::new(p.x, p.y - PAD_RADIUS),
                Point2::new(p.x + side * PAD_RADIUS, p.y),
                Point2::new(p.x, p.y + PAD_RADIUS),
                Point2::new(p.x - side * PAD_RADIUS, p.y),
            ]);
        }
        let cheek = self.head_point(165.0);
        out.extend([cheek, Point2::new(-cheek.x, cheek.y)]);
        // jaw
        let chin = self.chin_center();
        out.extend([
            self.mouth_corner(-1.0),
            self.mouth_corner(1.0),
            self.lower_lip(),
            Point2::new(0.0, chin.y + 0.03),
            Point2::new(-0.14, chin.y),
            Point2::new(0.14, chin.y),
        ]);
        debug_assert_eq!(out.len(), catflw::K);
        out
    }

    /// Landmarks in canvas pixels.
    pub fn landmarks(&self) -> Vec<Point2> {
        self.placement().apply_all(&self.local_landmarks())
    }

    /// Landmark hull grown by [`BBOX_MARGIN`] per side.
    pub fn bbox(&self) -> BBox {
        BBox::hull(&self.landmarks())
            .and_then(|b| b.expand(BBOX_MARGIN))
            .expect("landmarks span a non-degenerate box")
    }

    pub fn sample(&self, image: &str) -> Sample {
        Sample {
            image: image.to_string(),
            width: self.canvas[0],
            height: self.canvas[1],
            bbox: self.bbox(),
            landmarks: self.landmarks(),
            visible: None,
        }
    }

    /// Draws a random face. The result depends only on `rng`'s state.
    pub fn random(rng: &mut impl Rng) -> FaceParams {
        let mut color = |lo: u8, hi: u8| -> [u8; 3] {
            [
                rng.random_range(lo..=hi),
                rng.random_range(lo..=hi),
                rng.random_range(lo..=hi),
            ]
        };
        let palette = Palette {
            background: [color(0, 255), color(0, 255)],
            fur: color(90, 220),
            ear_inner: color(150, 255),
            eye: color(120, 255),
            pupil: color(0, 40),
            nose: color(40, 120),
            mouth: color(0, 60),
            pads: color(200, 255),
        };
        let width = rng.random_range(256..=400u32);
        let height = rng.random_range(224..=320u32);
        let min_side = width.min(height) as f64;
        let mut params = FaceParams {
            canvas: [width, height],
            center: [0.0, 0.0],
            scale: rng.random_range(0.17..0.26) * min_side,
            roll: rng.random_range(-25f64..25.0).to_radians(),
            head_aspect: rng.random_range(0.8..0.92),
            eye_spacing: rng.random_range(0.34..0.42),
            eye_height: rng.random_range(-0.18..-0.08),
            eye_size: [rng.random_range(0.15..0.19), rng.random_range(0.07..0.11)],
            left_ear_tip: [rng.random_range(-0.9..-0.7), rng.random_range(-1.35..-1.15)],
            nose_y: rng.random_range(0.15..0.22),
            mouth_width: rng.random_range(0.13..0.19),
            palette,
            blobs: Vec::new(),
        };
        // keep the whole bbox on the canvas
        for _ in 0..64 {
            params.center = [
                rng.random_range(0.0..width as f64),
                rng.random_range(0.0..height as f64),
            ];
            let b = params.bbox();
            if b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= width as f64 - 1.0 && b.y2 <= height as f64 - 1.0 {
                break;
            }
            params.center = [width as f64 / 2.0, height as f64 / 2.0 + 0.2 * params.scale];
        }
        let n_blobs = rng.random_range(3..8);
        params.blobs = (0..n_blobs)
            .map(|_| Blob {
                center: [
                    rng.random_range(0.0..width as f64),
                    rng.random_range(0.0..height as f64),
                ],
                radius: rng.random_range(8.0..0.4 * min_side),
                color: [
                    rng.random_range(0..=255),
                    rng.random_range(0..=255),
                    rng.random_range(0..=255),
                ],
            })
            .collect();
        params
    }
}

fn in_ellipse(p: Point2, c: Point2, rx: f64, ry: f64) -> bool {
    let dx = (p.x - c.x) / rx;
    let dy = (p.y - c.y) / ry;
    dx * dx + dy * dy <= 1.0
}

fn in_triangle(p: Point2, t: &[Point2; 3]) -> bool {
    let cross = |a: Point2, b: Point2, c: Point2| (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    let d1 = cross(t[0], t[1], p);
    let d2 = cross(t[1], t[2], p);
    let d3 = cross(t[2], t[0], p);
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

fn segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let (vx, vy) = (b.x - a.x, b.y - a.y);
    let t = (((p.x - a.x) * vx + (p.y - a.y) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
    p.distance(&Point2::new(a.x + t * vx, a.y + t * vy))
}

fn shrink(t: [Point2; 3], f: f64) -> [Point2; 3] {
    let c = Point2::mean(&t).expect("three points");
    t.map(|p| Point2::new(c.x + f * (p.x - c.x), c.y + f * (p.y - c.y)))
}

/// Rasterizes the face (one sample per pixel, no anti-aliasing).
pub fn render(params: &FaceParams) -> RgbImage {
    let [w, h] = params.canvas;
    let to_local = params.placement().invert().expect("positive scale");
    let pal = &params.palette;
    let [ea, eb] = params.eye_size;
    let ears = [params.ear_triangle(-1.0), params.ear_triangle(1.0)];
    let inner_ears = ears.map(|t| shrink(t, 0.55));
    let nose = params.nose_triangle();
    let line_halfwidth = 1.2 / params.scale;
    let mouth = [
        (params.philtrum(), params.mouth_corner(-1.0)),
        (params.philtrum(), params.mouth_corner(1.0)),
        (params.nose_triangle()[2], params.philtrum()),
    ];
    let bg = pal.background;

    let mut img = RgbImage::new(w, h);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let t = y as f64 / (h.max(2) - 1) as f64;
        let mut c = [0u8; 3];
        for k in 0..3 {
            c[k] = (bg[0][k] as f64 * (1.0 - t) + bg[1][k] as f64 * t).round() as u8;
        }
        let wp = Point2::new(x as f64, y as f64);
        for b in &params.blobs {
            if wp.distance(&Point2::from(b.center)) <= b.radius {
                c = b.color;
            }
        }

        let p = to_local.apply(wp);
        if ears.iter().any(|e| in_triangle(p, e)) {
            c = pal.fur;
        }
        if inner_ears.iter().any(|e| in_triangle(p, e)) {
            c = pal.ear_inner;
        }
        if in_ellipse(p, Point2::new(0.0, 0.0), 1.0, params.head_aspect) {
            c = pal.fur;
            if in_ellipse(p, params.chin_center(), 0.2, 0.08) {
                c = pal.pads;
            }
            for side in [-1.0, 1.0] {
                let pc = params.pad_center(side);
                if in_ellipse(p, pc, PAD_RADIUS, PAD_RADIUS) {
                    c = pal.pads;
                    for (dx, dy) in [(-0.04, -0.03), (0.03, -0.02), (-0.02, 0.04), (0.04, 0.03)] {
                        if in_ellipse(p, Point2::new(pc.x + dx, pc.y + dy), 0.018, 0.018) {
                            c = pal.mouth;
                        }
                    }
                }
                let ec = params.eye_center(side);
                if in_ellipse(p, ec, ea, eb) {
                    c = if in_ellipse(p, ec, 0.35 * ea, 0.85 * eb) {
                        pal.pupil
                    } else {
                        pal.eye
                    };
                }
            }
            if in_triangle(p, &nose) {
                c = pal.nose;
            }
            if mouth
                .iter()
                .any(|(a, b)| segment_distance(p, *a, *b) <= line_halfwidth)
            {
                c = pal.mouth;
            }
        }
        *px = Rgb(c);
    }
    img
}

/// Parameters of face `index` in a run seeded with `seed`.
pub fn params_for(seed: u64, index: usize) -> FaceParams {
    FaceParams::random(&mut worker_rng(seed, index as u64))
}

pub fn image_name(index: usize) -> String {
    format!("images/cat_{index:05}.png")
}

/// In-memory generation: `(image, sample)` pairs with the catflw48 layout.
pub fn generate_in_memory(n: usize, seed: u64) -> Vec<(RgbImage, Sample, FaceParams)> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let p = params_for(seed, i);
            (render(&p), p.sample(&image_name(i)), p)
        })
        .collect()
}

/// Writes `n` rendered faces, `manifest.json` and `synth_params.json` to `out_dir`.
pub fn synth_generate(n: usize, seed: u64, out_dir: &Path) -> Result<Manifest, DatasetError> {
    if n == 0 {
        return Err(DatasetError::Empty);
    }
    let io = |source| DatasetError::Io {
        path: out_dir.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(out_dir.join("images")).map_err(io)?;
    let samples = (0..n)
        .into_par_iter()
        .map(|i| -> Result<(Sample, FaceParams), DatasetError> {
            let p = params_for(seed, i);
            let name = image_name(i);
            let path = out_dir.join(&name);
            render(&p)
                .save(&path)
                .map_err(|source| DatasetError::Image { path, source })?;
            Ok((p.sample(&name), p))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (samples, params): (Vec<Sample>, Vec<FaceParams>) = samples.into_iter().unzip();
    let mut manifest = Manifest::new("catflw48", samples);
    manifest.notes = Some(format!("procedural cat faces, n={n}, seed={seed}"));
    manifest.base_dir = out_dir.to_path_buf();
    manifest.save(&out_dir.join("manifest.json"))?;
    let mut params_json = serde_json::to_string_pretty(&params)?;
    params_json.push('\n');
    write_file(&out_dir.join("synth_params.json"), params_json.as_bytes())?;
    Ok(manifest)
}
