//! Keypoint-aware augmentation. Rotation moves landmarks and bbox through the
//! same affine map as the pixels; every other method is photometric and
//! leaves coordinates untouched.

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::geometry::{self, bbox_through, Affine, Point2, MID_GRAY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rotation,
    Color,
    Brightness,
    Contrast,
    Sharpness,
    Blur,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodProbabilities {
    pub rotation: f64,
    pub color: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub sharpness: f64,
    pub blur: f64,
    pub noise: f64,
}

impl MethodProbabilities {
    pub fn uniform(p: f64) -> Self {
        Self {
            rotation: p,
            color: p,
            brightness: p,
            contrast: p,
            sharpness: p,
            blur: p,
            noise: p,
        }
    }

    /// Fires only `method`, always.
    pub fn only(method: Method) -> Self {
        let mut p = Self::uniform(0.0);
        *p.get_mut(method) = 1.0;
        p
    }

    pub fn get(&self, method: Method) -> f64 {
        match method {
            Method::Rotation => self.rotation,
            Method::Color => self.color,
            Method::Brightness => self.brightness,
            Method::Contrast => self.contrast,
            Method::Sharpness => self.sharpness,
            Method::Blur => self.blur,
            Method::Noise => self.noise,
        }
    }

    fn get_mut(&mut self, method: Method) -> &mut f64 {
        match method {
            Method::Rotation => &mut self.rotation,
            Method::Color => &mut self.color,
            Method::Brightness => &mut self.brightness,
            Method::Contrast => &mut self.contrast,
            Method::Sharpness => &mut self.sharpness,
            Method::Blur => &mut self.blur,
            Method::Noise => &mut self.noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub probabilities: MethodProbabilities,
    /// Rotation angle range in degrees.
    pub rotation_deg: (f64, f64),
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub color: (f64, f64),
    pub sharpness: (f64, f64),
    /// Candidate Gaussian kernel sizes.
    pub blur_kernels: Vec<u32>,
    /// Additive uniform noise amplitude range, as a fraction of full scale.
    pub noise_amplitude: (f64, f64),
    /// Augmented copies emitted per training image.
    pub copies: usize,
    pub fill: [u8; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            probabilities: MethodProbabilities::uniform(0.9),
            rotation_deg: (-20.0, 20.0),
            brightness: (0.7, 1.3),
            contrast: (0.7, 1.3),
            color: (0.7, 1.3),
            sharpness: (0.7, 1.3),
            blur_kernels: vec![3, 5],
            noise_amplitude: (0.0, 10.0 / 255.0),
            copies: 1,
            fill: MID_GRAY.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), String> {
        for m in ALL_METHODS {
            let p = self.probabilities.get(m);
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("probability for {m:?} is {p}"));
            }
        }
        for (name, (lo, hi)) in [
            ("rotation_deg", self.rotation_deg),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("color", self.color),
            ("sharpness", self.sharpness),
            ("noise_amplitude", self.noise_amplitude),
        ] {
            if lo.partial_cmp(&hi).is_none_or(|o| o.is_gt()) {
                return Err(format!("range {name} = ({lo}, {hi}) is not ordered"));
            }
        }
        if self.blur_kernels.iter().any(|k| k % 2 == 0) {
            return Err("blur kernels must be odd".into());
        }
        Ok(())
    }
}

const ALL_METHODS: [Method; 7] = [
    Method::Rotation,
    Method::Color,
    Method::Brightness,
    Method::Contrast,
    Method::Sharpness,
    Method::Blur,
    Method::Noise,
];

#[derive(Debug, Clone)]
pub struct Augmented {
    pub image: RgbImage,
    pub sample: Sample,
    /// Composite geometric transform applied to coordinates.
    pub transform: Affine,
    pub fired: Vec<Method>,
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Applies each method independently with its configured probability.
pub fn augment(
    sample: &Sample,
    image: &RgbImage,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Augmented {
    let mut img = image.clone();
    let mut out = sample.clone();
    let mut transform = Affine::IDENTITY;
    let mut fired = Vec::new();
    let fill = Rgb(config.fill);

    for method in ALL_METHODS {
        let p = config.probabilities.get(method);
        if p <= 0.0 || !rng.random_bool(p.min(1.0)) {
            continue;
        }
        fired.push(method);
        match method {
            Method::Rotation => {
                let angle = draw(rng, config.rotation_deg).to_radians();
                let center = geometry::image_center(&img);
                let (rotated, t) = geometry::rotate_about(&img, center, angle, fill)
                    .expect("non-empty image and finite angle");
                img = rotated;
                transform = transform.then(&t);
            }
            Method::Color => color(&mut img, draw(rng, config.color)),
            Method::Brightness => brightness(&mut img, draw(rng, config.brightness)),
            Method::Contrast => contrast(&mut img, draw(rng, config.contrast)),
            Method::Sharpness => sharpness(&mut img, draw(rng, config.sharpness)),
            Method::Blur => {
                if let Some(&k) = pick(rng, &config.blur_kernels) {
                    img = gaussian_blur(&img, k);
                }
            }
            Method::Noise => {
                let amp = draw(rng, config.noise_amplitude) * 255.0;
                if amp > 0.0 {
                    for v in img.iter_mut() {
                        let n = rng.random_range(-amp..=amp);
                        *v = (*v as f64 + n).round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
        }
    }

    if !transform.is_identity() {
        out.landmarks = transform.apply_all(&sample.landmarks);
        out.bbox = bbox_through(&transform, &sample.bbox);
        let (w, h) = (img.width() as f64, img.height() as f64);
        let prior = sample.visible.clone();
        let flags: Vec<bool> = out
            .landmarks
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let inside = in_frame(p, w, h);
                inside && prior.as_ref().is_none_or(|v| v[i])
            })
            .collect();
        if prior.is_some() || flags.iter().any(|f| !f) {
            out.visible = Some(flags);
        }
    }
    Augmented {
        image: img,
        sample: out,
        transform,
        fired,
    }
}

fn in_frame(p: &Point2, w: f64, h: f64) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x <= w - 1.0 && p.y <= h - 1.0
}

fn pick<'a, T>(rng: &mut impl Rng, items: &'a [T]) -> Option<&'a T> {
    if items.is_empty() {
        None
    } else {
        Some(&items[rng.random_range(0..items.len())])
    }
}

fn luma(p: &Rgb<u8>) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

// out = degenerate + factor * (img - degenerate), per channel
fn blend_with(img: &mut RgbImage, factor: f64, degenerate: impl Fn(u32, u32, &Rgb<u8>) -> [f64; 3]) {
    let src = img.clone();
    for (x, y, px) in img.enumerate_pixels_mut() {
        let d = degenerate(x, y, src.get_pixel(x, y));
        for c in 0..3 {
            let v = d[c] + factor * (px[c] as f64 - d[c]);
            px[c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
}

fn color(img: &mut RgbImage, factor: f64) {
    blend_with(img, factor, |_, _, p| {
        let l = luma(p);
        [l, l, l]
    });
}

fn brightness(img: &mut RgbImage, factor: f64) {
    blend_with(img, factor, |_, _, _| [0.0; 3]);
}

fn contrast(img: &mut RgbImage, factor: f64) {
    let n = (img.width() * img.height()) as f64;
    let mean = img.pixels().map(luma).sum::<f64>() / n;
    blend_with(img, factor, |_, _, _| [mean; 3]);
}

// Blend against a 3x3 smoothing (centre weight 5, ring weight 1); the border
// keeps its original values.
fn sharpness(img: &mut RgbImage, factor: f64) {
    let src = img.clone();
    let (w, h) = src.dimensions();
    blend_with(img, factor, |x, y, p| {
        if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h {
            return [p[0] as f64, p[1] as f64, p[2] as f64];
        }
        let mut acc = [0.0; 3];
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let q = src.get_pixel((x as i32 + dx) as u32, (y as i32 + dy) as u32);
                let wgt = if dx == 0 && dy == 0 { 5.0 } else { 1.0 };
                for c in 0..3 {
                    acc[c] += wgt * q[c] as f64;
                }
            }
        }
        acc.map(|v| v / 13.0)
    });
}

fn gaussian_blur(img: &RgbImage, kernel: u32) -> RgbImage {
    // sigma from kernel size as in common CV toolkits
    let sigma = 0.3 * ((kernel as f32 - 1.0) * 0.5 - 1.0) + 0.8;
    image::imageops::blur(img, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::worker_rng;
    use crate::geometry::BBox;

    fn sample(points: Vec<Point2>) -> Sample {
        Sample {
            image: "x.png".into(),
            width: 224,
            height: 224,
            bbox: BBox::new(20.0, 30.0, 200.0, 190.0).unwrap(),
            landmarks: points,
            visible: None,
        }
    }

    fn textured() -> RgbImage {
        RgbImage::from_fn(224, 224, |x, y| {
            Rgb([(x * 7 % 256) as u8, (y * 5 % 256) as u8, ((x + y) % 256) as u8])
        })
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let cfg = AugmentConfig {
            probabilities: MethodProbabilities::uniform(0.0),
            ..Default::default()
        };
        let img = textured();
        let s = sample(vec![Point2::new(50.0, 60.0)]);
        let a = augment(&s, &img, &cfg, &mut worker_rng(1, 0));
        assert_eq!(a.image, img);
        assert_eq!(a.sample, s);
        assert!(a.fired.is_empty());
    }

    #[test]
    fn photometric_methods_leave_coordinates_bit_identical() {
        let img = textured();
        let s = sample(vec![Point2::new(50.25, 60.5), Point2::new(1.0, 2.0)]);
        for m in [
            Method::Brightness,
            Method::Color,
            Method::Contrast,
            Method::Sharpness,
            Method::Blur,
            Method::Noise,
        ] {
            let cfg = AugmentConfig {
                probabilities: MethodProbabilities::only(m),
                brightness: (1.2, 1.2),
                ..Default::default()
            };
            let a = augment(&s, &img, &cfg, &mut worker_rng(3, 0));
            assert_eq!(a.fired, vec![m]);
            assert_eq!(a.sample, s, "{m:?}");
            assert!(a.transform.is_identity());
        }
    }

    #[test]
    fn forced_quarter_turn_keeps_marker_under_landmark() {
        let mut img = RgbImage::from_pixel(224, 224, MID_GRAY);
        let p = Point2::new(40.0, 170.0);
        img.put_pixel(40, 170, Rgb([255, 0, 0]));
        let cfg = AugmentConfig {
            probabilities: MethodProbabilities::only(Method::Rotation),
            rotation_deg: (90.0, 90.0),
            ..Default::default()
        };
        let a = augment(&sample(vec![p]), &img, &cfg, &mut worker_rng(0, 0));
        let q = a.sample.landmarks[0];
        let (mx, my) = a
            .image
            .enumerate_pixels()
            .max_by_key(|(_, _, px)| px[0] as i32 - px[1] as i32)
            .map(|(x, y, _)| (x as f64, y as f64))
            .unwrap();
        assert!((mx - q.x).abs() <= 1.0 && (my - q.y).abs() <= 1.0, "{q:?} vs ({mx}, {my})");
        assert_eq!(a.sample.bbox, bbox_through(&a.transform, &sample(vec![p]).bbox));
    }

    #[test]
    fn rotated_out_of_frame_landmarks_are_kept_and_flagged() {
        let img = textured();
        let s = sample(vec![Point2::new(1.0, 1.0), Point2::new(112.0, 112.0)]);
        let cfg = AugmentConfig {
            probabilities: MethodProbabilities::only(Method::Rotation),
            rotation_deg: (30.0, 30.0),
            ..Default::default()
        };
        let a = augment(&s, &img, &cfg, &mut worker_rng(0, 0));
        let expect = a.transform.apply(s.landmarks[0]);
        assert_eq!(a.sample.landmarks[0], expect);
        assert_eq!(a.sample.visible, Some(vec![false, true]));
    }

    #[test]
    fn geometric_consistency_over_random_configs() {
        let img = textured();
        let s = sample((0..10).map(|i| Point2::new(20.0 * i as f64, 11.0 * i as f64)).collect());
        let cfg = AugmentConfig::default();
        for seed in 0..20 {
            let a = augment(&s, &img, &cfg, &mut worker_rng(seed, 2));
            assert_eq!(a.sample.landmarks, a.transform.apply_all(&s.landmarks));
        }
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let c = AugmentConfig {
            brightness: (1.3, 0.7),
            ..AugmentConfig::default()
        };
        assert!(c.validate().is_err());
        let mut c = AugmentConfig::default();
        c.probabilities.noise = 1.5;
        assert!(c.validate().is_err());
    }
}
