//! Acceptance suite: one line per criterion, nonzero exit on any failure.
//!
//! `cargo test -p eld-cli --test acceptance [-- <substring>]`

use std::collections::{BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, ensure, Context, Result};
use candle_core::{DType, Tensor};
use eld_annotate::clock::parse_ts;
use eld_annotate::store::CorrectionRecord;
use eld_annotate::{
    serve_on, Annotator, AnnotatorConfig, BatchMetrics, CascadeTrainer, PrefillSource, SourceResolver, TaskView,
    Trainer,
};
use eld_core::cascade::oracle::oracle_checkpoints;
use eld_core::cascade::{predict, CascadeConfig, CheckpointSet};
use eld_core::dataset::synth::{generate_in_memory, synth_generate};
use eld_core::dataset::{
    augment, split_sizes, worker_rng, AugmentConfig, Manifest, Method, MethodProbabilities, Sample,
};
use eld_core::evaluation::{evaluate, nme, Mode};
use eld_core::geometry::{
    bbox_through, image_center, letterbox_transform, rotate_about, warp, Affine, BBox, Frame, Point2,
    TransformChain, MID_GRAY,
};
use eld_core::nets::train::batch_loss;
use eld_core::nets::{
    fit, train_all, CoordinateModel, PlateauScheduler, RunOptions, TrainConfig, TrainPair, Trainable, TINY_CONV,
};
use eld_core::schema::catflw48;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

type Check = fn() -> Result<String>;

const CRITERIA: &[(&str, Check)] = &[
    ("transform_round_trip", transform_round_trip),
    ("cascade_identity_oracle", cascade_identity_oracle),
    ("cascade_translation_equivariance", cascade_translation_equivariance),
    ("cascade_rotation_equivariance", cascade_rotation_equivariance),
    ("structural_constants", structural_constants),
    ("split_sizes_2091", split_sizes_2091),
    ("nme_matches_brute_force", nme_matches_brute_force),
    ("nme_single_landmark_displacement", nme_single_landmark_displacement),
    ("nme_rigid_invariance", nme_rigid_invariance),
    ("nme_subset_additivity", nme_subset_additivity),
    ("head_gradient_check", head_gradient_check),
    ("scheduler_patience_drop", scheduler_patience_drop),
    ("best_checkpoint_is_val_argmin", best_checkpoint_is_val_argmin),
    ("augmentation_pixel_marker", augmentation_pixel_marker),
    ("desk_scale_overfit", desk_scale_overfit),
    ("annotation_exactly_once_claiming", annotation_exactly_once_claiming),
    ("annotation_shift_flags_and_metrics", annotation_shift_flags_and_metrics),
    ("annotation_two_retrain_protocol", annotation_two_retrain_protocol),
];

fn main() -> ExitCode {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in CRITERIA {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(anyhow!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({detail}, {secs:.2}s)"),
            Err(e) => {
                failed += 1;
                println!("FAIL {name} ({e:#}, {secs:.2}s)");
            }
        }
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn max_error(a: &[Point2], b: &[Point2]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p.distance(q)).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- geometry

type Mat3 = [[f64; 3]; 3];

fn mat(t: &Affine) -> Mat3 {
    [[t.a, t.b, t.tx], [t.c, t.d, t.ty], [0.0, 0.0, 1.0]]
}

fn mul(l: &Mat3, r: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| l[i][k] * r[k][j]).sum();
        }
    }
    out
}

fn random_step(rng: &mut ChaCha8Rng) -> Result<Affine> {
    Ok(match rng.random_range(0..4) {
        0 => letterbox_transform(rng.random_range(40.0..2000.0), rng.random_range(40.0..2000.0), 224.0)?,
        1 => Affine::translation(-rng.random_range(0.0..600.0), -rng.random_range(0.0..600.0)),
        2 => Affine::rotation_about(
            Point2::new(rng.random_range(0.0..500.0), rng.random_range(0.0..500.0)),
            rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        ),
        _ => {
            let s = rng.random_range(0.25..4.0);
            Affine::translation(-rng.random_range(0.0..300.0), -rng.random_range(0.0..300.0)).then(&Affine::scale(s, s))
        }
    })
}

fn transform_round_trip() -> Result<String> {
    const FRAMES: [Frame; 6] = [
        Frame::Letterboxed,
        Frame::FaceCrop,
        Frame::Face,
        Frame::Aligned,
        Frame::Region,
        Frame::RegionResized,
    ];
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut worst_compose: f64 = 0.0;
    for _ in 0..1000 {
        let mut chain = TransformChain::new(Frame::Original);
        let mut product: Mat3 = mat(&Affine::IDENTITY);
        let n = rng.random_range(1..=6);
        for frame in &FRAMES[..n] {
            let step = random_step(&mut rng)?;
            product = mul(&mat(&step), &product);
            chain.push(*frame, step);
        }
        let points: Vec<Point2> = (0..16)
            .map(|_| Point2::new(rng.random_range(-200.0..2200.0), rng.random_range(-200.0..2200.0)))
            .collect();
        let fwd = chain.forward(&points);
        let back = chain.backward(&fwd)?;
        worst = worst.max(max_error(&back, &points));
        for (p, q) in points.iter().zip(&fwd) {
            let x = product[0][0] * p.x + product[0][1] * p.y + product[0][2];
            let y = product[1][0] * p.x + product[1][1] * p.y + product[1][2];
            let scale = 1.0 + q.x.abs().max(q.y.abs());
            worst_compose = worst_compose.max(Point2::new(x, y).distance(q) / scale);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(worst < 1e-6, "round-trip error {worst:e} px");
    ensure!(worst_compose < 1e-9, "composition differs from matrix product by {worst_compose:e}");
    ensure!(secs < 10.0, "took {secs:.2}s");
    Ok(format!("1000 chains, max error {worst:.2e} px"))
}

// ---------------------------------------------------------------- cascade

fn cascade_identity_oracle() -> Result<String> {
    let schema = catflw48();
    let mut worst: f64 = 0.0;
    let samples = generate_in_memory(100, 77);
    for (img, s, _) in &samples {
        let set = oracle_checkpoints(s, &schema, CascadeConfig::default());
        let p = predict(img, &set)?;
        ensure!(p.landmarks.len() == 48, "{} landmarks", p.landmarks.len());
        worst = worst.max(max_error(&p.landmarks, &s.landmarks));
    }
    ensure!(worst < 1e-4, "max error {worst:e} px");
    Ok(format!("{} samples, max error {worst:.2e} px", samples.len()))
}

fn oracle_predict(img: &RgbImage, s: &Sample) -> Result<Vec<Point2>> {
    let set = oracle_checkpoints(s, &catflw48(), CascadeConfig::default());
    Ok(predict(img, &set)?.landmarks)
}

fn moved_sample(s: &Sample, t: &Affine) -> Sample {
    Sample {
        landmarks: t.apply_all(&s.landmarks),
        bbox: bbox_through(t, &s.bbox),
        ..s.clone()
    }
}

fn cascade_translation_equivariance() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for (img, s, _) in generate_in_memory(20, 78) {
        let t = Affine::translation(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0));
        let moved = warp(&img, &t, img.width(), img.height(), MID_GRAY)?;
        let a = oracle_predict(&img, &s)?;
        let b = oracle_predict(&moved, &moved_sample(&s, &t))?;
        worst = worst.max(max_error(&t.apply_all(&a), &b));
    }
    ensure!(worst < 1e-3, "max error {worst:e} px");
    Ok(format!("20 shifts, max error {worst:.2e} px"))
}

fn cascade_rotation_equivariance() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for (img, s, _) in generate_in_memory(20, 79) {
        let angle = rng.random_range(-0.6..0.6);
        let (rotated, t) = rotate_about(&img, image_center(&img), angle, MID_GRAY)?;
        let a = oracle_predict(&img, &s)?;
        let b = oracle_predict(&rotated, &moved_sample(&s, &t))?;
        worst = worst.max(max_error(&t.apply_all(&a), &b));
    }
    ensure!(worst < 1e-3, "max error {worst:e} px");
    Ok(format!("20 rotations, max error {worst:.2e} px"))
}

// ---------------------------------------------------------------- structure

fn tiny_options(epochs: usize, patience: usize) -> RunOptions {
    RunOptions {
        extractor: TINY_CONV.into(),
        train: TrainConfig {
            epochs,
            patience,
            batch_size: 4,
            learning_rate: 1e-3,
            augment: None,
            center_jitter_px: 0.0,
            ..TrainConfig::default()
        },
        cascade: CascadeConfig::default(),
        stages: None,
    }
}

fn structural_constants() -> Result<String> {
    let schema = catflw48();
    let counts: Vec<usize> = schema.regions.iter().map(|r| r.indices.len()).collect();
    ensure!(counts == [8, 8, 5, 5, 22], "region sizes {counts:?}");
    ensure!(counts.iter().sum::<usize>() == 48 && schema.k == 48, "K = {}", schema.k);
    let sides: Vec<f64> = schema.regions.iter().map(|r| r.crop_side(224.0)).collect();
    ensure!(sides == [56.0, 56.0, 112.0, 112.0, 112.0], "crop sides {sides:?}");
    ensure!(schema.output_len() == 96, "output length {}", schema.output_len());
    let stages = schema.stage_names();
    ensure!(stages.len() == 7, "stages {stages:?}");

    let dir = tempfile::tempdir()?;
    let m = synth_generate(4, 3, &dir.path().join("data"))?;
    let run = dir.path().join("run");
    train_all(&m, &m, &schema, &tiny_options(2, 1), &run, |_, _| {})?;
    let set = CheckpointSet::load(&run)?;
    ensure!(set.face.output_len() == 4, "face head OUT {}", set.face.output_len());
    ensure!(set.centers.output_len() == 10, "center head OUT {}", set.centers.output_len());
    let region_out: usize = set.regions.values().map(|r| r.output_len()).sum();
    ensure!(region_out == 96, "region heads emit {region_out}");
    let on_disk = stages.iter().filter(|s| run.join(s).join("model.safetensors").exists()).count();
    ensure!(on_disk == 7, "{on_disk} checkpoints written");
    Ok("regions [8,8,5,5,22], sides 56/112/112, 96 outputs, 7 checkpoints, heads 4/10".into())
}

fn split_sizes_2091() -> Result<String> {
    let sizes = split_sizes(2091, [0.75, 0.15, 0.10])?;
    ensure!(sizes == [1569, 314, 208], "{sizes:?}");
    Ok("1569/314/208".into())
}

// ---------------------------------------------------------------- NME

fn random_face(rng: &mut ChaCha8Rng) -> Vec<Point2> {
    let mut gt: Vec<Point2> = (0..48)
        .map(|_| Point2::new(rng.random_range(0.0..400.0), rng.random_range(0.0..400.0)))
        .collect();
    let [a, b] = catflw48().iod_pair;
    gt[a] = Point2::new(100.0 + rng.random_range(-10.0..10.0), 150.0);
    gt[b] = Point2::new(300.0 + rng.random_range(-10.0..10.0), 160.0);
    gt
}

fn jitter(rng: &mut ChaCha8Rng, gt: &[Point2], amount: f64) -> Vec<Point2> {
    gt.iter()
        .map(|p| Point2::new(p.x + rng.random_range(-amount..amount), p.y + rng.random_range(-amount..amount)))
        .collect()
}

fn brute_nme(pred: &[Point2], gt: &[Point2], pair: [usize; 2], subset: &[usize]) -> f64 {
    let (ax, ay) = (gt[pair[0]].x, gt[pair[0]].y);
    let (bx, by) = (gt[pair[1]].x, gt[pair[1]].y);
    let iod = ((ax - bx) * (ax - bx) + (ay - by) * (ay - by)).sqrt();
    let mut total = 0.0;
    for &i in subset {
        let dx = pred[i].x - gt[i].x;
        let dy = pred[i].y - gt[i].y;
        total += (dx * dx + dy * dy).sqrt();
    }
    100.0 * total / subset.len() as f64 / iod
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn nme_matches_brute_force() -> Result<String> {
    let pair = catflw48().iod_pair;
    let all: Vec<usize> = (0..48).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let gt = random_face(&mut rng);
        let pred = jitter(&mut rng, &gt, 20.0);
        worst = worst.max(rel(nme(&pred, &gt, pair, None)?, brute_nme(&pred, &gt, pair, &all)));
    }
    ensure!(worst < 1e-9, "relative error {worst:e}");
    Ok(format!("100 pairs, max relative error {worst:.1e}"))
}

fn nme_single_landmark_displacement() -> Result<String> {
    let schema = catflw48();
    let pair = schema.iod_pair;
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let gt = random_face(&mut rng);
        let iod = gt[pair[0]].distance(&gt[pair[1]]);
        let k = rng.random_range(0..48);
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let mut pred = gt.clone();
        pred[k] = Point2::new(gt[k].x + iod * theta.cos(), gt[k].y + iod * theta.sin());
        worst = worst.max((nme(&pred, &gt, pair, None)? - 100.0 / 48.0).abs());
    }
    ensure!(worst < 1e-9, "deviation {worst:e} from 100/48");
    Ok(format!("100/48 within {worst:.1e}"))
}

fn nme_rigid_invariance() -> Result<String> {
    let pair = catflw48().iod_pair;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let gt = random_face(&mut rng);
        let pred = jitter(&mut rng, &gt, 15.0);
        let s = rng.random_range(0.2..5.0);
        let t = Affine::rotation(rng.random_range(-3.0..3.0))
            .then(&Affine::scale(s, s))
            .then(&Affine::translation(rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)));
        let base = nme(&pred, &gt, pair, None)?;
        let moved = nme(&t.apply_all(&pred), &t.apply_all(&gt), pair, None)?;
        worst = worst.max(rel(base, moved));
    }
    ensure!(worst < 1e-9, "relative change {worst:e}");
    Ok(format!("rotation+scale+translation, max relative change {worst:.1e}"))
}

fn nme_subset_additivity() -> Result<String> {
    let schema = catflw48();
    let pair = schema.iod_pair;
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let gt = random_face(&mut rng);
        let pred = jitter(&mut rng, &gt, 25.0);
        let whole = 48.0 * nme(&pred, &gt, pair, None)?;
        let mut parts = 0.0;
        for r in &schema.regions {
            parts += r.indices.len() as f64 * nme(&pred, &gt, pair, Some(&r.indices))?;
        }
        worst = worst.max(rel(whole, parts));
    }
    ensure!(worst < 1e-9, "relative error {worst:e}");
    Ok(format!("region-weighted sum, max relative error {worst:.1e}"))
}

// ---------------------------------------------------------------- training

fn head_gradient_check() -> Result<String> {
    let model = CoordinateModel::new(TINY_CONV, 10, DType::F64, 21)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pairs: Vec<TrainPair> = (0..3)
        .map(|_| TrainPair {
            image: RgbImage::from_fn(224, 224, |_, _| Rgb(rng.random())),
            target: (0..10).map(|_| rng.random_range(0.0..1.0)).collect(),
        })
        .collect();
    let refs: Vec<&TrainPair> = pairs.iter().collect();
    let grads = batch_loss(&model, &refs)?.backward()?;
    let eval = || -> Result<f64> { Ok(batch_loss(&model, &refs)?.to_scalar::<f64>()?) };
    let h = 1e-6;
    let (mut checked, mut worst) = (0, 0.0f64);
    for (name, var) in model.named_vars() {
        if !name.starts_with("head.") {
            continue;
        }
        let g = grads
            .get(var.as_tensor())
            .context("missing gradient")?
            .flatten_all()?
            .to_vec1::<f64>()?;
        let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let dims = var.dims().to_vec();
        let set = |w: Vec<f64>| var.set(&Tensor::from_vec(w, dims.clone(), model.device())?);
        for k in (0..base.len()).step_by((base.len() / 8).max(1)) {
            let mut w = base.clone();
            w[k] = base[k] + h;
            set(w.clone())?;
            let up = eval()?;
            w[k] = base[k] - h;
            set(w)?;
            let down = eval()?;
            set(base.clone())?;
            let numeric = (up - down) / (2.0 * h);
            if g[k].abs() < 1e-9 && numeric.abs() < 1e-9 {
                continue;
            }
            let err = (g[k] - numeric).abs() / g[k].abs().max(numeric.abs()).max(1e-6);
            ensure!(err < 1e-4, "{name}[{k}]: analytic {} numeric {numeric}", g[k]);
            worst = worst.max(err);
            checked += 1;
        }
    }
    ensure!(checked >= 10, "only {checked} entries checked");
    Ok(format!("{checked} head entries, max relative error {worst:.1e}"))
}

fn scheduler_patience_drop() -> Result<String> {
    let config = TrainConfig::default();
    ensure!(config.patience == 75 && config.lr_factor == 0.1, "defaults changed");
    let mut sched = PlateauScheduler::new(&config);
    let mut lrs = Vec::new();
    for _ in 0..300 {
        lrs.push(sched.lr());
        sched.observe(1.0);
    }
    // Epoch 1 sets the best; every later epoch is a plateau epoch.
    for (i, &lr) in lrs.iter().enumerate() {
        let epoch = i + 1;
        let drops = if epoch < 2 { 0 } else { (epoch - 2) / 75 };
        let expected = 1e-4 * 0.1f64.powi(drops as i32);
        ensure!(rel(lr, expected) < 1e-12, "epoch {epoch}: lr {lr} expected {expected}");
    }
    ensure!(lrs[75] == 1e-4 && rel(lrs[76], 1e-5) < 1e-12, "first drop misplaced");

    struct Flat(Vec<f64>);
    impl Trainable for Flat {
        fn train_epoch(&mut self, _: usize, lr: f64) -> Result<f64, eld_core::nets::NetsError> {
            self.0.push(lr);
            Ok(1.0)
        }
        fn val_loss(&mut self) -> Result<f64, eld_core::nets::NetsError> {
            Ok(1.0)
        }
        fn keep_best(&mut self, _: usize) -> Result<(), eld_core::nets::NetsError> {
            Ok(())
        }
    }
    let mut flat = Flat(Vec::new());
    let history = fit(&mut flat, &config, |_| {})?;
    ensure!(flat.0 == lrs, "fit used a different schedule");
    ensure!(history.epochs.iter().map(|e| e.lr).eq(lrs.iter().copied()), "history lr column");
    Ok("lr 1e-4 through epoch 76, 1e-5 from epoch 77".into())
}

fn best_checkpoint_is_val_argmin() -> Result<String> {
    struct Noisy {
        losses: Vec<f64>,
        epoch: usize,
        kept: Option<usize>,
    }
    impl Trainable for Noisy {
        fn train_epoch(&mut self, epoch: usize, _: f64) -> Result<f64, eld_core::nets::NetsError> {
            self.epoch = epoch;
            Ok(0.0)
        }
        fn val_loss(&mut self) -> Result<f64, eld_core::nets::NetsError> {
            Ok(self.losses[self.epoch - 1])
        }
        fn keep_best(&mut self, epoch: usize) -> Result<(), eld_core::nets::NetsError> {
            self.kept = Some(epoch);
            Ok(())
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let config = TrainConfig {
        epochs: 120,
        patience: 10,
        ..TrainConfig::default()
    };
    for trial in 0..50 {
        let losses: Vec<f64> = (0..config.epochs)
            .map(|e| 1.0 / (1.0 + e as f64 * 0.05) + rng.random_range(0.0..0.3))
            .collect();
        let argmin = losses
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i + 1)
            .unwrap();
        let mut t = Noisy {
            losses: losses.clone(),
            epoch: 0,
            kept: None,
        };
        let h = fit(&mut t, &config, |_| {})?;
        ensure!(h.best_epoch == argmin, "trial {trial}: best {} argmin {argmin}", h.best_epoch);
        ensure!(t.kept == Some(argmin), "trial {trial}: kept {:?}", t.kept);
        ensure!(h.best_val_loss == losses[argmin - 1], "trial {trial}: best loss");
    }
    Ok("50 random loss curves".into())
}

// ---------------------------------------------------------------- augmentation

fn augmentation_pixel_marker() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let (w, h) = (rng.random_range(180..320u32), rng.random_range(180..320u32));
        let mut img = RgbImage::from_pixel(w, h, MID_GRAY);
        let c = Point2::new((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
        let r = rng.random_range(0.0..70.0);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let (mx, my) = ((c.x + r * phi.cos()).round() as u32, (c.y + r * phi.sin()).round() as u32);
        img.put_pixel(mx, my, Rgb([255, 0, 0]));
        let marker = Point2::new(mx as f64, my as f64);
        let mut landmarks = vec![c; 48];
        landmarks[0] = marker;
        let sample = Sample {
            image: "marker.png".into(),
            width: w,
            height: h,
            bbox: BBox::new(c.x - 80.0, c.y - 80.0, c.x + 80.0, c.y + 80.0)?,
            landmarks,
            visible: None,
        };
        let angle = rng.random_range(-180.0..180.0);
        let config = AugmentConfig {
            probabilities: MethodProbabilities::only(Method::Rotation),
            rotation_deg: (angle, angle),
            ..AugmentConfig::default()
        };
        let out = augment(&sample, &img, &config, &mut worker_rng(11, i));
        ensure!(out.fired == [Method::Rotation], "fired {:?}", out.fired);
        let expected = out.sample.landmarks[0];
        let (bx, by, _) = out
            .image
            .enumerate_pixels()
            .map(|(x, y, p)| (x, y, p[0] as i32 - p[1] as i32))
            .max_by_key(|t| t.2)
            .unwrap();
        let err = (bx as f64 - expected.x).abs().max((by as f64 - expected.y).abs());
        ensure!(err <= 1.0, "angle {angle:.2}: marker at ({bx},{by}), label at {expected:?}");
        worst = worst.max(err);
    }
    Ok(format!("100 angles, max offset {worst:.2} px"))
}

fn desk_scale_overfit() -> Result<String> {
    let start = Instant::now();
    let dir = tempfile::tempdir()?;
    let m = synth_generate(20, 2024, &dir.path().join("data"))?;
    let epochs = 200;
    let run = dir.path().join("run");
    train_all(&m, &m, &catflw48(), &tiny_options(epochs, (epochs / 3).max(1)), &run, |_, _| {})?;
    let set = CheckpointSet::load(&run)?;
    let report = evaluate(&set, &m, Mode::Detector)?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(report.n_fail == 0, "{} failures", report.n_fail);
    ensure!(report.nme_percent < 5.0, "training NME {:.2}%", report.nme_percent);
    ensure!(secs < 900.0, "took {secs:.0}s");
    Ok(format!("training NME {:.2}% over 20 images", report.nme_percent))
}

// ---------------------------------------------------------------- annotation

struct NoTrainer;

impl Trainer for NoTrainer {
    fn train(&self, _: &Manifest, _: &Path) -> Result<Arc<dyn PrefillSource>, String> {
        Err("training disabled".into())
    }
}

struct OraclePrefill;

impl PrefillSource for OraclePrefill {
    fn prefill(&self, sample: &Sample, image: &RgbImage) -> Result<Vec<Point2>, String> {
        oracle_predict(image, sample).map_err(|e| e.to_string())
    }
}

struct OracleResolver;

impl SourceResolver for OracleResolver {
    fn resolve(&self, run: &str) -> Result<Arc<dyn PrefillSource>, String> {
        match run {
            "oracle" => Ok(Arc::new(OraclePrefill)),
            other => Err(format!("unknown run {other}")),
        }
    }
}

struct Service {
    dir: tempfile::TempDir,
    base: String,
    client: Client,
}

impl Service {
    async fn start(build: impl FnOnce(&Path) -> Annotator) -> Result<Self> {
        let dir = tempfile::tempdir()?;
        let app = Arc::new(build(&dir.path().join("data")));
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
        let base = format!("http://{}", listener.local_addr()?);
        tokio::spawn(serve_on(listener, app));
        Ok(Self {
            dir,
            base,
            client: Client::new(),
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn synth(&self, name: &str, n: usize, seed: u64) -> Result<(PathBuf, HashMap<String, Sample>)> {
        let out = self.dir.path().join(name);
        let m = synth_generate(n, seed, &out)?;
        let gt = m
            .samples
            .iter()
            .map(|s| Ok((std::path::absolute(m.image_path(s))?.to_string_lossy().into_owned(), s.clone())))
            .collect::<Result<_>>()?;
        Ok((out.join("manifest.json"), gt))
    }

    async fn enqueue(&self, manifest: &Path, run: Option<&str>) -> Result<i64> {
        let mut body = json!({ "manifest_path": manifest });
        if let Some(r) = run {
            body["checkpoint_run"] = json!(r);
        }
        let r = self.client.post(self.url("/batches")).json(&body).send().await?;
        ensure!(r.status() == StatusCode::OK, "enqueue: {}", r.status());
        r.json::<Value>().await?["batch_id"].as_i64().context("batch_id")
    }

    async fn next(&self, annotator: &str) -> Result<Option<TaskView>> {
        let r = self
            .client
            .get(self.url(&format!("/tasks/next?annotator={annotator}")))
            .send()
            .await?;
        match r.status() {
            StatusCode::NO_CONTENT => Ok(None),
            StatusCode::OK => Ok(Some(r.json().await?)),
            s => bail!("next task: {s}"),
        }
    }

    async fn submit(&self, task: i64, landmarks: &[Point2], seconds: f64) -> Result<CorrectionRecord> {
        let started = parse_ts("2024-06-01T12:00:00Z").context("timestamp")?;
        let finished = started + chrono::Duration::microseconds((seconds * 1e6).round() as i64);
        let body = json!({
            "landmarks": landmarks,
            "annotator": "ann",
            "started_at": started.to_rfc3339(),
            "finished_at": finished.to_rfc3339(),
        });
        let r = self
            .client
            .post(self.url(&format!("/tasks/{task}/correction")))
            .json(&body)
            .send()
            .await?;
        ensure!(r.status() == StatusCode::OK, "submit {task}: {}", r.status());
        Ok(r.json().await?)
    }

    async fn get<T: serde::de::DeserializeOwned>(&self, path: &str) -> Result<T> {
        let r = self.client.get(self.url(path)).send().await?;
        ensure!(r.status() == StatusCode::OK, "GET {path}: {}", r.status());
        Ok(r.json().await?)
    }

    async fn retrain(&self, pool: &[i64]) -> Result<Value> {
        let r = self.client.post(self.url("/retrain")).json(&json!({ "pool": pool })).send().await?;
        ensure!(r.status() == StatusCode::OK, "retrain: {}", r.status());
        let id = r.json::<Value>().await?["run_id"].as_i64().context("run_id")?;
        let deadline = Instant::now() + Duration::from_secs(600);
        loop {
            let run: Value = self.get(&format!("/runs/{id}")).await?;
            if run["status"] != "running" {
                ensure!(run["status"] == "done", "run {id}: {run}");
                return Ok(run);
            }
            ensure!(Instant::now() < deadline, "run {id} did not finish");
            tokio::time::sleep(Duration::from_millis(100)).await;
        }
    }
}

fn runtime<T>(fut: impl std::future::Future<Output = Result<T>>) -> Result<T> {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()?
        .block_on(fut)
}

fn annotation_exactly_once_claiming() -> Result<String> {
    runtime(async {
        let svc = Service::start(|d| Annotator::open(AnnotatorConfig::new(d), Arc::new(NoTrainer)).unwrap()).await?;
        let (path, _) = svc.synth("d", 40, 1)?;
        svc.enqueue(&path, None).await?;
        let svc = Arc::new(svc);
        let mut joins = Vec::new();
        for p in 0..10 {
            let svc = svc.clone();
            joins.push(tokio::spawn(async move {
                let name = format!("poller{p}");
                let mut got = Vec::new();
                while let Some(t) = svc.next(&name).await? {
                    ensure!(t.annotator.as_deref() == Some(name.as_str()), "task {} owner", t.task_id);
                    got.push(t.task_id);
                }
                Ok(got)
            }));
        }
        let mut all = Vec::new();
        for j in joins {
            all.extend(j.await??);
        }
        let distinct: BTreeSet<i64> = all.iter().copied().collect();
        ensure!(all.len() == 40 && distinct.len() == 40, "{} claims, {} distinct", all.len(), distinct.len());
        ensure!(svc.next("late").await?.is_none(), "queue not drained");
        Ok("40 tasks, 10 pollers, each claimed once".into())
    })
}

fn annotation_shift_flags_and_metrics() -> Result<String> {
    runtime(async {
        let svc = Service::start(|d| {
            Annotator::open(AnnotatorConfig::new(d), Arc::new(NoTrainer))
                .unwrap()
                .with_resolver(Arc::new(OracleResolver))
        })
        .await?;
        let (path, _) = svc.synth("d", 9, 8)?;
        let b = svc.enqueue(&path, Some("oracle")).await?;
        let times = [12.0, 31.5, 8.25, 44.0, 19.0, 27.75, 60.0];
        let mut ids = Vec::new();
        for (i, &secs) in times.iter().enumerate() {
            let t = svc.next("ann").await?.context("task")?;
            let mut lm = t.prefill.clone();
            for j in 0..2 * i {
                lm[(j * 11 + i) % 48].x += 0.75;
            }
            svc.submit(t.task_id, &lm, secs).await?;
            ids.push(t.task_id);
        }

        let m: BatchMetrics = svc.get(&format!("/batches/{b}/metrics")).await?;
        ensure!(m.n_tasks == 9 && m.n_done == 7, "counts {}/{}", m.n_done, m.n_tasks);
        let mut secs = Vec::new();
        let mut kept = [0usize; 48];
        for id in &ids {
            let task: TaskView = svc.get(&format!("/tasks/{id}")).await?;
            let all: Vec<CorrectionRecord> = svc.get(&format!("/tasks/{id}/corrections")).await?;
            let c = all.last().context("no correction")?;
            let elapsed = parse_ts(&c.finished_at).context("finished_at")?
                - parse_ts(&c.started_at).context("started_at")?;
            secs.push(elapsed.num_microseconds().context("duration")? as f64 / 1e6);
            for j in 0..48 {
                let moved = task.prefill[j].x != c.landmarks[j].x || task.prefill[j].y != c.landmarks[j].y;
                ensure!(c.shifted[j] == moved, "task {id} landmark {j} flag");
                kept[j] += usize::from(!moved);
            }
        }
        ensure!(m.seconds == secs, "times {:?} vs {secs:?}", m.seconds);
        let mut sorted = secs.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let got = m.time.as_ref().context("time summary")?.median;
        ensure!(got == median, "median {got} vs {median}");
        for j in 0..48 {
            let want = 100.0 * kept[j] as f64 / ids.len() as f64;
            ensure!((m.unshifted_percent[j] - want).abs() < 1e-12, "landmark {j}: {}", m.unshifted_percent[j]);
        }
        Ok(format!("7 corrections, median {median}s"))
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Claims and corrects every pending task; every fourth landmark is nudged.
async fn annotate_all(svc: &Service, gt: &HashMap<String, Sample>) -> Result<Vec<Sample>> {
    let mut done = Vec::new();
    while let Some(t) = svc.next("ann").await? {
        let s = gt.get(&t.image).context("unknown image")?;
        let lm: Vec<Point2> = s
            .landmarks
            .iter()
            .enumerate()
            .map(|(i, p)| if i % 4 == 0 { Point2::new(p.x, p.y - 0.5) } else { *p })
            .collect();
        svc.submit(t.task_id, &lm, 3.0).await?;
        done.push((
            t.task_id,
            Sample {
                image: t.image.clone(),
                landmarks: lm,
                ..s.clone()
            },
        ));
    }
    done.sort_by_key(|(id, _)| *id);
    Ok(done.into_iter().map(|(_, s)| s).collect())
}

fn annotation_two_retrain_protocol() -> Result<String> {
    runtime(async {
        let options = tiny_options(2, 1);
        let svc = Service::start(move |d| {
            Annotator::open(AnnotatorConfig::new(d), Arc::new(CascadeTrainer { options, seed: 0 })).unwrap()
        })
        .await?;
        let (p1, mut gt) = svc.synth("b1", 4, 21)?;
        let (p2, gt2) = svc.synth("b2", 4, 22)?;
        gt.extend(gt2);

        let b1 = svc.enqueue(&p1, None).await?;
        let pool1 = annotate_all(&svc, &gt).await?;
        let v1 = svc.retrain(&[b1]).await?;
        let b2 = svc.enqueue(&p2, None).await?;
        let first: TaskView = svc.get("/tasks/5").await?;
        ensure!(first.batch_id == b2, "task 5 in batch {}", first.batch_id);
        ensure!(
            first.prefill.len() == 48 || first.prefill_warning.is_some(),
            "batch 2 not prefilled by v1"
        );
        let pool2 = annotate_all(&svc, &gt).await?;
        let v2 = svc.retrain(&[b1, b2]).await?;

        let expect1 = Manifest::new("catflw48", pool1.clone());
        let expect2 = Manifest::new("catflw48", pool1.into_iter().chain(pool2).collect());
        ensure!(v1["pool"] == json!([b1]) && v2["pool"] == json!([b1, b2]), "pools {} {}", v1["pool"], v2["pool"]);
        ensure!(v1["n_samples"] == 4 && v2["n_samples"] == 8, "sizes");
        ensure!(v1["snapshot_hash"] == sha256_hex(expect1.to_json().as_bytes()), "v1 hash");
        ensure!(v2["snapshot_hash"] == sha256_hex(expect2.to_json().as_bytes()), "v2 hash");
        ensure!(v1["snapshot_hash"] != v2["snapshot_hash"], "hashes coincide");
        ensure!(v1["out_dir"] != v2["out_dir"], "shared run directory");
        for run in [&v1, &v2] {
            let dir = PathBuf::from(run["out_dir"].as_str().context("out_dir")?);
            let bytes = std::fs::read(dir.join("pool.json"))?;
            ensure!(sha256_hex(&bytes) == run["snapshot_hash"], "pool.json hash in {}", dir.display());
            ensure!(dir.join("face").join("model.safetensors").exists(), "no checkpoint in {}", dir.display());
        }
        Ok("v1 on batch 1, v2 on batches 1+2, snapshots match corrected pools".into())
    })
}
