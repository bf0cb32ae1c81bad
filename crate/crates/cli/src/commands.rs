use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context as _, Result};
use eld_annotate::{Annotator, AnnotatorConfig, CascadeTrainer, CheckpointPrefill};
use eld_core::cascade::{predict as run_cascade, predict_with_bbox, CheckpointSet};
use eld_core::dataset::{self, load_rgb, Manifest};
use eld_core::evaluation::{self, ablation, AblationData};
use eld_core::geometry::BBox;
use eld_core::nets::train_all;

use crate::provenance::{self, Provenance};
use crate::{
    usage, AblateDatasizeArgs, AblateRegionsArgs, EvaluateArgs, PredictArgs, ServeArgs, SplitArgs, SynthArgs,
    TrainArgs, ValidateArgs,
};

pub const TRAIN_FILE: &str = "train.json";
pub const VAL_FILE: &str = "val.json";
pub const TEST_FILE: &str = "test.json";

pub struct Context<'a> {
    pub argv: &'a [String],
    pub resolved: &'a serde_json::Value,
}

impl Context<'_> {
    fn record(&self, artifact: &Path, seed: Option<u64>, inputs: &[&Path]) -> Result<()> {
        let command = self.resolved["command"]
            .as_object()
            .and_then(|o| o.keys().next().cloned())
            .unwrap_or_default()
            .to_lowercase();
        let record = Provenance {
            tool: "eld",
            version: env!("CARGO_PKG_VERSION"),
            command: &command,
            argv: self.argv,
            config: self.resolved,
            seed,
            inputs: provenance::hash_inputs(inputs)?,
            created_at: chrono::Utc::now().to_rfc3339(),
        };
        let path = provenance::write(artifact, &record)?;
        log::info!("provenance written to {}", path.display());
        Ok(())
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(usage(format!("{what} directory {} does not exist", path.display())));
    }
    Ok(())
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    require_file(path, "manifest")?;
    Manifest::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load_run(run: &Path) -> Result<CheckpointSet> {
    require_dir(run, "run")?;
    CheckpointSet::load(run).with_context(|| format!("loading run {}", run.display()))
}

fn split_files(dir: &Path, names: &[&str]) -> Result<Vec<PathBuf>> {
    require_dir(dir, "manifest")?;
    names
        .iter()
        .map(|n| {
            let p = dir.join(n);
            require_file(&p, "manifest")?;
            Ok(p)
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn parse_bbox(text: &str) -> Result<BBox> {
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| usage(format!("--bbox expects x1,y1,x2,y2, got {text:?}")))?;
    let [x1, y1, x2, y2] = v[..] else {
        return Err(usage(format!("--bbox expects four numbers, got {}", v.len())));
    };
    BBox::new(x1, y1, x2, y2).map_err(|e| usage(format!("--bbox: {e}")))
}

pub fn synth(ctx: &Context<'_>, a: &SynthArgs) -> Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be positive"));
    }
    let m = dataset::synth::synth_generate(a.n, a.seed, &a.out)?;
    let manifest_path = a.out.join("manifest.json");
    ctx.record(&a.out, Some(a.seed), &[])?;
    println!("{}", serde_json::json!({ "manifest": manifest_path, "n": m.len() }));
    Ok(())
}

pub fn validate(a: &ValidateArgs) -> Result<()> {
    let m = load_manifest(&a.manifest)?;
    let missing = m.missing_images();
    let summary = serde_json::json!({
        "manifest": a.manifest,
        "schema": m.schema,
        "n_samples": m.len(),
        "missing_images": missing,
    });
    println!("{summary}");
    if !missing.is_empty() {
        bail!("{} image(s) missing", missing.len());
    }
    Ok(())
}

pub fn split(ctx: &Context<'_>, a: &SplitArgs) -> Result<()> {
    let ratios: [f64; 3] = a.ratios[..]
        .try_into()
        .map_err(|_| usage("--ratios takes three values"))?;
    let m = load_manifest(&a.manifest)?;
    let s = dataset::split(&m, ratios, a.seed).map_err(|e| usage(e.to_string()))?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (name, part) in [(TRAIN_FILE, &s.train), (VAL_FILE, &s.val), (TEST_FILE, &s.test)] {
        part.rebased(&a.out).save(&a.out.join(name))?;
    }
    ctx.record(&a.out, Some(a.seed), &[&a.manifest])?;
    println!(
        "{}",
        serde_json::json!({ "train": s.train.len(), "val": s.val.len(), "test": s.test.len() })
    );
    Ok(())
}

pub fn train(ctx: &Context<'_>, a: &TrainArgs) -> Result<()> {
    let files = split_files(&a.manifest_dir, &[TRAIN_FILE, VAL_FILE])?;
    let train = load_manifest(&files[0])?;
    let val = load_manifest(&files[1])?;
    let schema = train.resolve_schema()?;
    let stages = if a.stage.iter().any(|s| s == "all") {
        None
    } else {
        Some(a.stage.clone())
    };
    let options = a.train.options(stages);
    let summary = train_all(&train, &val, &schema, &options, &a.out, |stage, r| {
        log::debug!(
            "{stage} epoch {} train {:.6} val {:.6} lr {:.1e}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.lr
        );
    })?;
    for s in &summary.stages {
        log::info!(
            "{}: best epoch {} of {}, val loss {:.6}, {:.1}s",
            s.name,
            s.best_epoch,
            s.epochs,
            s.best_val_loss,
            s.seconds
        );
    }
    ctx.record(&a.out, Some(a.train.seed), &[&files[0], &files[1]])?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

pub fn predict(ctx: &Context<'_>, a: &PredictArgs) -> Result<()> {
    require_file(&a.image, "image")?;
    let set = load_run(&a.run)?;
    let bbox = a.bbox.as_deref().map(parse_bbox).transpose()?;
    let image = load_rgb(&a.image)?;
    let p = match bbox {
        Some(b) => predict_with_bbox(&image, &b, &set)?,
        None => run_cascade(&image, &set)?,
    };
    match &a.out {
        Some(out) => {
            write_text(out, &p.to_json())?;
            ctx.record(out, None, &[&a.image, &a.run])?;
        }
        None => print!("{}", p.to_json()),
    }
    Ok(())
}

pub fn evaluate(ctx: &Context<'_>, a: &EvaluateArgs) -> Result<()> {
    let manifest_path = match (&a.manifest, &a.manifest_dir) {
        (Some(m), _) => m.clone(),
        (None, Some(d)) => split_files(d, &[TEST_FILE])?.remove(0),
        (None, None) => return Err(usage("give --manifest-dir or --manifest")),
    };
    let set = load_run(&a.run)?;
    let m = load_manifest(&manifest_path)?;
    let report = evaluation::evaluate(&set, &m, a.mode)?;
    write_text(&a.report, &report.to_json())?;
    write_text(&a.report.with_extension("csv"), &report.to_csv())?;
    ctx.record(&a.report, None, &[&manifest_path, &a.run])?;
    println!(
        "{}",
        serde_json::json!({
            "nme_percent": report.nme_percent,
            "n_evaluated": report.n_evaluated,
            "n_fail": report.n_fail,
        })
    );
    Ok(())
}

struct Splits {
    paths: Vec<PathBuf>,
    train: Manifest,
    val: Manifest,
    test: Manifest,
}

fn load_splits(dir: &Path) -> Result<Splits> {
    let paths = split_files(dir, &[TRAIN_FILE, VAL_FILE, TEST_FILE])?;
    Ok(Splits {
        train: load_manifest(&paths[0])?,
        val: load_manifest(&paths[1])?,
        test: load_manifest(&paths[2])?,
        paths,
    })
}

pub fn ablate_regions(ctx: &Context<'_>, a: &AblateRegionsArgs) -> Result<()> {
    let grid = ablation::parse_grid(&a.grid).map_err(|e| usage(format!("--grid: {e}")))?;
    require_dir(&a.run, "run")?;
    let s = load_splits(&a.manifest_dir)?;
    let data = AblationData {
        train: &s.train,
        val: &s.val,
        test: &s.test,
    };
    let rows = ablation::ablate_regions(&a.run, &data, &grid, &a.train.options(None), a.mode, &a.out)?;
    let csv = ablation::rows_to_csv(&rows);
    write_text(&a.out.join("ablation.csv"), &csv)?;
    let mut inputs: Vec<&Path> = s.paths.iter().map(PathBuf::as_path).collect();
    inputs.push(&a.run);
    ctx.record(&a.out, Some(a.train.seed), &inputs)?;
    print!("{csv}");
    Ok(())
}

pub fn ablate_datasize(ctx: &Context<'_>, a: &AblateDatasizeArgs) -> Result<()> {
    let s = load_splits(&a.manifest_dir)?;
    if let Some(bad) = a.sizes.iter().find(|&&n| n == 0 || n > s.train.len()) {
        return Err(usage(format!("--sizes: {bad} outside 1..={}", s.train.len())));
    }
    let data = AblationData {
        train: &s.train,
        val: &s.val,
        test: &s.test,
    };
    let schema = s.train.resolve_schema()?;
    let rows = ablation::data_size_curve(
        &data,
        &schema,
        &a.sizes,
        &a.train.options(None),
        a.train.seed,
        a.mode,
        &a.out,
    )?;
    let csv = ablation::rows_to_csv(&rows);
    write_text(&a.out.join("datasize.csv"), &csv)?;
    let inputs: Vec<&Path> = s.paths.iter().map(PathBuf::as_path).collect();
    ctx.record(&a.out, Some(a.train.seed), &inputs)?;
    print!("{csv}");
    Ok(())
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    if a.lease_minutes <= 0 {
        return Err(usage("--lease-minutes must be positive"));
    }
    let mut config = AnnotatorConfig::new(&a.data_dir);
    config.lease = chrono::Duration::minutes(a.lease_minutes);
    let trainer = CascadeTrainer {
        options: a.train.options(None),
        seed: a.train.seed,
    };
    let mut app = Annotator::open(config, Arc::new(trainer))?;
    if let Some(run) = &a.checkpoints {
        app = app.with_default_source(Arc::new(CheckpointPrefill(load_run(run)?)));
    }
    let addr: std::net::SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| usage(format!("--host/--port: {e}")))?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting runtime")?;
    rt.block_on(eld_annotate::serve(addr, Arc::new(app)))
        .with_context(|| format!("serving on {addr}"))
}
