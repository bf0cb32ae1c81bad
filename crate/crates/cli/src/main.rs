use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use eld_core::cascade::{CascadeConfig, FaceResize};
use eld_core::dataset::AugmentConfig;
use eld_core::evaluation::Mode;
use eld_core::nets::{RunOptions, TrainConfig, TINY_CONV};
use serde::Serialize;

mod commands;
mod config;
mod provenance;

#[derive(Debug, Parser, Serialize)]
#[command(name = "eld", version, about = "Cat facial landmark detection: data, training, inference, evaluation, annotation")]
struct Cli {
    /// TOML file supplying default values for any flag
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Report errors as JSON on stderr
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads for data loading, training and inference
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
enum Command {
    /// Render procedural cat faces with a manifest
    Synth(SynthArgs),
    /// Check a manifest against its schema
    Validate(ValidateArgs),
    /// Seeded train/val/test split of a manifest
    Split(SplitArgs),
    /// Train the cascade models
    Train(TrainArgs),
    /// Predict landmarks for one image
    Predict(PredictArgs),
    /// NME report of a trained run on a manifest
    Evaluate(EvaluateArgs),
    /// Ablation studies
    #[command(subcommand)]
    Ablate(AblateCommand),
    /// Model-assisted annotation service
    #[command(subcommand)]
    Annotate(AnnotateCommand),
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ValidateArgs {
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct SplitArgs {
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Train, validation and test shares
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.75, 0.15, 0.10])]
    ratios: Vec<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum FaceResizeArg {
    Letterbox,
    Stretch,
}

/// Hyperparameters shared by every command that trains.
#[derive(Debug, Args, Serialize)]
struct TrainFlags {
    #[arg(long, default_value = TINY_CONV)]
    extractor: String,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Epochs without validation improvement before the learning rate drops
    #[arg(long, default_value_t = 75)]
    patience: usize,
    #[arg(long, default_value_t = 0.1)]
    lr_factor: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Uniform jitter of teacher region centers, in face pixels
    #[arg(long, default_value_t = 8.0)]
    jitter: f64,
    /// Train on original images only
    #[arg(long)]
    no_augment: bool,
    #[arg(long, value_enum, default_value_t = FaceResizeArg::Letterbox)]
    face_resize: FaceResizeArg,
}

impl TrainFlags {
    fn options(&self, stages: Option<Vec<String>>) -> RunOptions {
        RunOptions {
            extractor: self.extractor.clone(),
            train: TrainConfig {
                epochs: self.epochs,
                learning_rate: self.lr,
                batch_size: self.batch_size,
                patience: self.patience,
                lr_factor: self.lr_factor,
                seed: self.seed,
                center_jitter_px: self.jitter,
                augment: (!self.no_augment).then(AugmentConfig::default),
                ..TrainConfig::default()
            },
            cascade: CascadeConfig {
                face_resize: match self.face_resize {
                    FaceResizeArg::Letterbox => FaceResize::Letterbox,
                    FaceResizeArg::Stretch => FaceResize::Stretch,
                },
                ..CascadeConfig::default()
            },
            stages,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// Directory holding train.json and val.json
    #[arg(long, value_name = "DIR")]
    manifest_dir: PathBuf,
    #[arg(long, value_name = "RUN")]
    out: PathBuf,
    /// face, centers, a region name, or all
    #[arg(long, value_delimiter = ',', default_value = "all")]
    stage: Vec<String>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args, Serialize)]
struct PredictArgs {
    #[arg(long, value_name = "FILE")]
    image: PathBuf,
    #[arg(long, value_name = "RUN")]
    run: PathBuf,
    /// Face box x1,y1,x2,y2 replacing the face model
    #[arg(long, value_name = "BOX")]
    bbox: Option<String>,
    /// Output JSON; stdout when absent
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    #[arg(long, value_name = "RUN")]
    run: PathBuf,
    /// Split directory; its test.json is evaluated
    #[arg(long, value_name = "DIR", conflicts_with = "manifest", required_unless_present = "manifest")]
    manifest_dir: Option<PathBuf>,
    /// Evaluate this manifest instead
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "detector")]
    mode: Mode,
    /// JSON report; a CSV with per-image NME is written next to it
    #[arg(long, value_name = "FILE")]
    report: PathBuf,
}

#[derive(Debug, Subcommand, Serialize)]
enum AblateCommand {
    /// Retrain selected regions at other crop fractions
    Regions(AblateRegionsArgs),
    /// Retrain on nested subsets of the training split
    Datasize(AblateDatasizeArgs),
}

#[derive(Debug, Args, Serialize)]
struct AblateRegionsArgs {
    /// e.g. "eyes=1/2,1/3;ears=1/2,1/3"
    #[arg(long)]
    grid: String,
    /// Run whose other stages are reused
    #[arg(long, value_name = "RUN")]
    run: PathBuf,
    #[arg(long, value_name = "DIR")]
    manifest_dir: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value = "detector")]
    mode: Mode,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args, Serialize)]
struct AblateDatasizeArgs {
    /// Training-set sizes, e.g. 100,200,400
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    #[arg(long, value_name = "DIR")]
    manifest_dir: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value = "detector")]
    mode: Mode,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Subcommand, Serialize)]
enum AnnotateCommand {
    /// Run the HTTP service
    Serve(ServeArgs),
}

#[derive(Debug, Args, Serialize)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, value_name = "DIR")]
    data_dir: PathBuf,
    /// Run used to prefill batches that name no checkpoints
    #[arg(long, value_name = "RUN")]
    checkpoints: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    lease_minutes: i64,
    #[command(flatten)]
    train: TrainFlags,
}

/// Bad invocation: unknown flags, missing inputs. Exits with 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn fail(json: bool, code: u8, message: &str) -> ExitCode {
    if json {
        let kind = if code == 2 { "usage" } else { "operational" };
        eprintln!("{}", serde_json::json!({ "error": message, "kind": kind, "exit_code": code }));
    } else {
        eprintln!("error: {message}");
    }
    ExitCode::from(code)
}

fn with_config(raw: Vec<String>) -> Result<Vec<String>> {
    let Some(path) = config::config_path(&raw) else {
        return Ok(raw);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| usage(format!("config file {path}: {e}")))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| usage(format!("config file {path}: {e}")))?;
    config::overlay(raw, &table, &Cli::command()).map_err(|e| usage(format!("config file {path}: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let raw: Vec<String> = std::env::args().collect();
    let raw_json = raw.iter().any(|a| a == "--json");
    let args = match with_config(raw) {
        Ok(a) => a,
        Err(e) => return fail(raw_json, 2, &format!("{e:#}")),
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let json = raw_json || args.iter().any(|a| a == "--json");
            if json {
                return fail(true, 2, e.to_string().trim());
            }
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            return fail(cli.json, 1, &e.to_string());
        }
    }
    match run(&cli, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if e.downcast_ref::<UsageError>().is_some() { 2 } else { 1 };
            fail(cli.json, code, &format!("{e:#}"))
        }
    }
}

fn run(cli: &Cli, argv: &[String]) -> Result<()> {
    let resolved = serde_json::to_value(cli).context("serializing configuration")?;
    log::info!("resolved configuration: {resolved}");
    let ctx = commands::Context { argv, resolved: &resolved };
    match &cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Validate(a) => commands::validate(a),
        Command::Split(a) => commands::split(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Predict(a) => commands::predict(&ctx, a),
        Command::Evaluate(a) => commands::evaluate(&ctx, a),
        Command::Ablate(AblateCommand::Regions(a)) => commands::ablate_regions(&ctx, a),
        Command::Ablate(AblateCommand::Datasize(a)) => commands::ablate_datasize(&ctx, a),
        Command::Annotate(AnnotateCommand::Serve(a)) => commands::serve(a),
    }
}
