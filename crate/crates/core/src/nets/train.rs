use std::io::Write as _;
use std::path::Path;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{CoordinateModel, Snapshot};
use super::NetsError;
use crate::dataset::AugmentConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub lr_factor: f64,
    /// Minimum decrease of the validation loss that counts as improvement.
    pub min_delta: f64,
    pub seed: u64,
    /// Half-width of the uniform jitter applied to GT region centers, in
    /// pixels on the 224 face.
    pub center_jitter_px: f64,
    /// `None` trains on the original images only.
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 1e-4,
            batch_size: 16,
            patience: 75,
            lr_factor: 0.1,
            min_delta: 1e-8,
            seed: 0,
            center_jitter_px: 8.0,
            augment: Some(AugmentConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetsError> {
        let bad = |m: &str| Err(NetsError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return bad("epochs, batch_size and patience must be positive");
        }
        if self.patience >= self.epochs {
            return bad("patience must be smaller than epochs");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad("lr_factor must lie in (0, 1)");
        }
        if !self.min_delta.ge(&0.0) || !self.center_jitter_px.ge(&0.0) {
            return bad("min_delta and center_jitter_px must be non-negative");
        }
        if let Some(a) = &self.augment {
            a.validate().map_err(NetsError::Config)?;
        }
        Ok(())
    }
}

/// Reduce-on-plateau learning-rate schedule.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    min_delta: f64,
    best: f64,
    wait: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub improved: bool,
    pub dropped: bool,
    /// Learning rate for the next epoch.
    pub next_lr: f64,
}

impl PlateauScheduler {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            lr: config.learning_rate,
            factor: config.lr_factor,
            patience: config.patience,
            min_delta: config.min_delta,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records one epoch's validation loss.
    pub fn observe(&mut self, val_loss: f64) -> Observation {
        let improved = val_loss < self.best - self.min_delta;
        let mut dropped = false;
        if improved {
            self.best = val_loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                self.lr *= self.factor;
                self.wait = 0;
                dropped = true;
            }
        }
        Observation {
            improved,
            dropped,
            next_lr: self.lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.lr));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), NetsError> {
        let mut f = std::fs::File::create(path).map_err(|e| NetsError::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| NetsError::io(path, e))
    }
}

/// What [`fit`] drives: one training pass, one validation pass, and keeping
/// the current parameters as the best so far.
pub trait Trainable {
    fn train_epoch(&mut self, epoch: usize, lr: f64) -> Result<f64, NetsError>;
    fn val_loss(&mut self) -> Result<f64, NetsError>;
    fn keep_best(&mut self, epoch: usize) -> Result<(), NetsError>;
}

fn finite(epoch: usize, which: &'static str, value: f64) -> Result<f64, NetsError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(NetsError::NonFinite { epoch, which, value })
    }
}

/// Epoch loop with the plateau schedule and best-validation checkpointing.
pub fn fit(
    target: &mut impl Trainable,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History, NetsError> {
    config.validate()?;
    let mut sched = PlateauScheduler::new(config);
    let mut history = History::default();
    for epoch in 1..=config.epochs {
        let lr = sched.lr();
        let train_loss = finite(epoch, "train", target.train_epoch(epoch, lr)?)?;
        let val_loss = finite(epoch, "validation", target.val_loss()?)?;
        if sched.observe(val_loss).improved {
            target.keep_best(epoch)?;
            history.best_epoch = epoch;
            history.best_val_loss = val_loss;
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        };
        on_epoch(&rec);
        history.epochs.push(rec);
    }
    Ok(history)
}

/// A model input with its normalized regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub image: RgbImage,
    pub target: Vec<f64>,
}

struct StageTrainer<'a, R: Rng> {
    model: &'a CoordinateModel,
    opt: AdamW,
    train: &'a [TrainPair],
    val: &'a [TrainPair],
    batch_size: usize,
    rng: &'a mut R,
    best: Option<Snapshot>,
}

fn targets_tensor(model: &CoordinateModel, pairs: &[&TrainPair]) -> Result<Tensor, NetsError> {
    let out = model.out_dim();
    let mut data = Vec::with_capacity(pairs.len() * out);
    for p in pairs {
        if p.target.len() != out {
            return Err(NetsError::TargetSize {
                expected: out,
                found: p.target.len(),
            });
        }
        data.extend_from_slice(&p.target);
    }
    Ok(Tensor::from_vec(data, (pairs.len(), out), model.device())?.to_dtype(model.dtype())?)
}

/// Mean squared error between the model output and the targets.
pub fn batch_loss(model: &CoordinateModel, pairs: &[&TrainPair]) -> Result<Tensor, NetsError> {
    let x = model.batch(pairs.iter().map(|p| &p.image))?;
    let y = targets_tensor(model, pairs)?;
    Ok(candle_nn::loss::mse(&model.forward(&x)?, &y)?)
}

impl<R: Rng> Trainable for StageTrainer<'_, R> {
    fn train_epoch(&mut self, _epoch: usize, lr: f64) -> Result<f64, NetsError> {
        self.opt.set_learning_rate(lr);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(self.rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.batch_size) {
            let pairs: Vec<&TrainPair> = chunk.iter().map(|&i| &self.train[i]).collect();
            let loss = batch_loss(self.model, &pairs)?;
            total += loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
            self.opt.backward_step(&loss)?;
        }
        Ok(total / self.train.len() as f64)
    }

    fn val_loss(&mut self) -> Result<f64, NetsError> {
        let mut total = 0.0;
        for chunk in self.val.chunks(self.batch_size.max(16)) {
            let pairs: Vec<&TrainPair> = chunk.iter().collect();
            let loss = batch_loss(self.model, &pairs)?.detach();
            total += loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
        }
        Ok(total / self.val.len() as f64)
    }

    fn keep_best(&mut self, _epoch: usize) -> Result<(), NetsError> {
        self.best = Some(self.model.snapshot()?);
        Ok(())
    }
}

/// Trains `model` in place and leaves it holding the parameters with the
/// lowest validation loss.
pub fn train_stage(
    model: &CoordinateModel,
    train: &[TrainPair],
    val: &[TrainPair],
    config: &TrainConfig,
    rng: &mut impl Rng,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<History, NetsError> {
    if train.is_empty() || val.is_empty() {
        return Err(NetsError::Config("train and validation sets must be non-empty".into()));
    }
    let params = ParamsAdamW {
        lr: config.learning_rate,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-7,
        weight_decay: 0.0,
    };
    let opt = AdamW::new(model.vars(), params)?;
    let mut trainer = StageTrainer {
        model,
        opt,
        train,
        val,
        batch_size: config.batch_size,
        rng,
        best: None,
    };
    let history = fit(&mut trainer, config, on_epoch)?;
    if let Some(best) = &trainer.best {
        model.restore(best)?;
    }
    Ok(history)
}
