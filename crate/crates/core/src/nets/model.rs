use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{Linear, Module, VarBuilder, VarMap};
use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::extractor::{build_extractor, FeatureExtractor};
use super::{NetsError, Regressor, StageInput};
use crate::dataset::worker_rng;
use crate::MODEL_SIDE;

pub const HEAD_WIDTHS: [usize; 2] = [128, 64];

/// Three dense layers: F → 128 → ReLU → 64 → ReLU → OUT (linear).
pub struct RegressionHead {
    fc1: Linear,
    fc2: Linear,
    out: Linear,
}

impl RegressionHead {
    pub fn new(features: usize, out: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            fc1: candle_nn::linear(features, HEAD_WIDTHS[0], vb.pp("fc1"))?,
            fc2: candle_nn::linear(HEAD_WIDTHS[0], HEAD_WIDTHS[1], vb.pp("fc2"))?,
            out: candle_nn::linear(HEAD_WIDTHS[1], out, vb.pp("out"))?,
        })
    }

    /// Parameter count for feature dimension `f` and output size `out`.
    pub fn param_count(f: usize, out: usize) -> usize {
        f * 128 + 128 + 128 * 64 + 64 + 64 * out + out
    }
}

impl Module for RegressionHead {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.fc1.forward(xs)?.relu()?;
        let h = self.fc2.forward(&h)?.relu()?;
        self.out.forward(&h)
    }
}

/// Stored beside the parameters so a checkpoint can be rebuilt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub extractor: String,
    pub feature_dim: usize,
    pub out_dim: usize,
}

/// Extractor plus head; outputs coordinates normalized by the input side.
pub struct CoordinateModel {
    spec: ModelSpec,
    varmap: VarMap,
    extractor: Box<dyn FeatureExtractor>,
    head: RegressionHead,
    dtype: DType,
    device: Device,
}

pub type Snapshot = HashMap<String, Tensor>;

const PARAMS_FILE: &str = "model.safetensors";
const SPEC_FILE: &str = "model.json";

impl CoordinateModel {
    /// Fresh model with parameters drawn from a seeded stream.
    pub fn new(extractor: &str, out_dim: usize, dtype: DType, seed: u64) -> Result<Self, NetsError> {
        if out_dim == 0 {
            return Err(NetsError::Config("output size must be positive".into()));
        }
        let model = Self::build(extractor, out_dim, dtype)?;
        model.reinitialize(seed)?;
        Ok(model)
    }

    fn build(extractor_id: &str, out_dim: usize, dtype: DType) -> Result<Self, NetsError> {
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, &device);
        let extractor = build_extractor(extractor_id, vb.pp("extractor"))?;
        let feature_dim = extractor.feature_dim();
        let head = RegressionHead::new(feature_dim, out_dim, vb.pp("head"))?;
        Ok(Self {
            spec: ModelSpec {
                extractor: extractor_id.to_string(),
                feature_dim,
                out_dim,
            },
            varmap,
            extractor,
            head,
            dtype,
            device,
        })
    }

    /// He-uniform weights, zero biases, output bias at the frame center.
    fn reinitialize(&self, seed: u64) -> Result<(), NetsError> {
        let mut rng = worker_rng(seed, 0x1_0000);
        for (name, var) in self.sorted_vars() {
            let dims = var.dims().to_vec();
            let n: usize = dims.iter().product();
            let values: Vec<f64> = if name.ends_with("weight") {
                let fan_in: usize = dims[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            } else if name == "head.out.bias" {
                vec![0.5; n]
            } else {
                vec![0.0; n]
            };
            let t = Tensor::from_vec(values, dims, &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    fn sorted_vars(&self) -> Vec<(String, candle_core::Var)> {
        let data = self.varmap.data().lock().expect("varmap lock");
        let mut vars: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        vars
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn out_dim(&self) -> usize {
        self.spec.out_dim
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vars(&self) -> Vec<candle_core::Var> {
        self.sorted_vars().into_iter().map(|(_, v)| v).collect()
    }

    /// Named parameters, sorted by name.
    pub fn named_vars(&self) -> Vec<(String, candle_core::Var)> {
        self.sorted_vars()
    }

    /// Number of scalar parameters whose name starts with `prefix`.
    pub fn param_count(&self, prefix: &str) -> usize {
        self.sorted_vars()
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn features(&self, images: &Tensor) -> candle_core::Result<Tensor> {
        self.extractor.forward(images)
    }

    pub fn forward(&self, images: &Tensor) -> candle_core::Result<Tensor> {
        self.head.forward(&self.extractor.forward(images)?)
    }

    /// Packs 224×224 images into an N×3×224×224 tensor scaled to [0, 1].
    pub fn batch<'a>(&self, images: impl IntoIterator<Item = &'a RgbImage>) -> Result<Tensor, NetsError> {
        images_to_tensor(images, self.dtype, &self.device)
    }

    /// Deep copy of every parameter.
    pub fn snapshot(&self) -> Result<Snapshot, NetsError> {
        let mut out = HashMap::new();
        for (k, v) in self.sorted_vars() {
            out.insert(k, v.as_tensor().copy()?);
        }
        Ok(out)
    }

    pub fn restore(&self, snapshot: &Snapshot) -> Result<(), NetsError> {
        for (k, v) in self.sorted_vars() {
            let t = snapshot
                .get(&k)
                .ok_or_else(|| NetsError::Config(format!("snapshot lacks {k}")))?;
            v.set(t)?;
        }
        Ok(())
    }

    /// Writes `model.safetensors` and `model.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), NetsError> {
        std::fs::create_dir_all(dir).map_err(|e| NetsError::io(dir, e))?;
        self.varmap.save(dir.join(PARAMS_FILE))?;
        let spec = serde_json::to_string_pretty(&self.spec)?;
        std::fs::write(dir.join(SPEC_FILE), spec).map_err(|e| NetsError::io(dir, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, NetsError> {
        let spec_path = dir.join(SPEC_FILE);
        let text = std::fs::read_to_string(&spec_path).map_err(|e| NetsError::io(&spec_path, e))?;
        let spec: ModelSpec = serde_json::from_str(&text)?;
        let mut model = Self::build(&spec.extractor, spec.out_dim, DType::F32)?;
        if model.spec.feature_dim != spec.feature_dim {
            return Err(NetsError::Config(format!(
                "{}: feature dim {} but extractor {} yields {}",
                dir.display(),
                spec.feature_dim,
                spec.extractor,
                model.spec.feature_dim
            )));
        }
        model.varmap.load(dir.join(PARAMS_FILE))?;
        Ok(model)
    }
}

pub fn images_to_tensor<'a>(
    images: impl IntoIterator<Item = &'a RgbImage>,
    dtype: DType,
    device: &Device,
) -> Result<Tensor, NetsError> {
    let side = MODEL_SIDE as usize;
    let plane = side * side;
    let mut data: Vec<f32> = Vec::new();
    let mut n = 0;
    for img in images {
        if img.dimensions() != (MODEL_SIDE, MODEL_SIDE) {
            return Err(NetsError::InputSize {
                width: img.width(),
                height: img.height(),
            });
        }
        let base = data.len();
        data.resize(base + 3 * plane, 0.0);
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[base + c * plane + i] = px.0[c] as f32 / 255.0;
            }
        }
        n += 1;
    }
    Ok(Tensor::from_vec(data, (n, 3, side, side), device)?.to_dtype(dtype)?)
}

impl Regressor for CoordinateModel {
    fn output_len(&self) -> usize {
        self.spec.out_dim
    }

    fn regress(&self, input: &StageInput<'_>) -> Result<Vec<f64>, NetsError> {
        let x = self.batch([input.image])?;
        let y = self.forward(&x)?.squeeze(0)?.to_dtype(DType::F64)?;
        Ok(y.to_vec1::<f64>()?)
    }
}
