//! Feature extractors: anything mapping a batch of 224×224 RGB images in
//! [0, 1] to one feature vector per image.

use candle_core::{DType, Result, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Module, VarBuilder};

use super::NetsError;

pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> &str;

    /// Length of each feature vector.
    fn feature_dim(&self) -> usize;

    /// `images` is N×3×224×224 with values in [0, 1]; returns N×F.
    fn forward(&self, images: &Tensor) -> Result<Tensor>;
}

pub const TINY_CONV: &str = "tiny-conv";

/// Extractors this build can construct from scratch.
pub const AVAILABLE: &[&str] = &[TINY_CONV];

/// Constructs extractor `id` with its parameters under `vb`.
pub fn build_extractor(id: &str, vb: VarBuilder) -> std::result::Result<Box<dyn FeatureExtractor>, NetsError> {
    match id {
        TINY_CONV => Ok(Box::new(TinyConv::new(vb)?)),
        other => Err(NetsError::UnknownExtractor {
            id: other.to_string(),
            available: AVAILABLE.iter().map(|s| s.to_string()).collect(),
        }),
    }
}

/// Small strided CNN for tests and desk-scale runs.
///
/// The input is average-pooled 4× to 56×56, two normalized coordinate planes
/// are appended, then three stride-2 3×3 convolutions (16, 32, 64 channels),
/// a 1×1 projection to 128 channels and global average pooling.
pub struct TinyConv {
    convs: Vec<Conv2d>,
    proj: Conv2d,
}

const POOL: usize = 4;
const WIDTHS: [usize; 3] = [16, 32, 64];
const FEATURES: usize = 128;

impl TinyConv {
    pub fn new(vb: VarBuilder) -> Result<Self> {
        let strided = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let mut convs = Vec::with_capacity(WIDTHS.len());
        let mut c_in = 5;
        for (i, &c_out) in WIDTHS.iter().enumerate() {
            convs.push(candle_nn::conv2d(c_in, c_out, 3, strided, vb.pp(format!("conv{i}")))?);
            c_in = c_out;
        }
        let proj = candle_nn::conv2d(c_in, FEATURES, 1, Default::default(), vb.pp("proj"))?;
        Ok(Self { convs, proj })
    }
}

fn coordinate_planes(n: usize, h: usize, w: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let xs = Tensor::arange(0u32, w as u32, device)?
        .to_dtype(dtype)?
        .affine(2.0 / (w as f64 - 1.0), -1.0)?
        .reshape((1, 1, 1, w))?
        .broadcast_as((n, 1, h, w))?;
    let ys = Tensor::arange(0u32, h as u32, device)?
        .to_dtype(dtype)?
        .affine(2.0 / (h as f64 - 1.0), -1.0)?
        .reshape((1, 1, h, 1))?
        .broadcast_as((n, 1, h, w))?;
    Tensor::cat(&[xs, ys], 1)
}

impl FeatureExtractor for TinyConv {
    fn id(&self) -> &str {
        TINY_CONV
    }

    fn feature_dim(&self) -> usize {
        FEATURES
    }

    fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let x = images.avg_pool2d(POOL)?.affine(1.0, -0.5)?;
        let (n, _, h, w) = x.dims4()?;
        let coords = coordinate_planes(n, h, w, x.dtype(), x.device())?;
        let mut x = Tensor::cat(&[x, coords], 1)?;
        for conv in &self.convs {
            x = conv.forward(&x)?.relu()?;
        }
        self.proj.forward(&x)?.relu()?.mean((2, 3))
    }
}
