//! Small tensor helpers shared by the LM, mapper and adapters.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::Fingerprint;

/// Elementwise nonlinearity selectable from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Tanh => x.tanh()?,
            Activation::Relu => x.relu()?,
            Activation::Gelu => x.gelu()?,
        })
    }
}

/// Layer normalization over the last dimension with learned gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gain)?.broadcast_add(bias)?)
}

/// `x @ weight + bias` with `weight` stored as `[in, out]`.
pub fn affine(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_matmul(weight)?.broadcast_add(bias)?)
}

/// Seeded parameter initializers. Candle's CPU RNG cannot be seeded, so values are
/// produced on the host and uploaded.
pub struct Init {
    rng: ChaCha8Rng,
    pub dtype: DType,
    pub device: Device,
}

impl Init {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        use rand::SeedableRng;
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device,
        }
    }

    fn upload(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.upload(data, shape)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in_uniform(&mut self, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.upload(data, shape)
    }

    pub fn constant(&self, shape: &[usize], value: f64) -> Result<Tensor> {
        Ok(Tensor::full(value, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        &mut self.rng
    }
}

/// Values of a tensor as `f32`, row-major.
pub fn to_f32_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

/// SHA-256 over names, shapes and little-endian `f32` values, in the given order.
pub fn tensor_checksum<'a, I>(named: I) -> Result<String>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut fp = Fingerprint::new();
    for (name, t) in named {
        fp.update(name);
        let dims: Vec<u8> = t.dims().iter().flat_map(|d| (*d as u64).to_le_bytes()).collect();
        fp.update(dims);
        let bytes: Vec<u8> = to_f32_vec(t)?.iter().flat_map(|v| v.to_le_bytes()).collect();
        fp.update(bytes);
    }
    Ok(fp.finish())
}
