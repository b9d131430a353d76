//! Parameter storage and the small layer set the network is built from.
//!
//! Softmax, layer norm and dropout are composed from primitive tensor ops so
//! that every piece has a backward pass and dropout masks come from a seeded
//! stream.

use std::collections::BTreeMap;

use candle_core::{Device, Module, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Named trainable tensors, created in a fixed order from one seeded stream.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device) -> Self {
        Self { vars: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed), device: device.clone() }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn push(&mut self, name: String, data: Vec<f32>, shape: &[usize]) -> candle_core::Result<Tensor> {
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        if self.vars.insert(name.clone(), var).is_some() {
            candle_core::bail!("duplicate parameter `{name}`");
        }
        Ok(t)
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> candle_core::Result<Tensor> {
        let n = shape.iter().product();
        let b = bound as f32;
        let data = (0..n).map(|_| if b > 0.0 { self.rng.random_range(-b..b) } else { 0.0 }).collect();
        self.push(name, data, shape)
    }

    pub fn normal(&mut self, name: String, shape: &[usize], std: f64) -> candle_core::Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            // Box-Muller
            let u1: f64 = 1.0 - self.rng.random::<f64>();
            let u2: f64 = self.rng.random();
            let r = (-2.0 * u1.ln()).sqrt();
            let t = std::f64::consts::TAU * u2;
            data.push((std * r * t.cos()) as f32);
            if data.len() < n {
                data.push((std * r * t.sin()) as f32);
            }
        }
        self.push(name, data, shape)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> candle_core::Result<Tensor> {
        let n = shape.iter().product();
        self.push(name, vec![value as f32; n], shape)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

/// How a linear layer's weight is drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Xavier,
    /// Kaiming-uniform with the PyTorch default gain.
    Kaiming,
    Zeros,
}

fn bound(init: Init, fan_in: usize, fan_out: usize) -> f64 {
    match init {
        Init::Xavier => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        Init::Kaiming => 1.0 / (fan_in as f64).sqrt(),
        Init::Zeros => 0.0,
    }
}

pub fn linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, init: Init) -> candle_core::Result<candle_nn::Linear> {
    let w = store.uniform(format!("{name}.weight"), &[fan_out, fan_in], bound(init, fan_in, fan_out))?;
    let b = store.constant(format!("{name}.bias"), &[fan_out], 0.0)?;
    Ok(candle_nn::Linear::new(w, Some(b)))
}

/// Stack of linear layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<candle_nn::Linear>,
}

impl Mlp {
    /// `dims` lists input, hidden and output widths. With `zero_last` the
    /// final layer starts at zero.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], zero_last: bool) -> candle_core::Result<Self> {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if zero_last && i + 1 == n { Init::Zeros } else { Init::Xavier };
                linear(store, &format!("{name}.layers.{i}"), dims[i], dims[i + 1], init)
            })
            .collect::<candle_core::Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[candle_nn::Linear] {
        &self.layers
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut x = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(&x)?;
            if i + 1 < self.layers.len() {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> candle_core::Result<Self> {
        Ok(Self {
            weight: store.constant(format!("{name}.weight"), &[dim], 1.0)?,
            bias: store.constant(format!("{name}.bias"), &[dim], 0.0)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// 3×3 convolution, padding 1, followed by ReLU.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize) -> candle_core::Result<Self> {
        let fan_in = c_in * 9;
        // He-uniform for ReLU stacks
        let b = (6.0 / fan_in as f64).sqrt();
        Ok(Self {
            weight: store.uniform(format!("{name}.weight"), &[c_out, c_in, 3, 3], b)?,
            bias: store.constant(format!("{name}.bias"), &[c_out], 0.0)?,
            stride,
        })
    }
}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        // Explicit padding, trimmed of trailing rows/columns no window reads.
        // The output is that of padding 1, but the backward pass no longer
        // needs an output padding, which candle derives from the height alone
        // and would misapply to a width with a different remainder.
        let mut x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        for dim in [2, 3] {
            let n = x.dim(dim)?;
            x = x.narrow(dim, 0, n - (n - 3) % self.stride)?;
        }
        let y = x.conv2d(&self.weight, 0, self.stride, 1, 1)?;
        y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?.relu()
    }
}

pub fn softmax_last_dim(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::sigmoid(x)
}

pub fn inverse_sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    let eps = 1e-5;
    let x = x.clamp(0.0, 1.0)?;
    let num = x.maximum(eps)?;
    let den = x.affine(-1.0, 1.0)?.maximum(eps)?;
    (num / den)?.log()
}

/// Train/eval switch plus the dropout stream.
pub struct ForwardCtx {
    training: bool,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self { training: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn train(seed: u64) -> Self {
        Self { training: true, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Inverted dropout; identity in eval mode or at `p == 0`.
    pub fn dropout(&mut self, x: &Tensor, p: f64) -> candle_core::Result<Tensor> {
        if !self.training || p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - p;
        let scale = (1.0 / keep) as f32;
        let n = x.elem_count();
        let mask: Vec<f32> = (0..n).map(|_| if self.rng.random::<f64>() < keep { scale } else { 0.0 }).collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        x.mul(&mask)
    }
}
