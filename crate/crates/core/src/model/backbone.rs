//! Strided CNN feature extractor and sine positional encodings.

use candle_core::{Device, Module, Tensor};

use super::nn::{linear, Conv, Init, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Backbone {
    convs: Vec<Conv>,
    proj: candle_nn::Linear,
    stride: usize,
}

/// Backbone tokens with their positional encodings.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    /// `(B, h·w, d_model)`, row-major over the grid.
    pub tokens: Tensor,
    /// `(h·w, d_model)`.
    pub pos: Tensor,
    pub grid: (usize, usize),
}

impl Backbone {
    pub fn new(store: &mut ParamStore, channels: &[usize], strides: &[usize], d_model: usize) -> candle_core::Result<Self> {
        let mut convs = Vec::with_capacity(channels.len());
        let mut c_in = 3;
        for (i, (&c, &s)) in channels.iter().zip(strides).enumerate() {
            convs.push(Conv::new(store, &format!("backbone.conv{i}"), c_in, c, s)?);
            c_in = c;
        }
        let proj = linear(store, "backbone.proj", c_in, d_model, Init::Xavier)?;
        Ok(Self { convs, proj, stride: strides.iter().product() })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// `images: (B, 3, H, W)`.
    pub fn forward(&self, images: &Tensor) -> Result<FeatureMap> {
        let (_, _, h, w) = images.dims4()?;
        if h < self.stride || w < self.stride {
            return Err(Error::ImageTooSmall { height: h, width: w, stride: self.stride });
        }
        let mut x = images.clone();
        for c in &self.convs {
            x = c.forward(&x)?;
        }
        let (_, _, gh, gw) = x.dims4()?;
        let tokens = self.proj.forward(&x.flatten_from(2)?.transpose(1, 2)?.contiguous()?)?;
        let d_model = tokens.dim(2)?;
        let pos = sine_position_grid(gh, gw, d_model, images.device())?;
        Ok(FeatureMap { tokens, pos, grid: (gh, gw) })
    }
}

/// Normalized 2-D sine encoding of a `h × w` grid: the first half of the
/// channels encodes rows, the second half columns; channel pairs alternate
/// sine and cosine.
pub fn sine_position_grid(h: usize, w: usize, d_model: usize, device: &Device) -> candle_core::Result<Tensor> {
    let half = d_model / 2;
    let scale = std::f64::consts::TAU;
    let freq: Vec<f64> = (0..half).map(|i| 10000f64.powf(2.0 * (i / 2) as f64 / half as f64)).collect();
    let mut data = Vec::with_capacity(h * w * d_model);
    for y in 0..h {
        for x in 0..w {
            let ye = (y + 1) as f64 / (h as f64 + 1e-6) * scale;
            let xe = (x + 1) as f64 / (w as f64 + 1e-6) * scale;
            for v in [ye, xe] {
                for (i, f) in freq.iter().enumerate() {
                    let a = v / f;
                    data.push(if i % 2 == 0 { a.sin() } else { a.cos() } as f32);
                }
            }
        }
    }
    Tensor::from_vec(data, (h * w, 2 * half), device)
}

/// Sine embedding of reference points `(…, 2)` into `(…, d_model)`, laid out
/// like [`sine_position_grid`] (`y` channels first).
pub fn sine_point_embedding(points: &Tensor, d_model: usize) -> candle_core::Result<Tensor> {
    let half = d_model / 2;
    let device = points.device();
    let inv: Vec<f32> = (0..half).map(|i| (1.0 / 10000f64.powf(2.0 * (i / 2) as f64 / half as f64)) as f32).collect();
    let even: Vec<f32> = (0..half).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
    let inv = Tensor::from_vec(inv, half, device)?;
    let even = Tensor::from_vec(even, half, device)?;
    let odd = even.affine(-1.0, 1.0)?;
    let last = points.rank() - 1;
    let embed = |coord: usize| -> candle_core::Result<Tensor> {
        let a = (points.narrow(last, coord, 1)? * std::f64::consts::TAU)?.broadcast_mul(&inv)?;
        a.sin()?.broadcast_mul(&even)? + a.cos()?.broadcast_mul(&odd)?
    };
    Tensor::cat(&[embed(1)?, embed(0)?], last)
}
