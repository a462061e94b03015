//! Small trainable building blocks over NCHW tensors.

use candle_core::{Tensor, Var};

use crate::params::ParamBuilder;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `N(0, 2 / fan_in)`.
    He,
    /// `N(0, gain^2 / fan_in)`.
    Scaled(f64),
    Zero,
}

impl Init {
    fn std(self, fan_in: usize) -> f64 {
        match self {
            Init::He => (2.0 / fan_in as f64).sqrt(),
            Init::Scaled(g) => g / (fan_in as f64).sqrt(),
            Init::Zero => 0.0,
        }
    }
}

fn weight(pb: &mut ParamBuilder, name: &str, shape: &[usize], fan_in: usize, init: Init) -> Result<Var> {
    match init {
        Init::Zero => pb.zeros(name, shape),
        _ => pb.normal(name, shape, init.std(fan_in)),
    }
}

/// Square-kernel convolution with "same" padding for odd kernels.
#[derive(Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        let weight = weight(pb, &format!("{name}.weight"), &[cout, cin, kernel, kernel], cin * kernel * kernel, init)?;
        let bias = pb.zeros(&format!("{name}.bias"), &[cout])?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1).unwrap_or(0)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0).unwrap_or(0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_channels() {
            return Err(Error::Shape(format!("conv expects {} channels, got {c}", self.in_channels())));
        }
        let (b, _, _, _) = x.dims4()?;
        let cols = crate::ops::patches(x, self.weight.dim(2)?, self.stride, self.padding, true)?;
        let co = self.out_channels();
        let wm = Tensor::cat(&[&self.weight.flatten_from(1)?, &self.bias.reshape((co, 1))?], 1)?;
        let k = wm.dim(1)?;
        let wm = wm.unsqueeze(0)?.broadcast_as((b, co, k))?.contiguous()?;
        let (_, _, h, w) = x.dims4()?;
        let ho = (h + 2 * self.padding - self.weight.dim(2)?) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.weight.dim(3)?) / self.stride + 1;
        Ok(wm.matmul(&cols)?.reshape((b, co, ho, wo))?)
    }
}

/// `x W + b` over the last dimension of a 2-D input.
#[derive(Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, din: usize, dout: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: weight(pb, &format!("{name}.weight"), &[din, dout], din, init)?,
            bias: pb.zeros(&format!("{name}.bias"), &[dout])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Layer norm over channels with a per-channel affine map.
#[derive(Clone)]
pub struct LayerNorm2d {
    pub gamma: Var,
    pub beta: Var,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

impl LayerNorm2d {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.ones(&format!("{name}.gamma"), &[channels])?,
            beta: pb.zeros(&format!("{name}.beta"), &[channels])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        crate::tensor::layer_norm_channels(x, &self.gamma, &self.beta, LAYER_NORM_EPS)
    }
}

/// Adds a per-sample `[B, C]` vector to every pixel of `[B, C, H, W]`.
pub fn add_channel_bias(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (b, c) = v.dims2()?;
    Ok(x.broadcast_add(&v.reshape((b, c, 1, 1))?)?)
}

/// Multiplies every pixel of `[B, C, H, W]` by a per-sample `[B, C]` vector.
pub fn scale_channels(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (b, c) = v.dims2()?;
    Ok(x.broadcast_mul(&v.reshape((b, c, 1, 1))?)?)
}

/// Two 3x3 convolutions with a per-level time-embedding shift and a skip path.
#[derive(Clone)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    time: Linear,
}

impl ResBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, time_dim: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(pb, &format!("{name}.conv1"), channels, channels, 3, 1, Init::He)?,
            conv2: Conv2d::new(pb, &format!("{name}.conv2"), channels, channels, 3, 1, Init::Scaled(0.5))?,
            time: Linear::new(pb, &format!("{name}.time"), time_dim, channels, Init::Scaled(1.0))?,
        })
    }

    /// `x + conv2(gelu(conv1(x) + time(temb)))`.
    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = add_channel_bias(&self.conv1.forward(x)?, &self.time.forward(temb)?)?;
        let h = self.conv2.forward(&crate::ops::gelu(&h)?)?;
        Ok((x + h)?)
    }
}
