//! Small differentiable building blocks composed from candle primitives.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;

use crate::{Error, Result};

pub fn cpu() -> Device {
    Device::Cpu
}

pub fn from_f64(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn randn<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n = shape.iter().product();
    from_f64(crate::rng::normal_vec(rng, n), shape, dtype)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn ensure_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let v = to_f64_vec(t)?;
    if let Some(pos) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{what}: element {pos} is {}",
            v[pos]
        )));
    }
    Ok(())
}

/// `(tanh(x / 2) + 1) / 2`; finite gradients for any finite input.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

/// `ln(1 + e^x)` evaluated as `relu(x) + ln(1 + e^{-|x|})`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn l2_normalize_last(x: &Tensor) -> Result<Tensor> {
    let n = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

/// Mean over the spatial dims of an NCHW tensor, giving `[B, C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// Layer norm across the channel dimension of an NCHW tensor.
pub fn layer_norm_channels(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    crate::ops::channel_layer_norm(x, gamma, beta, eps)
}

/// Depthwise 3x3 convolution with zero padding; `weight` is `[C, 9]`.
pub fn depthwise3x3(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    crate::ops::depthwise3x3(x, weight, bias)
}

/// Pads H and W up to multiples of `multiple` by reflection.
pub fn reflect_pad_to_multiple(x: &Tensor, multiple: usize) -> Result<(Tensor, usize, usize)> {
    let (_, _, h, w) = x.dims4()?;
    let ph = (multiple - h % multiple) % multiple;
    let pw = (multiple - w % multiple) % multiple;
    if ph == 0 && pw == 0 {
        return Ok((x.clone(), h, w));
    }
    if ph >= h || pw >= w {
        return Err(Error::Shape(format!(
            "image {h}x{w} too small to reflect-pad to a multiple of {multiple}"
        )));
    }
    let mut y = x.clone();
    if ph > 0 {
        let idx: Vec<u32> = (0..ph).map(|i| (h - 2 - i) as u32).collect();
        let tail = y.index_select(&Tensor::new(idx, &Device::Cpu)?, 2)?;
        y = Tensor::cat(&[&y, &tail], 2)?;
    }
    if pw > 0 {
        let idx: Vec<u32> = (0..pw).map(|i| (w - 2 - i) as u32).collect();
        let tail = y.index_select(&Tensor::new(idx, &Device::Cpu)?, 3)?;
        y = Tensor::cat(&[&y, &tail], 3)?;
    }
    Ok((y, h, w))
}
