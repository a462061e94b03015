//! Custom CPU kernels with hand-written backward passes for the two hot
//! spots of training: patch extraction for convolutions and GELU.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Tensor, WithDType};

use crate::{Error, Result};

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
        None => Err(candle_core::Error::Msg("custom op needs a contiguous input".into())),
    }
}

macro_rules! float_dispatch {
    ($s:expr, $l:expr, $f:ident, $($arg:expr),*) => {
        match $s {
            CpuStorage::F32(_) => {
                let v = $f::<f32>(contiguous($s, $l)?, $($arg),*);
                Ok(CpuStorage::F32(v))
            }
            CpuStorage::F64(_) => {
                let v = $f::<f64>(contiguous($s, $l)?, $($arg),*);
                Ok(CpuStorage::F64(v))
            }
            _ => Err(candle_core::Error::Msg("custom op supports f32 and f64 only".into())),
        }
    };
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ones: bool,
}

impl Geometry {
    fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k + usize::from(self.ones)
    }

    fn cols_shape(&self) -> Shape {
        Shape::from((self.b, self.rows(), self.out_h() * self.out_w()))
    }
}

impl Geometry {
    /// Output columns `[x0, x1)` whose tap `dx` lands inside the row.
    fn valid_x(&self, dx: usize) -> (usize, usize) {
        let wo = self.out_w();
        let x0 = self.pad.saturating_sub(dx).div_ceil(self.stride);
        let x1 = if self.w + self.pad > dx {
            ((self.w + self.pad - dx - 1) / self.stride + 1).min(wo)
        } else {
            0
        };
        (x0.min(x1), x1)
    }

    /// Visits every in-bounds `(cols offset, source offset)` run.
    fn runs(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_h(), self.out_w());
        let mut o = 0;
        for b in 0..self.b {
            for c in 0..self.c {
                let plane = (b * self.c + c) * self.h * self.w;
                for dy in 0..self.k {
                    for dx in 0..self.k {
                        let (x0, x1) = self.valid_x(dx);
                        for y in 0..ho {
                            let sy = (y * self.stride + dy) as isize - self.pad as isize;
                            if sy >= 0 && sy < self.h as isize && x1 > x0 {
                                let sx0 = x0 * self.stride + dx - self.pad;
                                f(o + x0, plane + sy as usize * self.w + sx0, x1 - x0);
                            }
                            o += wo;
                        }
                    }
                }
            }
            if self.ones {
                o += ho * wo;
            }
        }
    }

    fn ones_rows(&self) -> impl Iterator<Item = usize> + '_ {
        let plane = self.out_h() * self.out_w();
        (0..self.b).filter(|_| self.ones).map(move |b| (b * self.rows() + self.rows() - 1) * plane)
    }
}

fn im2col<T: WithDType>(src: &[T], g: Geometry) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let mut out = vec![T::zero(); g.b * g.rows() * plane];
    let s = g.stride;
    g.runs(|o, i, n| {
        if s == 1 {
            out[o..o + n].copy_from_slice(&src[i..i + n]);
        } else {
            for (k, v) in out[o..o + n].iter_mut().enumerate() {
                *v = src[i + k * s];
            }
        }
    });
    for r in g.ones_rows() {
        out[r..r + plane].fill(T::one());
    }
    out
}

fn col2im<T: WithDType>(cols: &[T], g: Geometry) -> Vec<T> {
    let mut out = vec![T::zero(); g.b * g.c * g.h * g.w];
    let s = g.stride;
    g.runs(|o, i, n| {
        for k in 0..n {
            out[i + k * s] += cols[o + k];
        }
    });
    out
}

struct Im2col {
    k: usize,
    stride: usize,
    pad: usize,
    ones: bool,
}

impl Im2col {
    fn geometry(&self, (b, c, h, w): (usize, usize, usize, usize)) -> Geometry {
        Geometry {
            b,
            c,
            h,
            w,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
            ones: self.ones,
        }
    }
}

impl CustomOp1 for Im2col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geometry(l.shape().dims4()?);
        let out = float_dispatch!(s, l, im2col, g)?;
        Ok((out, g.cols_shape()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = Col2im(self.geometry(arg.dims4()?));
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

struct Col2im(Geometry);

impl CustomOp1 for Col2im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        if l.shape() != &g.cols_shape() {
            return Err(candle_core::Error::Msg("col2im shape mismatch".into()));
        }
        let out = float_dispatch!(s, l, col2im, g)?;
        Ok((out, Shape::from((g.b, g.c, g.h, g.w))))
    }
}

/// Patches `[B, C*k*k (+1), Ho*Wo]` of a zero-padded `k x k` window, ordered
/// channel-major then kernel row then kernel column. With `ones` a constant
/// row is appended so a bias can ride along in the weight matrix.
pub fn patches(x: &Tensor, k: usize, stride: usize, pad: usize, ones: bool) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if k == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::Shape(format!("{k}x{k} window does not fit a padded {h}x{w} map")));
    }
    Ok(x.contiguous()?.apply_op1(Im2col { k, stride, pad, ones })?)
}

/// Float kernels for the tanh-form GELU, evaluated in the tensor's own width.
trait GeluFloat: WithDType {
    fn gelu(self) -> Self;
    fn gelu_deriv(self) -> Self;
}

macro_rules! gelu_float {
    ($t:ty) => {
        impl GeluFloat for $t {
            fn gelu(self) -> Self {
                let u = 0.797_884_560_802_865_4 * (self + 0.044715 * self * self * self);
                0.5 * self * (1.0 + fast_tanh(u))
            }

            fn gelu_deriv(self) -> Self {
                let v = self;
                let th = fast_tanh(0.797_884_560_802_865_4 * (v + 0.044715 * v * v * v));
                let du = 0.797_884_560_802_865_4 * (1.0 + 3.0 * 0.044715 * v * v);
                0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du
            }
        }

        impl FastTanh for $t {
            fn fast_tanh(self) -> Self {
                // saturated well before exp overflows or loses the difference
                if self.abs() > 15.0 {
                    return self.signum();
                }
                let e = (2.0 * self).exp();
                (e - 1.0) / (e + 1.0)
            }
        }
    };
}

trait FastTanh {
    fn fast_tanh(self) -> Self;
}

fn fast_tanh<T: FastTanh>(x: T) -> T {
    x.fast_tanh()
}

gelu_float!(f32);
gelu_float!(f64);

fn gelu_fwd<T: GeluFloat>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.gelu()).collect()
}

fn gelu_deriv<T: GeluFloat>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.gelu_deriv()).collect()
}

struct Gelu;
struct GeluDeriv;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu-tanh"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        Ok((float_dispatch!(s, l, gelu_fwd,)?, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let d = arg.contiguous()?.apply_op1_no_bwd(&GeluDeriv)?;
        Ok(Some(grad.mul(&d)?))
    }
}

impl CustomOp1 for GeluDeriv {
    fn name(&self) -> &'static str {
        "gelu-tanh-deriv"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        Ok((float_dispatch!(s, l, gelu_deriv,)?, l.shape().clone()))
    }
}

/// GELU (tanh form) with a single-pass derivative.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Gelu)?)
}

fn read64(s: &CpuStorage, l: &Layout) -> candle_core::Result<Vec<f64>> {
    match s {
        CpuStorage::F32(_) => Ok(contiguous::<f32>(s, l)?.iter().map(|&v| v as f64).collect()),
        CpuStorage::F64(_) => Ok(contiguous::<f64>(s, l)?.to_vec()),
        _ => Err(candle_core::Error::Msg("custom op supports f32 and f64 only".into())),
    }
}

fn write64(v: Vec<f64>, like: &CpuStorage) -> CpuStorage {
    match like {
        CpuStorage::F32(_) => CpuStorage::F32(v.into_iter().map(|x| x as f32).collect()),
        _ => CpuStorage::F64(v),
    }
}

fn tensor_vec(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

fn vec_tensor(v: Vec<f64>, like: &Tensor) -> candle_core::Result<Tensor> {
    Tensor::from_vec(v, like.shape(), like.device())?.to_dtype(like.dtype())
}

/// Layer norm over the channel axis of NCHW, with per-channel affine.
struct ChannelNorm {
    eps: f64,
}

impl ChannelNorm {
    /// Per-(batch, pixel) mean and reciprocal std, laid out `[B, H*W]`.
    fn moments(&self, x: &[f64], b: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
        let mut mean = vec![0.0; b * hw];
        let mut var = vec![0.0; b * hw];
        for bi in 0..b {
            let m = &mut mean[bi * hw..][..hw];
            for ci in 0..c {
                let row = &x[(bi * c + ci) * hw..][..hw];
                for (a, v) in m.iter_mut().zip(row) {
                    *a += v;
                }
            }
            m.iter_mut().for_each(|a| *a /= c as f64);
            let va = &mut var[bi * hw..][..hw];
            for ci in 0..c {
                let row = &x[(bi * c + ci) * hw..][..hw];
                for ((a, v), mu) in va.iter_mut().zip(row).zip(m.iter()) {
                    *a += (v - mu) * (v - mu);
                }
            }
        }
        let rstd = var.iter().map(|v| 1.0 / (v / c as f64 + self.eps).sqrt()).collect();
        (mean, rstd)
    }
}

impl CustomOp3 for ChannelNorm {
    fn name(&self) -> &'static str {
        "channel-layer-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        let hw = h * w;
        let (x, gamma, beta) = (read64(s1, l1)?, read64(s2, l2)?, read64(s3, l3)?);
        let (mean, rstd) = self.moments(&x, b, c, hw);
        let mut y = vec![0.0; x.len()];
        for bi in 0..b {
            let (m, r) = (&mean[bi * hw..][..hw], &rstd[bi * hw..][..hw]);
            for ci in 0..c {
                let o = (bi * c + ci) * hw;
                for p in 0..hw {
                    y[o + p] = (x[o + p] - m[p]) * r[p] * gamma[ci] + beta[ci];
                }
            }
        }
        Ok((write64(y, s1), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let hw = h * w;
        let (xv, gv, dy) = (tensor_vec(x)?, tensor_vec(gamma)?, tensor_vec(grad)?);
        let (mean, rstd) = self.moments(&xv, b, c, hw);
        let mut dx = vec![0.0; xv.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut xhat = vec![0.0; c * hw];
        let mut g = vec![0.0; c * hw];
        for bi in 0..b {
            let (m, r) = (&mean[bi * hw..][..hw], &rstd[bi * hw..][..hw]);
            let mut mean_g = vec![0.0; hw];
            let mut mean_gx = vec![0.0; hw];
            for ci in 0..c {
                let o = (bi * c + ci) * hw;
                for p in 0..hw {
                    let xh = (xv[o + p] - m[p]) * r[p];
                    let gg = dy[o + p] * gv[ci];
                    xhat[ci * hw + p] = xh;
                    g[ci * hw + p] = gg;
                    mean_g[p] += gg / c as f64;
                    mean_gx[p] += gg * xh / c as f64;
                    dgamma[ci] += dy[o + p] * xh;
                    dbeta[ci] += dy[o + p];
                }
            }
            for ci in 0..c {
                let o = (bi * c + ci) * hw;
                for p in 0..hw {
                    dx[o + p] = r[p] * (g[ci * hw + p] - mean_g[p] - xhat[ci * hw + p] * mean_gx[p]);
                }
            }
        }
        Ok((
            Some(vec_tensor(dx, x)?),
            Some(vec_tensor(dgamma, gamma)?),
            Some(vec_tensor(dbeta, beta)?),
        ))
    }
}

/// Layer norm across the channels of an NCHW tensor.
pub fn channel_layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.dim(1)?;
    if x.rank() != 4 || gamma.dims() != [c] || beta.dims() != [c] {
        return Err(Error::Shape(format!(
            "layer norm over {:?} with gamma {:?} and beta {:?}",
            x.dims(),
            gamma.dims(),
            beta.dims()
        )));
    }
    Ok(x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, ChannelNorm { eps })?)
}

/// Depthwise 3x3 convolution with zero padding and per-channel bias.
struct Depthwise3x3;

fn depthwise_taps(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
    for t in 0..9 {
        let (dy, dx) = (t / 3, t % 3);
        for y in 0..h {
            let sy = y as isize + dy as isize - 1;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx as isize - 1;
                if sx >= 0 && sx < w as isize {
                    f(t, y * w + x, sy as usize * w + sx as usize);
                }
            }
        }
    }
}

impl CustomOp3 for Depthwise3x3 {
    fn name(&self) -> &'static str {
        "depthwise3x3"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        let (x, k, bias) = (read64(s1, l1)?, read64(s2, l2)?, read64(s3, l3)?);
        let mut y = vec![0.0; x.len()];
        for bc in 0..b * c {
            let ci = bc % c;
            let (xp, yp) = (&x[bc * h * w..][..h * w], &mut y[bc * h * w..][..h * w]);
            yp.fill(bias[ci]);
            depthwise_taps(h, w, |t, o, i| yp[o] += k[ci * 9 + t] * xp[i]);
        }
        Ok((write64(y, s1), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let (xv, k, g) = (tensor_vec(x)?, tensor_vec(weight)?, tensor_vec(grad)?);
        let mut dx = vec![0.0; xv.len()];
        let mut dk = vec![0.0; c * 9];
        let mut db = vec![0.0; c];
        for bc in 0..b * c {
            let ci = bc % c;
            let (xp, gp) = (&xv[bc * h * w..][..h * w], &g[bc * h * w..][..h * w]);
            let dxp = &mut dx[bc * h * w..][..h * w];
            db[ci] += gp.iter().sum::<f64>();
            let dkc = &mut dk[ci * 9..][..9];
            depthwise_taps(h, w, |t, o, i| {
                dxp[i] += k[ci * 9 + t] * gp[o];
                dkc[t] += gp[o] * xp[i];
            });
        }
        Ok((
            Some(vec_tensor(dx, x)?),
            Some(vec_tensor(dk, weight)?),
            Some(vec_tensor(db, bias)?),
        ))
    }
}

/// Depthwise 3x3 convolution; `weight` is `[C, 9]`, `bias` is `[C]`.
pub fn depthwise3x3(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    if x.rank() != 4 || weight.dims() != [c, 9] || bias.dims() != [c] {
        return Err(Error::Shape(format!(
            "depthwise conv over {:?} with weight {:?} and bias {:?}",
            x.dims(),
            weight.dims(),
            bias.dims()
        )));
    }
    Ok(x.contiguous()?
        .apply_op3(&weight.contiguous()?, &bias.contiguous()?, Depthwise3x3)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        let d = (a - b).unwrap().abs().unwrap().flatten_all().unwrap();
        d.max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn gelu_matches_native() {
        let x = Tensor::randn(0f64, 2.0, (5, 7), &Device::Cpu).unwrap();
        assert!(max_abs(&gelu(&x).unwrap(), &x.gelu().unwrap()) < 1e-12);
    }

    #[test]
    fn gelu_gradient_matches_finite_differences() {
        let xs: Vec<f64> = (-40..=40).map(|i| i as f64 * 0.1 + 0.013).collect();
        let x = Var::from_tensor(&Tensor::new(xs.as_slice(), &Device::Cpu).unwrap()).unwrap();
        let g = gelu(&x).unwrap().sum_all().unwrap().backward().unwrap();
        let ours = g.get(&x).unwrap().to_vec1::<f64>().unwrap();
        let f = |v: f64| gelu_fwd::<f64>(&[v])[0];
        for (v, d) in xs.iter().zip(ours) {
            let h = 1e-5;
            let fd = (f(v + h) - f(v - h)) / (2.0 * h);
            assert!((fd - d).abs() < 1e-8, "x={v}: {d} vs {fd}");
        }
    }

    #[test]
    fn patches_match_sliced_views_and_their_gradient() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 5, 4), &dev).unwrap()).unwrap();
        let (k, p) = (3, 1);
        let xp = x.pad_with_zeros(2, p, p).unwrap().pad_with_zeros(3, p, p).unwrap();
        let mut taps = Vec::new();
        for dy in 0..k {
            for dx in 0..k {
                taps.push(xp.narrow(2, dy, 5).unwrap().narrow(3, dx, 4).unwrap().reshape((2, 3, 1, 20)).unwrap());
            }
        }
        let reference = Tensor::cat(&taps, 2).unwrap().reshape((2, 27, 20)).unwrap();
        let fast = patches(&x, k, 1, p, false).unwrap();
        assert!(max_abs(&fast, &reference) < 1e-15);
        let w = Tensor::randn(0f64, 1.0, (2, 27, 20), &dev).unwrap();
        let g1 = (fast * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &w).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(max_abs(g1.get(&x).unwrap(), g2.get(&x).unwrap()) < 1e-12);
    }

    #[test]
    fn patches_reject_oversized_window() {
        let x = Tensor::zeros((1, 1, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(patches(&x, 5, 1, 1, false).is_err());
        assert_eq!(patches(&x, 5, 1, 2, true).unwrap().dims(), &[1, 26, 4]);
    }

    fn grads(y: Tensor, w: &Tensor, vars: &[&Var]) -> Vec<Tensor> {
        let g = (y * w).unwrap().sum_all().unwrap().backward().unwrap();
        vars.iter().map(|v| g.get(v).unwrap().clone()).collect()
    }

    #[test]
    fn channel_norm_matches_composed_ops() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.5, (2, 5, 3, 4), &dev).unwrap()).unwrap();
        let g = Var::from_tensor(&Tensor::randn(1f64, 0.3, 5, &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f64, 0.3, 5, &dev).unwrap()).unwrap();
        let w = Tensor::randn(0f64, 1.0, (2, 5, 3, 4), &dev).unwrap();
        let composed = |v: &[&Var]| {
            let x = v[0].as_tensor();
            let mean = x.mean_keepdim(1).unwrap();
            let cen = x.broadcast_sub(&mean).unwrap();
            let var = cen.sqr().unwrap().mean_keepdim(1).unwrap();
            let n = cen.broadcast_div(&var.affine(1.0, 1e-6).unwrap().sqrt().unwrap()).unwrap();
            n.broadcast_mul(&v[1].reshape((1, 5, 1, 1)).unwrap())
                .unwrap()
                .broadcast_add(&v[2].reshape((1, 5, 1, 1)).unwrap())
                .unwrap()
        };
        let fused = |v: &[&Var]| channel_layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
        assert!(max_abs(&fused(&[&x, &g, &b]), &composed(&[&x, &g, &b])) < 1e-12);
        let a = grads(fused(&[&x, &g, &b]), &w, &[&x, &g, &b]);
        let r = grads(composed(&[&x, &g, &b]), &w, &[&x, &g, &b]);
        for (a, r) in a.iter().zip(&r) {
            assert!(max_abs(a, r) < 1e-10);
        }
    }

    #[test]
    fn depthwise_matches_grouped_conv() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 3, 5, 4), &dev).unwrap()).unwrap();
        let k = Var::from_tensor(&Tensor::randn(0f64, 1.0, (3, 9), &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::randn(0f64, 1.0, 3, &dev).unwrap()).unwrap();
        let w = Tensor::randn(0f64, 1.0, (2, 3, 5, 4), &dev).unwrap();
        let reference = |v: &[&Var]| {
            let xp = v[0].pad_with_zeros(2, 1, 1).unwrap().pad_with_zeros(3, 1, 1).unwrap();
            let mut acc = v[2].reshape((1, 3, 1, 1)).unwrap().broadcast_as((2, 3, 5, 4)).unwrap();
            for t in 0..9 {
                let tap = v[1].narrow(1, t, 1).unwrap().reshape((1, 3, 1, 1)).unwrap();
                let s = xp.narrow(2, t / 3, 5).unwrap().narrow(3, t % 3, 4).unwrap();
                acc = (acc + s.broadcast_mul(&tap).unwrap()).unwrap();
            }
            acc
        };
        let fused = |v: &[&Var]| depthwise3x3(v[0], v[1], v[2]).unwrap();
        let native = x.conv2d(&k.reshape((3, 1, 3, 3)).unwrap(), 1, 1, 1, 3).unwrap();
        let native = native.broadcast_add(&b.reshape((1, 3, 1, 1)).unwrap()).unwrap();
        assert!(max_abs(&fused(&[&x, &k, &b]), &native) < 1e-12);
        let a = grads(fused(&[&x, &k, &b]), &w, &[&x, &k, &b]);
        let r = grads(reference(&[&x, &k, &b]), &w, &[&x, &k, &b]);
        for (a, r) in a.iter().zip(&r) {
            assert!(max_abs(a, r) < 1e-10);
        }
    }

    #[test]
    fn strided_patches_with_bias_row_match_native_conv() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 3, 7, 6), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (4, 3, 3, 3), &dev).unwrap();
        let bias = Tensor::randn(0f64, 1.0, 4, &dev).unwrap();
        let native = x.conv2d(&w, 1, 2, 1, 1).unwrap().broadcast_add(&bias.reshape((1, 4, 1, 1)).unwrap()).unwrap();
        let cols = patches(&x, 3, 2, 1, true).unwrap();
        let wm = Tensor::cat(&[w.reshape((4, 27)).unwrap(), bias.reshape((4, 1)).unwrap()], 1).unwrap();
        let wm = wm.unsqueeze(0).unwrap().broadcast_as((2, 4, 28)).unwrap().contiguous().unwrap();
        let ours = wm.matmul(&cols).unwrap().reshape(native.dims()).unwrap();
        assert!(max_abs(&ours, &native) < 1e-12);
    }

    #[test]
    fn patch_geometry_sweep_matches_native_conv() {
        let dev = Device::Cpu;
        for k in [1usize, 3, 5] {
            for stride in 1..=3 {
                for pad in 0..=k / 2 {
                    for (h, w) in [(7usize, 5usize), (6, 9)] {
                        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 2, h, w), &dev).unwrap()).unwrap();
                        let wt = Tensor::randn(0f64, 1.0, (3, 2, k, k), &dev).unwrap();
                        let native = x.conv2d(&wt, pad, stride, 1, 1).unwrap();
                        let cols = patches(&x, k, stride, pad, false).unwrap();
                        let wm = wt.reshape((1, 3, 2 * k * k)).unwrap().broadcast_as((2, 3, 2 * k * k)).unwrap();
                        let ours = wm.contiguous().unwrap().matmul(&cols).unwrap().reshape(native.dims()).unwrap();
                        let native = native.detach();
                        assert!(max_abs(&ours, &native) < 1e-12, "k{k} s{stride} p{pad} {h}x{w}");
                        // the native strided backward mis-shapes some gradients, so
                        // the reference is built from differentiable slicing
                        let (ho, wo) = (native.dim(2).unwrap(), native.dim(3).unwrap());
                        let xp = x.pad_with_zeros(2, pad, pad).unwrap().pad_with_zeros(3, pad, pad).unwrap();
                        let pick = |n: usize, off: usize| {
                            let idx: Vec<u32> = (0..n).map(|i| (i * stride + off) as u32).collect();
                            Tensor::new(idx, &dev).unwrap()
                        };
                        let mut taps = Vec::new();
                        for c in 0..2 {
                            for t in 0..k * k {
                                let v = xp
                                    .narrow(1, c, 1)
                                    .unwrap()
                                    .contiguous()
                                    .unwrap()
                                    .index_select(&pick(ho, t / k), 2)
                                    .unwrap()
                                    .index_select(&pick(wo, t % k), 3)
                                    .unwrap();
                                taps.push(v.reshape((2, 1, ho * wo)).unwrap());
                            }
                        }
                        let reference = Tensor::cat(&taps, 1).unwrap();
                        assert!(max_abs(&reference, &cols) < 1e-15);
                        let up = Tensor::randn(0f64, 1.0, cols.dims(), &dev).unwrap();
                        let g1 = (reference * &up).unwrap().sum_all().unwrap().backward().unwrap();
                        let g2 = (cols * &up).unwrap().sum_all().unwrap().backward().unwrap();
                        assert!(max_abs(g1.get(&x).unwrap(), g2.get(&x).unwrap()) < 1e-12);
                    }
                }
            }
        }
    }
}
