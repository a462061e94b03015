//! Plain RGB float images (row-major, interleaved) and PNG I/O.

use std::path::Path;

use candle_core::{DType, Tensor};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// `height * width * 3` values, channel fastest.
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut img = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    img.data[(y * width + x) * 3 + c] = f(y, x, c);
                }
            }
        }
        img
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * 3 + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    pub fn same_size(&self, other: &RgbImage) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x, c| self.get(y, self.width - 1 - x, c))
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w}@({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(h, w, |y, x, c| self.get(top + y, left + x, c)))
    }

    /// Bilinear sample with border clamping.
    pub fn sample_bilinear(&self, y: f64, x: f64, c: usize) -> f64 {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
        let bot = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Bilinear resize to `height x width` (pixel-centre aligned).
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Self::from_fn(height, width, |y, x, c| {
            self.sample_bilinear((y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5, c)
        })
    }

    /// Rotation about the centre with border clamping, then a centred zoom by `zoom >= 1`.
    pub fn rotate_zoom(&self, angle_deg: f64, zoom: f64) -> Self {
        let (cy, cx) = ((self.height as f64 - 1.0) / 2.0, (self.width as f64 - 1.0) / 2.0);
        let (s, c) = angle_deg.to_radians().sin_cos();
        Self::from_fn(self.height, self.width, |y, x, ch| {
            let (dy, dx) = ((y as f64 - cy) / zoom, (x as f64 - cx) / zoom);
            let sy = cy + c * dy - s * dx;
            let sx = cx + s * dy + c * dx;
            self.sample_bilinear(sy, sx, ch)
        })
    }

    /// `[3, H, W]` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let (h, w) = (self.height, self.width);
        let mut chw = vec![0.0; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    chw[c * h * w + y * w + x] = self.get(y, x, c);
                }
            }
        }
        crate::tensor::from_f64(chw, &[3, h, w], dtype)
    }

    /// Accepts `[3, H, W]` or `[1, 3, H, W]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let v = crate::tensor::to_f64_vec(&t)?;
        Ok(Self::from_fn(h, w, |y, x, c| v[c * h * w + y * w + x]))
    }

    pub fn stack(images: &[&RgbImage], dtype: DType) -> Result<Tensor> {
        let ts = images
            .iter()
            .map(|i| i.to_tensor(dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&ts, 0)?)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in buf.pixels_mut().enumerate() {
            for c in 0..3 {
                px.0[c] = (self.data[i * 3 + c].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let data = rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }
}
