//! Frozen joint image/text embedding space and the learnable prompt bank.
//!
//! The encoders are seeded random-feature maps with a CLIP-like interface:
//! images and token matrices both land on the unit sphere in `R^D`, so
//! cosine similarity is a dot product. Their weights are plain tensors, never
//! registered as trainable variables.
//!
//! The image path is a fixed low-level stage (oriented Gaussian-derivative
//! and blob filters on luminance, plus local brightness and saturation),
//! a random 1x1 mixing layer with `tanh`, mean pooling, and a projection.
//! Pooled random features mostly vary with scene content, which would drown
//! out the weather cues a pretrained encoder picks up, so the projection is
//! preceded by whitening against the feature spread over a seeded set of
//! clean synthetic scenes (no weather, no labels).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Mutex, OnceLock};

use candle_core::{DType, Tensor, Var};

use crate::checkpoint::{self, NamedArrays};
use crate::tensor::{l2_normalize_last, randn};
use crate::{Error, Result, Weather};

pub const DEFAULT_TOKENS: usize = 16;
pub const DEFAULT_WIDTH: usize = 512;
/// Smallest accepted image side.
pub const MIN_IMAGE_SIDE: usize = 8;
pub const PROMPT_INIT_STD: f64 = 0.02;
pub const DEFAULT_ENCODER_SEED: u64 = 0x5eed_c11b;
const FILTER_RADIUS: usize = 4;
const FILTER_ORIENTATIONS: usize = 8;
const FILTER_SCALES: [f64; 2] = [1.0, 2.0];
/// Spatial stride of the low-level stage.
const LOCAL_STRIDE: usize = 2;
const IMAGE_HIDDEN: usize = 512;
const CALIBRATION_SCENES: u64 = 512;
const CALIBRATION_SIZE: usize = 64;
/// Ridge added to the calibration covariance, relative to its mean eigenvalue.
const WHITEN_RIDGE: f64 = 1e-2;
const BANK_FORMAT: &str = "1";

/// Seeded, immutable image and text encoders.
#[derive(Clone)]
pub struct FrozenEncoders {
    seed: u64,
    width: usize,
    tokens: usize,
    // image path: filter bank -> 1x1 mix -> tanh -> mean pool -> centre -> projection
    filters: Tensor,
    mix_weight: Tensor,
    mix_bias: Tensor,
    image_mean: Tensor,
    image_proj: Tensor,
    // text path: positional offset -> token linear -> tanh -> mean -> projection
    positions: Tensor,
    token_weight: Tensor,
    token_bias: Tensor,
    text_proj: Tensor,
}

impl FrozenEncoders {
    /// Builds (or fetches from a per-process cache) the encoders for `seed`.
    /// Construction includes a calibration pass over synthetic scenes.
    pub fn new(seed: u64, tokens: usize, width: usize, dtype: DType) -> Result<Self> {
        static CACHE: OnceLock<Mutex<HashMap<(u64, usize, usize, DType), FrozenEncoders>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let key = (seed, tokens, width, dtype);
        if let Some(enc) = cache.lock().expect("encoder cache poisoned").get(&key) {
            return Ok(enc.clone());
        }
        let enc = Self::build(seed, tokens, width, dtype)?;
        cache.lock().expect("encoder cache poisoned").insert(key, enc.clone());
        Ok(enc)
    }

    fn build(seed: u64, tokens: usize, width: usize, dtype: DType) -> Result<Self> {
        if tokens == 0 || width == 0 {
            return Err(Error::InvalidArgument("encoder dims must be positive".into()));
        }
        let mut rng = crate::rng::stream(seed, "frozen-encoders", 0);
        let filters = filter_bank(dtype)?;
        let local = filters.dim(0)? + 2;
        let mix_weight = randn(&mut rng, &[local, IMAGE_HIDDEN], dtype)?.affine(2.0 / (local as f64).sqrt(), 0.0)?;
        let mix_bias = randn(&mut rng, &[IMAGE_HIDDEN], dtype)?.affine(0.5, 0.0)?;
        let random_proj = randn(&mut rng, &[IMAGE_HIDDEN, width], DType::F64)?
            .affine(1.0 / (IMAGE_HIDDEN as f64).sqrt(), 0.0)?;
        let positions = randn(&mut rng, &[tokens, width], dtype)?.affine(PROMPT_INIT_STD, 0.0)?;
        let token_weight =
            randn(&mut rng, &[width, width], dtype)?.affine(10.0 / (width as f64).sqrt(), 0.0)?;
        let token_bias = randn(&mut rng, &[width], dtype)?.affine(0.3, 0.0)?;
        let text_proj =
            randn(&mut rng, &[width, width], dtype)?.affine(1.0 / (width as f64).sqrt(), 0.0)?;
        let (mean, whitening) = calibrate(seed, &filters, &mix_weight, &mix_bias)?;
        let image_mean = mean.to_dtype(dtype)?;
        let image_proj = whitening.matmul(&random_proj)?.to_dtype(dtype)?;
        Ok(Self {
            seed,
            width,
            tokens,
            filters,
            mix_weight,
            mix_bias,
            image_mean,
            image_proj,
            positions,
            token_weight,
            token_bias,
            text_proj,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dtype(&self) -> DType {
        self.mix_weight.dtype()
    }

    fn parameters(&self) -> BTreeMap<String, Tensor> {
        [
            ("image.filters", &self.filters),
            ("image.mix_weight", &self.mix_weight),
            ("image.mix_bias", &self.mix_bias),
            ("image.mean", &self.image_mean),
            ("image.proj", &self.image_proj),
            ("text.positions", &self.positions),
            ("text.token_weight", &self.token_weight),
            ("text.token_bias", &self.token_bias),
            ("text.proj", &self.text_proj),
        ]
        .into_iter()
        .map(|(k, t)| (k.to_string(), t.clone()))
        .collect()
    }

    /// SHA-256 of every encoder weight; unchanged by any amount of prompt training.
    pub fn digest(&self) -> Result<String> {
        crate::params::digest_tensors(&self.parameters())
    }

    /// Embeds a batch `[B, 3, H, W]` of images in `[0, 1]`. Rows are unit length.
    pub fn encode_images(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(Error::Shape(format!(
                "image {h}x{w} smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
            )));
        }
        let images = images.to_dtype(self.dtype())?;
        let pooled = pooled_features(&images, &self.filters, &self.mix_weight, &self.mix_bias)?;
        l2_normalize_last(&pooled.broadcast_sub(&self.image_mean)?.matmul(&self.image_proj)?)
    }

    /// Single image `[3, H, W]` to a unit `D`-vector.
    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.encode_images(&image.unsqueeze(0)?)?.squeeze(0)?)
    }

    /// Embeds prompts `[K, N, D]` to unit rows `[K, D]`; differentiable in the prompts.
    pub fn encode_prompts(&self, prompts: &Tensor) -> Result<Tensor> {
        let (k, n, d) = prompts.dims3()?;
        if n != self.tokens || d != self.width {
            return Err(Error::Shape(format!(
                "prompt shape {n}x{d}, encoder expects {}x{}",
                self.tokens, self.width
            )));
        }
        let x = prompts.broadcast_add(&self.positions.unsqueeze(0)?)?;
        let h = x
            .reshape((k * n, d))?
            .matmul(&self.token_weight)?
            .broadcast_add(&self.token_bias)?
            .tanh()?;
        let pooled = h.reshape((k, n, d))?.mean(1)?;
        l2_normalize_last(&pooled.matmul(&self.text_proj)?)
    }

    /// Single prompt `[N, D]` to a unit `D`-vector.
    pub fn encode_prompt(&self, prompt: &Tensor) -> Result<Tensor> {
        if prompt.rank() != 2 {
            return Err(Error::Shape(format!("prompt must be N x D, got {:?}", prompt.dims())));
        }
        Ok(self.encode_prompts(&prompt.unsqueeze(0)?)?.squeeze(0)?)
    }
}

/// Zero-mean, unit-L1 `[K, 1, 9, 9]` kernels: first and second directional
/// Gaussian derivatives at each orientation and scale, plus a Laplacian of
/// Gaussian per scale.
fn filter_bank(dtype: DType) -> Result<Tensor> {
    let r = FILTER_RADIUS as i64;
    let side = 2 * FILTER_RADIUS + 1;
    let mut kernels: Vec<Vec<f64>> = Vec::new();
    for sigma in FILTER_SCALES {
        let s2 = sigma * sigma;
        for o in 0..FILTER_ORIENTATIONS {
            let (sin, cos) = (std::f64::consts::PI * o as f64 / FILTER_ORIENTATIONS as f64).sin_cos();
            let mut d1 = Vec::with_capacity(side * side);
            let mut d2 = Vec::with_capacity(side * side);
            for y in -r..=r {
                for x in -r..=r {
                    let (xf, yf) = (x as f64, y as f64);
                    let u = cos * xf + sin * yf;
                    let g = (-(xf * xf + yf * yf) / (2.0 * s2)).exp();
                    d1.push(-u / s2 * g);
                    d2.push((u * u / (s2 * s2) - 1.0 / s2) * g);
                }
            }
            kernels.push(d1);
            kernels.push(d2);
        }
        let mut log = Vec::with_capacity(side * side);
        for y in -r..=r {
            for x in -r..=r {
                let r2 = (x * x + y * y) as f64;
                log.push((r2 / (s2 * s2) - 2.0 / s2) * (-r2 / (2.0 * s2)).exp());
            }
        }
        kernels.push(log);
    }
    let count = kernels.len();
    let mut flat = Vec::with_capacity(count * side * side);
    for k in kernels {
        let mean = k.iter().sum::<f64>() / k.len() as f64;
        let l1: f64 = k.iter().map(|v| (v - mean).abs()).sum();
        // responses of a unit step land around +-1
        flat.extend(k.iter().map(|v| 8.0 * (v - mean) / l1));
    }
    crate::tensor::from_f64(flat, &[count, 1, side, side], dtype)
}

/// `[B, 3, H, W]` in `[0, 1]` to pooled hidden features `[B, IMAGE_HIDDEN]`.
fn pooled_features(images: &Tensor, filters: &Tensor, mix_weight: &Tensor, mix_bias: &Tensor) -> Result<Tensor> {
    let luma = images.mean_keepdim(1)?;
    let responses = luma.conv2d(filters, FILTER_RADIUS, LOCAL_STRIDE, 1, 1)?;
    let (_, _, h, w) = responses.dims4()?;
    // pad so pooled brightness/saturation maps match the strided response grid
    let pool = |t: &Tensor| -> Result<Tensor> {
        let t = t.pad_with_same(2, 0, h * LOCAL_STRIDE - t.dim(2)?.min(h * LOCAL_STRIDE))?;
        let t = t.pad_with_same(3, 0, w * LOCAL_STRIDE - t.dim(3)?.min(w * LOCAL_STRIDE))?;
        let t = t.narrow(2, 0, h * LOCAL_STRIDE)?.narrow(3, 0, w * LOCAL_STRIDE)?;
        Ok(t.avg_pool2d(LOCAL_STRIDE)?)
    };
    let brightness = pool(&luma.affine(1.0, -0.5)?)?;
    let saturation = pool(&images.max_keepdim(1)?.broadcast_sub(&images.min_keepdim(1)?)?)?;
    let local = Tensor::cat(&[responses, brightness, saturation], 1)?;
    let (b, k, h, w) = local.dims4()?;
    let hidden = local
        .permute((0, 2, 3, 1))?
        .reshape((b * h * w, k))?
        .matmul(mix_weight)?
        .broadcast_add(mix_bias)?
        .tanh()?;
    Ok(hidden.reshape((b, h * w, IMAGE_HIDDEN))?.mean(1)?)
}

/// Mean and symmetric inverse square root (f64) of the
/// pooled features over seeded clean scenes.
fn calibrate(seed: u64, filters: &Tensor, mix_weight: &Tensor, mix_bias: &Tensor) -> Result<(Tensor, Tensor)> {
    use crate::weathergen::{synth_clean, SceneSpec};
    use nalgebra::{DMatrix, DVector};

    let scenes: Vec<crate::img::RgbImage> = (0..CALIBRATION_SCENES)
        .map(|i| {
            synth_clean(&SceneSpec {
                height: CALIBRATION_SIZE,
                width: CALIBRATION_SIZE,
                seed: crate::rng::child_seed(seed, "encoder-calibration", i),
            })
        })
        .collect();
    let mut rows = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(64) {
        let refs: Vec<&crate::img::RgbImage> = chunk.iter().collect();
        let batch = crate::img::RgbImage::stack(&refs, mix_weight.dtype())?;
        rows.extend(pooled_features(&batch, filters, mix_weight, mix_bias)?.to_dtype(DType::F64)?.to_vec2::<f64>()?);
    }
    let n = rows.len() as f64;
    let mut mean = DVector::<f64>::zeros(IMAGE_HIDDEN);
    for r in &rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n;
    let mut cov = DMatrix::<f64>::zeros(IMAGE_HIDDEN, IMAGE_HIDDEN);
    for r in &rows {
        let v = DVector::from_column_slice(r) - &mean;
        cov.syger(1.0 / n, &v, &v, 1.0);
    }
    let ridge = WHITEN_RIDGE * cov.trace() / IMAGE_HIDDEN as f64;
    for i in 0..IMAGE_HIDDEN {
        cov[(i, i)] += ridge;
    }
    let eig = cov.symmetric_eigen();
    let scale = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / e.sqrt()));
    let inv_sqrt = &eig.eigenvectors * scale * eig.eigenvectors.transpose();
    // nalgebra is column-major; the matrix is symmetric so either order works
    let mean = Tensor::from_vec(mean.as_slice().to_vec(), IMAGE_HIDDEN, &crate::tensor::cpu())?;
    let inv_sqrt = Tensor::from_vec(inv_sqrt.as_slice().to_vec(), (IMAGE_HIDDEN, IMAGE_HIDDEN), &crate::tensor::cpu())?;
    Ok((mean, inv_sqrt))
}

/// Cosine similarity of two nonzero vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of {} vs {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Three learnable token matrices in label order (rain, haze, snow).
#[derive(Debug, Clone)]
pub struct PromptBank {
    prompts: [Var; 3],
    seed: u64,
    encoder_seed: u64,
}

impl PromptBank {
    /// Zero-mean Gaussian entries with std 0.02.
    pub fn init(seed: u64, tokens: usize, width: usize, dtype: DType) -> Result<Self> {
        let mut rng = crate::rng::stream(seed, "prompt-init", 0);
        let mut make = || -> Result<Var> {
            let t = randn(&mut rng, &[tokens, width], dtype)?.affine(PROMPT_INIT_STD, 0.0)?;
            Ok(Var::from_tensor(&t)?)
        };
        Ok(Self {
            prompts: [make()?, make()?, make()?],
            seed,
            encoder_seed: DEFAULT_ENCODER_SEED,
        })
    }

    pub fn with_encoder_seed(mut self, encoder_seed: u64) -> Self {
        self.encoder_seed = encoder_seed;
        self
    }

    pub fn encoder_seed(&self) -> u64 {
        self.encoder_seed
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tokens(&self) -> usize {
        self.prompts[0].dims()[0]
    }

    pub fn width(&self) -> usize {
        self.prompts[0].dims()[1]
    }

    pub fn prompt(&self, w: Weather) -> &Var {
        &self.prompts[w.index()]
    }

    pub fn vars(&self) -> &[Var; 3] {
        &self.prompts
    }

    /// `[3, N, D]` stack in label order.
    pub fn stacked(&self) -> Result<Tensor> {
        let t: Vec<&Tensor> = self.prompts.iter().map(|v| v.as_tensor()).collect();
        Ok(Tensor::stack(&t, 0)?)
    }

    /// Text embeddings `[3, D]` of all prompts.
    pub fn encode(&self, enc: &FrozenEncoders) -> Result<Tensor> {
        enc.encode_prompts(&self.stacked()?)
    }

    pub fn deep_copy(&self) -> Result<Self> {
        let copy = |v: &Var| -> Result<Var> { Ok(Var::from_tensor(&v.as_tensor().copy()?)?) };
        Ok(Self {
            prompts: [copy(&self.prompts[0])?, copy(&self.prompts[1])?, copy(&self.prompts[2])?],
            seed: self.seed,
            encoder_seed: self.encoder_seed,
        })
    }

    pub fn is_finite(&self) -> Result<bool> {
        for p in &self.prompts {
            if crate::tensor::to_f64_vec(p.as_tensor())?.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut data = NamedArrays::default();
        for w in Weather::ALL {
            data.arrays
                .insert(format!("prompt_{}", w.name()), self.prompt(w).as_tensor().clone());
        }
        let meta = [
            ("kind", "prompt_bank".to_string()),
            ("format_version", BANK_FORMAT.to_string()),
            ("seed", self.seed.to_string()),
            ("encoder_seed", self.encoder_seed.to_string()),
            ("N", self.tokens().to_string()),
            ("D", self.width().to_string()),
        ];
        for (k, v) in meta {
            data.metadata.insert(k.to_string(), v);
        }
        checkpoint::save(path, &data)
    }

    /// Bank from `{rain, haze, snow}` keyed matrices of equal shape.
    pub fn from_arrays(arrays: &BTreeMap<String, Tensor>, seed: u64, encoder_seed: u64) -> Result<Self> {
        if arrays.len() != 3 {
            return Err(Error::Checkpoint(format!("prompt bank has {} entries, expected 3", arrays.len())));
        }
        let take = |w: Weather| -> Result<Var> {
            let t = arrays
                .get(w.name())
                .ok_or_else(|| Error::Checkpoint(format!("prompt bank lacks `{}`", w.name())))?;
            if t.rank() != 2 || t.dims() != arrays[Weather::Rain.name()].dims() {
                return Err(Error::Checkpoint(format!("prompt `{}` has shape {:?}", w.name(), t.dims())));
            }
            Ok(Var::from_tensor(t)?)
        };
        Ok(Self {
            prompts: [take(Weather::Rain)?, take(Weather::Haze)?, take(Weather::Snow)?],
            seed,
            encoder_seed,
        })
    }

    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let mut data = checkpoint::load(path)?;
        checkpoint::check_version(&data, "prompt_bank", BANK_FORMAT)?;
        let parse = |k: &str| -> Result<u64> {
            data.meta(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad metadata `{k}`")))
        };
        let (seed, encoder_seed) = (parse("seed")?, parse("encoder_seed")?);
        let (n, d) = (parse("N")? as usize, parse("D")? as usize);
        let mut take = |w: Weather| -> Result<Var> {
            let t = data.take(&format!("prompt_{}", w.name()))?;
            if t.dims() != [n, d] {
                return Err(Error::Checkpoint(format!(
                    "prompt_{} has shape {:?}, expected [{n}, {d}]",
                    w.name(),
                    t.dims()
                )));
            }
            Ok(Var::from_tensor(&t.to_dtype(dtype)?)?)
        };
        let prompts = [take(Weather::Rain)?, take(Weather::Haze)?, take(Weather::Snow)?];
        Ok(Self {
            prompts,
            seed,
            encoder_seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::to_f64_vec;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn prompt_init_is_seeded() {
        let a = PromptBank::init(1, 16, 512, DType::F64).unwrap();
        let b = PromptBank::init(1, 16, 512, DType::F64).unwrap();
        let c = PromptBank::init(2, 16, 512, DType::F64).unwrap();
        let va = to_f64_vec(&a.stacked().unwrap()).unwrap();
        assert_eq!(va, to_f64_vec(&b.stacked().unwrap()).unwrap());
        assert_ne!(va, to_f64_vec(&c.stacked().unwrap()).unwrap());
        for w in Weather::ALL {
            assert_eq!(a.prompt(w).dims(), &[16, 512]);
        }
        let mean = va.iter().sum::<f64>() / va.len() as f64;
        let std = (va.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / va.len() as f64).sqrt();
        assert!(mean.abs() < 1e-3 && (std - 0.02).abs() < 1e-3, "{mean} {std}");
    }

    #[test]
    fn encodings_are_unit_and_deterministic() {
        let enc = FrozenEncoders::new(3, 16, 512, DType::F64).unwrap();
        let mut rng = crate::rng::stream(0, "img", 0);
        let img = crate::tensor::randn(&mut rng, &[3, 16, 24], DType::F64).unwrap();
        let a = to_f64_vec(&enc.encode_image(&img).unwrap()).unwrap();
        let b = to_f64_vec(&enc.encode_image(&img).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 512);
        assert!((norm(&a) - 1.0).abs() < 1e-6);

        let zero = Tensor::zeros((16, 512), DType::F64, &candle_core::Device::Cpu).unwrap();
        let z = to_f64_vec(&enc.encode_prompt(&zero).unwrap()).unwrap();
        assert!(z.iter().all(|x| x.is_finite()));
        assert!((norm(&z) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn encoder_rejects_bad_shapes() {
        let enc = FrozenEncoders::new(3, 16, 64, DType::F32).unwrap();
        let small = Tensor::zeros((3, 4, 16), DType::F32, &candle_core::Device::Cpu).unwrap();
        assert!(matches!(enc.encode_image(&small), Err(Error::Shape(_))));
        let bad = Tensor::zeros((15, 64), DType::F32, &candle_core::Device::Cpu).unwrap();
        assert!(matches!(enc.encode_prompt(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn cosine_basics() {
        let v = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn bank_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.safetensors");
        let bank = PromptBank::init(9, 16, 512, DType::F32).unwrap().with_encoder_seed(77);
        bank.save(&path).unwrap();
        let back = PromptBank::load(&path, DType::F32).unwrap();
        assert_eq!(back.encoder_seed(), 77);
        assert_eq!(back.seed(), 9);
        assert_eq!(
            to_f64_vec(&bank.stacked().unwrap()).unwrap(),
            to_f64_vec(&back.stacked().unwrap()).unwrap()
        );
    }
}
