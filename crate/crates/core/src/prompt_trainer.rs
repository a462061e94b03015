//! Stage 1: align one learnable prompt per weather class with the frozen
//! image embeddings through a softmax over cosine similarities.

use candle_core::{DType, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{FrozenEncoders, PromptBank};
use crate::img::RgbImage;
use crate::params::{Adam, ParamStore};
use crate::tensor::{from_f64, scalar_f64, softmax_last};
use crate::weathergen::PairImages;
use crate::{Error, Result, Weather};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Images are resized to this side before encoding.
    pub image_size: usize,
    pub seed: u64,
    /// Divides the cosine logits; 1.0 leaves them untouched.
    pub temperature: f64,
    /// Augmented views per training image in the cached embedding pool.
    pub views_per_image: usize,
    pub augment: bool,
    pub log_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            iterations: 8000,
            lr: 5e-6,
            batch_size: 64,
            image_size: 224,
            seed: 0,
            temperature: 1.0,
            views_per_image: 4,
            augment: true,
            log_every: 100,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.batch_size == 0 || self.image_size == 0 || self.views_per_image == 0 {
            return Err(Error::Config("stage-1 settings must be positive".into()));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} does not fit a TOML integer (max {})", self.seed, i64::MAX)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// `[B, 3]` cosine similarities between image embeddings and the encoded
/// prompts, columns in label order.
pub fn similarity_logits(enc: &FrozenEncoders, bank: &PromptBank, images: &Tensor) -> Result<Tensor> {
    if images.dim(0)? == 0 {
        return Err(Error::InvalidArgument("empty image batch".into()));
    }
    let img = enc.encode_images(images)?;
    logits_from_embeddings(&img, &bank.encode(enc)?)
}

/// Unit image rows `[B, D]` against unit text rows `[3, D]`.
pub fn logits_from_embeddings(image_emb: &Tensor, text_emb: &Tensor) -> Result<Tensor> {
    Ok(image_emb.matmul(&text_emb.t()?)?)
}

fn label_tensor(labels: &[usize], classes: usize, dtype: DType) -> Result<Tensor> {
    let mut onehot = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::InvalidArgument(format!("label {l} outside [0, {classes})")));
        }
        onehot[i * classes + l] = 1.0;
    }
    from_f64(onehot, &[labels.len(), classes], dtype)
}

/// Mean negative log-likelihood of the true class under a row softmax.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, k) = logits.dims2()?;
    if b != labels.len() {
        return Err(Error::Shape(format!("{b} logit rows for {} labels", labels.len())));
    }
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let onehot = label_tensor(labels, k, logits.dtype())?;
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let log_probs = shifted.broadcast_sub(&lse)?;
    Ok((log_probs * onehot)?.sum_all()?.affine(-1.0 / b as f64, 0.0)?)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn classify_logits(row: &[f64]) -> Result<Weather> {
    Weather::from_index(argmax_lowest(row))
}

/// Argmax class of the image's cosine similarities.
pub fn classify_degradation(enc: &FrozenEncoders, bank: &PromptBank, image: &Tensor) -> Result<Weather> {
    let batch = if image.rank() == 3 { image.unsqueeze(0)? } else { image.clone() };
    let logits = similarity_logits(enc, bank, &batch)?;
    let row = crate::tensor::to_f64_vec(&logits.get(0)?)?;
    classify_logits(&row)
}

/// Fraction of `images` whose argmax class matches their label.
pub fn accuracy(enc: &FrozenEncoders, bank: &PromptBank, images: &[PairImages], image_size: usize) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images to score".into()));
    }
    let text = bank.encode(enc)?;
    let mut correct = 0usize;
    for chunk in images.chunks(64) {
        let resized: Vec<RgbImage> = chunk.iter().map(|p| p.degraded.resize(image_size, image_size)).collect();
        let refs: Vec<&RgbImage> = resized.iter().collect();
        let emb = enc.encode_images(&RgbImage::stack(&refs, enc.dtype())?)?;
        let logits = logits_from_embeddings(&emb, &text)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        for (row, p) in logits.iter().zip(chunk) {
            if argmax_lowest(row) == p.label.index() {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Random flip, small rotation and zoom.
pub fn augment<R: Rng + ?Sized>(img: &RgbImage, rng: &mut R) -> RgbImage {
    let flipped = if rng.random_bool(0.5) { img.flip_horizontal() } else { img.clone() };
    let angle = rng.random_range(-10.0..10.0);
    let zoom = rng.random_range(1.0..1.15);
    flipped.rotate_zoom(angle, zoom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1LogRecord {
    pub iter: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub bank: PromptBank,
    /// Loss at every iteration.
    pub losses: Vec<f64>,
    /// Periodic records (iteration, loss, batch accuracy).
    pub log: Vec<Stage1LogRecord>,
}

/// Frozen embeddings of augmented training views, computed once.
struct EmbeddingPool {
    embeddings: Tensor,
    labels: Vec<usize>,
}

fn build_pool(cfg: &Stage1Config, enc: &FrozenEncoders, data: &[PairImages]) -> Result<EmbeddingPool> {
    let mut views = Vec::with_capacity(data.len() * cfg.views_per_image);
    let mut labels = Vec::with_capacity(views.capacity());
    for (i, p) in data.iter().enumerate() {
        let mut rng = crate::rng::stream(cfg.seed, "stage1-augment", i as u64);
        for v in 0..cfg.views_per_image {
            let img = if cfg.augment && v > 0 { augment(&p.degraded, &mut rng) } else { p.degraded.clone() };
            views.push(img.resize(cfg.image_size, cfg.image_size));
            labels.push(p.label.index());
        }
    }
    let mut chunks = Vec::new();
    for chunk in views.chunks(64) {
        let refs: Vec<&RgbImage> = chunk.iter().collect();
        chunks.push(enc.encode_images(&RgbImage::stack(&refs, enc.dtype())?)?);
    }
    Ok(EmbeddingPool {
        embeddings: Tensor::cat(&chunks, 0)?,
        labels,
    })
}

/// Trains a copy of `bank` on the degraded images of `data`. Only prompt
/// entries change; the encoders are read-only.
pub fn train_prompts(
    cfg: &Stage1Config,
    enc: &FrozenEncoders,
    bank: &PromptBank,
    data: &[PairImages],
) -> Result<Stage1Outcome> {
    cfg.validate()?;
    for w in Weather::ALL {
        if !data.iter().any(|p| p.label == w) {
            return Err(Error::Data(format!("stage-1 data has no `{w}` images")));
        }
    }
    let bank = bank.deep_copy()?;
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut log = Vec::new();
    if cfg.iterations == 0 {
        return Ok(Stage1Outcome { bank, losses, log });
    }
    let pool = build_pool(cfg, enc, data)?;
    let mut store = ParamStore::new(enc.dtype());
    for w in Weather::ALL {
        store.insert(&format!("prompt_{}", w.name()), bank.prompt(w).clone())?;
    }
    let mut adam = Adam::new(cfg.lr, 0.9, 0.999);
    let n = pool.labels.len();
    for iter in 0..cfg.iterations {
        let mut rng = crate::rng::stream(cfg.seed, "stage1-batch", iter as u64);
        let idx: Vec<u32> = (0..cfg.batch_size).map(|_| rng.random_range(0..n) as u32).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| pool.labels[i as usize]).collect();
        let emb = pool
            .embeddings
            .index_select(&Tensor::new(idx.as_slice(), &candle_core::Device::Cpu)?, 0)?;
        let logits = logits_from_embeddings(&emb, &bank.encode(enc)?)?;
        let loss = cross_entropy_loss(&logits.affine(1.0 / cfg.temperature, 0.0)?, &labels)?;
        let value = scalar_f64(&loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("stage-1 loss at iteration {iter}")));
        }
        let grads = loss.backward()?;
        adam.step(&store, &grads)?;
        losses.push(value);
        if (iter + 1) % cfg.log_every.max(1) == 0 || iter + 1 == cfg.iterations {
            let rows = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            let hits = rows
                .iter()
                .zip(&labels)
                .filter(|(r, &l)| argmax_lowest(r) == l)
                .count();
            log.push(Stage1LogRecord {
                iter: iter + 1,
                loss: value,
                accuracy: hits as f64 / labels.len() as f64,
            });
        }
    }
    Ok(Stage1Outcome { bank, losses, log })
}

/// Softmax probabilities of a logit matrix, for diagnostics.
pub fn probabilities(logits: &Tensor) -> Result<Tensor> {
    softmax_last(logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
        from_f64(v, shape, DType::F64).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln3() {
        let logits = t(vec![0.3; 6], &[2, 3]);
        let l = scalar_f64(&cross_entropy_loss(&logits, &[0, 2]).unwrap()).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn known_triplet_loss() {
        let logits = t(vec![1.0, -1.0, -1.0], &[1, 3]);
        let l = scalar_f64(&cross_entropy_loss(&logits, &[0]).unwrap()).unwrap();
        let e = std::f64::consts::E;
        let want = -(e / (e + 2.0 / e)).ln();
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.2395).abs() < 1e-4);
    }

    #[test]
    fn confident_prediction_has_vanishing_loss() {
        let logits = t(vec![60.0, -60.0, -60.0], &[1, 3]);
        let l = scalar_f64(&cross_entropy_loss(&logits, &[0]).unwrap()).unwrap();
        assert!(l < 1e-40);
    }

    #[test]
    fn invalid_label_is_rejected() {
        let logits = t(vec![0.0; 3], &[1, 3]);
        assert!(cross_entropy_loss(&logits, &[3]).is_err());
        assert!(cross_entropy_loss(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn argmax_rules() {
        assert_eq!(classify_logits(&[0.9, 0.1, 0.1]).unwrap(), Weather::Rain);
        assert_eq!(classify_logits(&[0.5, 0.5, 0.2]).unwrap(), Weather::Rain);
        assert_eq!(classify_logits(&[0.1, 0.5, 0.5]).unwrap(), Weather::Haze);
        assert_eq!(classify_logits(&[0.1, 0.2, 0.5]).unwrap(), Weather::Snow);
    }
}
