//! Full-reference metrics and the evaluation runner.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use candle_core::DType;

use crate::diffusion::{implicit_sample, DiffusionSchedule, ResidualPredictor, SamplingStrategy};
use crate::img::RgbImage;
use crate::weathergen::PairImages;
use crate::{Error, Result, Weather};

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same(a, b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data.len() as f64)
}

pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB)
}

/// `10 log10(range^2 / MSE)`, capped at 100 dB.
pub fn psnr(a: &RgbImage, b: &RgbImage, data_range: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, data_range))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a single plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM (11x11 Gaussian, sigma 1.5, K1 0.01, K2 0.03, L 1) on
/// valid windows, per channel, averaged over RGB.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = (a.height, a.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = (0..h * w).map(|i| a.data[i * 3 + c]).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b.data[i * 3 + c]).collect();
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let e_aa = filter_valid(&aa, h, w, &k);
        let e_bb = filter_valid(&bb, h, w, &k);
        let e_ab = filter_valid(&ab, h, w, &k);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

pub const REPORT_VERSION: u32 = 1;

/// Scores of one restored image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub label: Weather,
    pub psnr_input: f64,
    pub psnr_restored: f64,
    pub ssim_input: f64,
    pub ssim_restored: f64,
}

/// Means over a group of images; deltas are restored minus input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub psnr_input: f64,
    pub psnr_restored: f64,
    pub psnr_delta: f64,
    pub ssim_input: f64,
    pub ssim_restored: f64,
    pub ssim_delta: f64,
}

impl GroupStats {
    fn from_scores<'a>(scores: impl Iterator<Item = &'a ImageScore>) -> Option<Self> {
        let mut n = 0usize;
        let mut sums = [0.0f64; 4];
        for s in scores {
            n += 1;
            sums[0] += s.psnr_input;
            sums[1] += s.psnr_restored;
            sums[2] += s.ssim_input;
            sums[3] += s.ssim_restored;
        }
        if n == 0 {
            return None;
        }
        let m = sums.map(|v| v / n as f64);
        Some(Self {
            count: n,
            psnr_input: m[0],
            psnr_restored: m[1],
            psnr_delta: m[1] - m[0],
            ssim_input: m[2],
            ssim_restored: m[3],
            ssim_delta: m[3] - m[2],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub samples: usize,
    pub steps: usize,
    pub strategy: SamplingStrategy,
    pub seed: u64,
    /// Digest of the evaluated weights and configuration.
    pub config_digest: String,
    pub overall: GroupStats,
    /// `None` marks a class with no images in the split.
    pub per_class: BTreeMap<Weather, Option<GroupStats>>,
    pub absent_classes: Vec<Weather>,
}

impl EvalReport {
    pub fn from_scores(
        scores: &[ImageScore],
        steps: usize,
        strategy: SamplingStrategy,
        seed: u64,
        config_digest: &str,
    ) -> Result<Self> {
        let overall = GroupStats::from_scores(scores.iter())
            .ok_or_else(|| Error::Data("nothing to evaluate".into()))?;
        let per_class: BTreeMap<Weather, Option<GroupStats>> = Weather::ALL
            .into_iter()
            .map(|w| (w, GroupStats::from_scores(scores.iter().filter(|s| s.label == w))))
            .collect();
        let absent_classes = per_class.iter().filter(|(_, v)| v.is_none()).map(|(w, _)| *w).collect();
        Ok(Self {
            version: REPORT_VERSION,
            samples: scores.len(),
            steps,
            strategy,
            seed,
            config_digest: config_digest.to_string(),
            overall,
            per_class,
            absent_classes,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(format!("report serialization: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Per-image scores as CSV with a header row.
pub fn write_scores_csv(path: &Path, scores: &[ImageScore]) -> Result<()> {
    let mut out = String::from("id,label,psnr_input,psnr_restored,ssim_input,ssim_restored\n");
    for s in scores {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            s.id, s.label, s.psnr_input, s.psnr_restored, s.ssim_input, s.ssim_restored
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub steps: usize,
    pub strategy: SamplingStrategy,
    pub seed: u64,
    pub dtype: DType,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            steps: 3,
            strategy: SamplingStrategy::default(),
            seed: 0,
            dtype: DType::F32,
        }
    }
}

/// Restores one degraded image with `steps` implicit sampling steps and
/// clamps the result to `[0, 1]`.
pub fn restore_image<M: ResidualPredictor + ?Sized>(
    model: &mut M,
    schedule: &DiffusionSchedule,
    degraded: &RgbImage,
    opts: &EvalOptions,
    seed: u64,
) -> Result<RgbImage> {
    let input = degraded.to_tensor(opts.dtype)?.unsqueeze(0)?;
    let out = implicit_sample(schedule, model, &input, opts.steps, opts.strategy, seed)?;
    Ok(RgbImage::from_tensor(&out)?.clamp01())
}

/// Restores and scores every `(id, pair)`; image `i` uses noise seed
/// `child_seed(opts.seed, "eval", i)`.
pub fn evaluate<M: ResidualPredictor + ?Sized>(
    model: &mut M,
    schedule: &DiffusionSchedule,
    samples: &[(String, PairImages)],
    opts: &EvalOptions,
) -> Result<Vec<ImageScore>> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let mut scores = Vec::with_capacity(samples.len());
    for (i, (id, pair)) in samples.iter().enumerate() {
        let seed = crate::rng::child_seed(opts.seed, "eval", i as u64);
        let restored = restore_image(model, schedule, &pair.degraded, opts, seed)?;
        scores.push(ImageScore {
            id: id.clone(),
            label: pair.label,
            psnr_input: psnr(&pair.clean, &pair.degraded, 1.0)?,
            psnr_restored: psnr(&pair.clean, &restored, 1.0)?,
            ssim_input: ssim(&pair.clean, &pair.degraded)?,
            ssim_restored: ssim(&pair.clean, &restored)?,
        });
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::img::RgbImage;
    use rand::Rng;

    fn textured(seed: u64, size: usize) -> RgbImage {
        crate::weathergen::synth_clean(&crate::weathergen::SceneSpec {
            height: size,
            width: size,
            seed,
        })
    }

    #[test]
    fn psnr_matches_formula() {
        let a = RgbImage::filled(4, 4, 0.5);
        let b = RgbImage::filled(4, 4, 0.6);
        // MSE 0.01 up to float rounding of 0.6 - 0.5
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr_from_mse(0.01, 1.0), 20.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_matches_scalar_oracle() {
        let mut rng = crate::rng::stream(3, "t", 0);
        let a = RgbImage::from_fn(9, 7, |_, _, _| rng.random());
        let b = RgbImage::from_fn(9, 7, |_, _, _| rng.random());
        let mut acc = 0.0;
        for y in 0..9 {
            for x in 0..7 {
                for c in 0..3 {
                    acc += (a.get(y, x, c) - b.get(y, x, c)).powi(2);
                }
            }
        }
        let want = 10.0 * (1.0 / (acc / (9.0 * 7.0 * 3.0))).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - want).abs() < 1e-9);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = textured(1, 32);
        let b = textured(2, 32);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let v = ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&v));
    }

    #[test]
    fn ssim_of_inverted_image_is_low() {
        let a = textured(5, 48);
        let inv = RgbImage::from_fn(48, 48, |y, x, c| 1.0 - a.get(y, x, c));
        assert!(ssim(&a, &inv).unwrap() < 0.5);
    }

    #[test]
    fn ssim_decreases_with_noise() {
        let a = textured(9, 48);
        let mut last = 1.0;
        for std in [0.01, 0.05, 0.1] {
            let mut rng = crate::rng::stream(11, "noise", 0);
            let noise = crate::rng::normal_vec(&mut rng, a.data.len());
            let mut b = a.clone();
            for (v, n) in b.data.iter_mut().zip(&noise) {
                *v += std * n;
            }
            let s = ssim(&a, &b).unwrap();
            assert!(s < last, "std {std}: {s} !< {last}");
            last = s;
        }
    }

    #[test]
    fn small_images_are_rejected() {
        let a = RgbImage::filled(10, 30, 0.5);
        assert!(ssim(&a, &a).is_err());
        assert!(psnr(&a, &RgbImage::filled(10, 29, 0.5), 1.0).is_err());
    }

    #[test]
    fn absent_classes_are_reported() {
        let score = |label| ImageScore {
            id: "x".into(),
            label,
            psnr_input: 20.0,
            psnr_restored: 25.0,
            ssim_input: 0.5,
            ssim_restored: 0.7,
        };
        let r = EvalReport::from_scores(&[score(Weather::Rain), score(Weather::Rain)], 3, SamplingStrategy::default(), 0, "d")
            .unwrap();
        assert_eq!(r.absent_classes, vec![Weather::Haze, Weather::Snow]);
        assert!(r.per_class[&Weather::Haze].is_none());
        let rain = r.per_class[&Weather::Rain].as_ref().unwrap();
        assert_eq!(rain.count, 2);
        assert!((rain.psnr_delta - 5.0).abs() < 1e-12);
        assert!(EvalReport::from_scores(&[], 3, SamplingStrategy::default(), 0, "d").is_err());
    }
}
