//! Procedural paired data: seeded clean scenes and three weather overlays,
//! plus on-disk dataset generation with a line-delimited manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::img::RgbImage;
use crate::{Error, Result, Weather};

pub const MANIFEST_FILE: &str = "manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Low-frequency field in `[0, 1]` built from a few random plane waves.
fn smooth_field(h: usize, w: usize, rng: &mut ChaCha8Rng, waves: usize) -> Vec<f64> {
    let comps: Vec<(f64, f64, f64, f64)> = (0..waves)
        .map(|_| {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let freq: f64 = rng.random_range(0.5..2.5);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let amp: f64 = rng.random_range(0.3..1.0);
            (angle, freq, phase, amp)
        })
        .collect();
    let mut v: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
            comps
                .iter()
                .map(|(a, f, p, m)| {
                    m * (std::f64::consts::TAU * f * (x * a.cos() + y * a.sin()) + p).sin()
                })
                .sum()
        })
        .collect();
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    let span = (hi - lo).max(1e-12);
    for x in &mut v {
        *x = (*x - lo) / span;
    }
    v
}

/// Clean scene: shaded background, hard-edged rectangles and ellipses, fine texture.
pub fn synth_clean(spec: &SceneSpec) -> RgbImage {
    let (h, w) = (spec.height, spec.width);
    let mut rng = crate::rng::stream(spec.seed, "scene", 0);
    let (c0, c1) = (random_color(&mut rng), random_color(&mut rng));
    let grad = smooth_field(h, w, &mut rng, 2);
    let mut img = RgbImage::from_fn(h, w, |y, x, c| lerp(c0[c], c1[c], grad[y * w + x]));

    let n_rect = rng.random_range(2..=6);
    for _ in 0..n_rect {
        let rh = rng.random_range(h / 8..=h / 2).max(2);
        let rw = rng.random_range(w / 8..=w / 2).max(2);
        let top = rng.random_range(0..h.saturating_sub(rh).max(1));
        let left = rng.random_range(0..w.saturating_sub(rw).max(1));
        let col = random_color(&mut rng);
        let stripes = rng.random_bool(0.3);
        let period = rng.random_range(3..8);
        for y in top..(top + rh).min(h) {
            for x in left..(left + rw).min(w) {
                let k = if stripes && (x / period) % 2 == 0 { 0.75 } else { 1.0 };
                for c in 0..3 {
                    img.set(y, x, c, col[c] * k);
                }
            }
        }
    }
    let n_ell = rng.random_range(1..=4);
    for _ in 0..n_ell {
        let cy: f64 = rng.random_range(0.0..h as f64);
        let cx: f64 = rng.random_range(0.0..w as f64);
        let ry: f64 = rng.random_range(h as f64 / 12.0..h as f64 / 4.0);
        let rx: f64 = rng.random_range(w as f64 / 12.0..w as f64 / 4.0);
        let col = random_color(&mut rng);
        for y in 0..h {
            for x in 0..w {
                let q = ((y as f64 + 0.5 - cy) / ry).powi(2) + ((x as f64 + 0.5 - cx) / rx).powi(2);
                if q <= 1.0 {
                    for c in 0..3 {
                        img.set(y, x, c, col[c]);
                    }
                }
            }
        }
    }
    let amp: f64 = rng.random_range(0.01..0.05);
    for v in &mut img.data {
        *v += amp * (rng.random::<f64>() - 0.5) * 2.0;
    }
    img.clamp01()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HazeSpec {
    /// Atmospheric light `A` in `[0.7, 1.0]`.
    pub airlight: f64,
    /// Scattering coefficient in `[0.8, 2.5]`.
    pub scatter: f64,
    pub depth_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RainSpec {
    pub streaks: usize,
    /// Streak direction in degrees from the horizontal, `[70, 110]`.
    pub angle_deg: f64,
    pub length: f64,
    pub width: f64,
    pub intensity: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnowSpec {
    pub particles: usize,
    /// Particle radii are drawn from `[radius_min, radius_max]` within `[1, 4]` px.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Opacity range within `[0.6, 1.0]`.
    pub opacity_min: f64,
    pub opacity_max: f64,
    /// Blend toward a light grey veil, `0` disables.
    pub veiling: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DegradationSpec {
    Rain(RainSpec),
    Haze(HazeSpec),
    Snow(SnowSpec),
}

impl DegradationSpec {
    pub fn weather(&self) -> Weather {
        match self {
            DegradationSpec::Rain(_) => Weather::Rain,
            DegradationSpec::Haze(_) => Weather::Haze,
            DegradationSpec::Snow(_) => Weather::Snow,
        }
    }

    /// Draws parameters for `kind` from the default ranges, scaled to a
    /// `size`-pixel image.
    pub fn sample(kind: Weather, size: usize, rng: &mut ChaCha8Rng) -> Self {
        let area = (size * size) as f64 / (64.0 * 64.0);
        let scale = size as f64 / 64.0;
        match kind {
            Weather::Haze => DegradationSpec::Haze(HazeSpec {
                airlight: rng.random_range(0.7..=1.0),
                scatter: rng.random_range(0.8..=2.5),
                depth_seed: rng.random(),
            }),
            Weather::Rain => DegradationSpec::Rain(RainSpec {
                streaks: (rng.random_range(20.0..50.0) * area).round() as usize,
                angle_deg: rng.random_range(70.0..=110.0),
                length: rng.random_range(6.0..16.0) * scale,
                width: rng.random_range(0.8..1.5),
                intensity: rng.random_range(0.25..0.55),
                seed: rng.random(),
            }),
            Weather::Snow => DegradationSpec::Snow(SnowSpec {
                particles: (rng.random_range(15.0..60.0) * area).round() as usize,
                radius_min: 1.0,
                radius_max: rng.random_range(2.5..=4.0),
                opacity_min: 0.6,
                opacity_max: rng.random_range(0.8..=1.0),
                veiling: rng.random_range(0.0..0.12),
                seed: rng.random(),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("degradation parameter out of range: {what}")))
            }
        };
        match self {
            DegradationSpec::Haze(s) => {
                check((0.7..=1.0).contains(&s.airlight), "airlight")?;
                check((0.8..=2.5).contains(&s.scatter) || s.scatter == 0.0, "scatter")
            }
            DegradationSpec::Rain(s) => {
                check((70.0..=110.0).contains(&s.angle_deg), "angle")?;
                check(s.length > 0.0 && s.width > 0.0, "streak size")?;
                check((0.0..=1.0).contains(&s.intensity), "intensity")
            }
            DegradationSpec::Snow(s) => {
                check(
                    1.0 <= s.radius_min && s.radius_min <= s.radius_max && s.radius_max <= 4.0,
                    "radius",
                )?;
                check(
                    0.6 <= s.opacity_min && s.opacity_min <= s.opacity_max && s.opacity_max <= 1.0,
                    "opacity",
                )?;
                check((0.0..=1.0).contains(&s.veiling), "veiling")
            }
        }
    }

    pub fn apply(&self, clean: &RgbImage) -> RgbImage {
        match self {
            DegradationSpec::Haze(s) => apply_haze(clean, s),
            DegradationSpec::Rain(s) => apply_rain(clean, s),
            DegradationSpec::Snow(s) => apply_snow(clean, s),
        }
    }
}

/// Scene depth in `[0.04, 0.25]`, farther toward the top of the frame.
pub fn depth_field(height: usize, width: usize, seed: u64) -> Vec<f64> {
    let mut rng = crate::rng::stream(seed, "depth", 0);
    let wobble = smooth_field(height, width, &mut rng, 3);
    (0..height * width)
        .map(|i| {
            let y = (i / width) as f64 / (height.max(2) - 1) as f64;
            0.04 + 0.21 * (0.6 * (1.0 - y) + 0.4 * wobble[i])
        })
        .collect()
}

/// `I = J t + A (1 - t)` with transmission `t = exp(-scatter * depth)`.
pub fn apply_haze_with_depth(clean: &RgbImage, airlight: f64, scatter: f64, depth: &[f64]) -> RgbImage {
    let w = clean.width;
    RgbImage::from_fn(clean.height, w, |y, x, c| {
        let t = (-scatter * depth[y * w + x]).exp();
        clean.get(y, x, c) * t + airlight * (1.0 - t)
    })
    .clamp01()
}

pub fn apply_haze(clean: &RgbImage, spec: &HazeSpec) -> RgbImage {
    let depth = depth_field(clean.height, clean.width, spec.depth_seed);
    apply_haze_with_depth(clean, spec.airlight, spec.scatter, &depth)
}

fn segment_distance(py: f64, px: f64, ay: f64, ax: f64, by: f64, bx: f64) -> f64 {
    let (dy, dx) = (by - ay, bx - ax);
    let len2 = dy * dy + dx * dx;
    let t = if len2 > 0.0 {
        (((py - ay) * dy + (px - ax) * dx) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qy, qx) = (ay + t * dy, ax + t * dx);
    ((py - qy).powi(2) + (px - qx).powi(2)).sqrt()
}

/// Anti-aliased bright streaks added on top of the scene.
pub fn apply_rain(clean: &RgbImage, spec: &RainSpec) -> RgbImage {
    let (h, w) = (clean.height, clean.width);
    let mut overlay = vec![0.0f64; h * w];
    let mut rng = crate::rng::stream(spec.seed, "rain", 0);
    let angle = spec.angle_deg.to_radians();
    let (dy, dx) = (angle.sin(), angle.cos());
    for _ in 0..spec.streaks {
        let cy: f64 = rng.random_range(0.0..h as f64);
        let cx: f64 = rng.random_range(0.0..w as f64);
        let len = spec.length * rng.random_range(0.7..1.3);
        let strength = spec.intensity * rng.random_range(0.7..1.0);
        let (ay, ax) = (cy - dy * len / 2.0, cx - dx * len / 2.0);
        let (by, bx) = (cy + dy * len / 2.0, cx + dx * len / 2.0);
        let pad = spec.width + 1.0;
        let y0 = (ay.min(by) - pad).floor().max(0.0) as usize;
        let y1 = ((ay.max(by) + pad).ceil() as usize).min(h);
        let x0 = (ax.min(bx) - pad).floor().max(0.0) as usize;
        let x1 = ((ax.max(bx) + pad).ceil() as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = segment_distance(y as f64 + 0.5, x as f64 + 0.5, ay, ax, by, bx);
                let cov = (spec.width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
                let o = &mut overlay[y * w + x];
                *o = o.max(strength * cov);
            }
        }
    }
    RgbImage::from_fn(h, w, |y, x, c| clean.get(y, x, c) + overlay[y * w + x]).clamp01()
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Soft white flakes composited over the scene, then an optional veil.
pub fn apply_snow(clean: &RgbImage, spec: &SnowSpec) -> RgbImage {
    let (h, w) = (clean.height, clean.width);
    let mut out = clean.clone();
    let mut rng = crate::rng::stream(spec.seed, "snow", 0);
    for _ in 0..spec.particles {
        let cy: f64 = rng.random_range(0.0..h as f64);
        let cx: f64 = rng.random_range(0.0..w as f64);
        let u: f64 = rng.random();
        let r = spec.radius_min + (spec.radius_max - spec.radius_min) * u * u;
        let aspect: f64 = rng.random_range(0.8..1.2);
        let (ry, rx) = (r * aspect, r);
        let opacity = if spec.opacity_max > spec.opacity_min {
            rng.random_range(spec.opacity_min..=spec.opacity_max)
        } else {
            spec.opacity_min
        };
        let y0 = (cy - ry - 1.0).floor().max(0.0) as usize;
        let y1 = ((cy + ry + 1.0).ceil() as usize).min(h);
        let x0 = (cx - rx - 1.0).floor().max(0.0) as usize;
        let x1 = ((cx + rx + 1.0).ceil() as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let q = (((y as f64 + 0.5 - cy) / ry).powi(2) + ((x as f64 + 0.5 - cx) / rx).powi(2)).sqrt();
                let alpha = opacity * (1.0 - smoothstep(0.5, 1.0, q));
                if alpha > 0.0 {
                    for c in 0..3 {
                        let v = out.get(y, x, c);
                        out.set(y, x, c, v * (1.0 - alpha) + alpha);
                    }
                }
            }
        }
    }
    if spec.veiling > 0.0 {
        for v in &mut out.data {
            *v = *v * (1.0 - spec.veiling) + 0.85 * spec.veiling;
        }
    }
    out.clamp01()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub version: u32,
    pub id: usize,
    pub clean: String,
    pub degraded: String,
    pub label: Weather,
    pub split: Split,
    pub scene: SceneSpec,
    pub degradation: DegradationSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

/// Generated pair held in memory.
#[derive(Debug, Clone)]
pub struct PairImages {
    pub clean: RgbImage,
    pub degraded: RgbImage,
    pub label: Weather,
}

/// Target clean-vs-degraded PSNR range for generated pairs.
pub const SEVERITY_PSNR_DB: (f64, f64) = (15.5, 29.5);
const SEVERITY_ATTEMPTS: usize = 16;

/// Builds one pair exactly as [`make_dataset`] would for `(seed, index, kind)`.
pub fn generate_pair(seed: u64, index: u64, kind: Weather, size: usize) -> (SceneSpec, DegradationSpec, PairImages) {
    let scene = SceneSpec {
        height: size,
        width: size,
        seed: crate::rng::child_seed(seed, "scene-seed", index),
    };
    let mut rng = crate::rng::stream(seed, "degradation", index);
    let clean = synth_clean(&scene);
    // redraw parameters until the severity lands inside the target band
    let mut spec = DegradationSpec::sample(kind, size, &mut rng);
    let mut degraded = spec.apply(&clean);
    for _ in 0..SEVERITY_ATTEMPTS {
        let psnr = crate::evalkit::psnr(&clean, &degraded, 1.0).unwrap_or(f64::INFINITY);
        if (SEVERITY_PSNR_DB.0..=SEVERITY_PSNR_DB.1).contains(&psnr) {
            break;
        }
        spec = DegradationSpec::sample(kind, size, &mut rng);
        degraded = spec.apply(&clean);
    }
    (
        scene,
        spec,
        PairImages {
            clean,
            degraded,
            label: kind,
        },
    )
}

/// In-memory variant of [`make_dataset`] for tests and quick experiments.
pub fn generate_pairs(seed: u64, per_class: usize, size: usize) -> Vec<PairImages> {
    let mut out = Vec::with_capacity(per_class * 3);
    for i in 0..per_class {
        for kind in Weather::ALL {
            let index = (i * 3 + kind.index()) as u64;
            out.push(generate_pair(seed, index, kind, size).2);
        }
    }
    out
}

/// Writes `per_class` pairs per weather class under `out_dir`. The first
/// `round(per_class * split_ratio)` pairs of each class go to the test split.
pub fn make_dataset(
    out_dir: &Path,
    per_class: usize,
    size: usize,
    seed: u64,
    split_ratio: f64,
) -> Result<DatasetManifest> {
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be positive".into()));
    }
    if size < 16 {
        return Err(Error::InvalidArgument(format!("image size {size} below 16")));
    }
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(Error::InvalidArgument(format!("split ratio {split_ratio} outside [0, 1]")));
    }
    for sub in ["clean", "degraded"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let n_test = (per_class as f64 * split_ratio).round() as usize;
    let mut records = Vec::with_capacity(per_class * 3);
    for i in 0..per_class {
        for kind in Weather::ALL {
            let id = i * 3 + kind.index();
            let (scene, degradation, pair) = generate_pair(seed, id as u64, kind, size);
            let clean_rel = format!("clean/{id:05}.png");
            let degraded_rel = format!("degraded/{id:05}.png");
            pair.clean.save_png(&out_dir.join(&clean_rel))?;
            pair.degraded.save_png(&out_dir.join(&degraded_rel))?;
            records.push(Record {
                version: MANIFEST_VERSION,
                id,
                clean: clean_rel,
                degraded: degraded_rel,
                label: kind,
                split: if i < n_test { Split::Test } else { Split::Train },
                scene,
                degradation,
            });
        }
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.write()?;
    Ok(manifest)
}

impl DatasetManifest {
    pub fn path(root: &Path) -> PathBuf {
        root.join(MANIFEST_FILE)
    }

    pub fn write(&self) -> Result<()> {
        let path = Self::path(&self.root);
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn open(root: &Path) -> Result<Self> {
        let path = Self::path(root);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
            if r.version != MANIFEST_VERSION {
                return Err(Error::Data(format!(
                    "{}:{}: manifest version {} unsupported",
                    path.display(),
                    n + 1,
                    r.version
                )));
            }
            records.push(r);
        }
        Ok(Self {
            root: root.to_path_buf(),
            records,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn load_pair(&self, r: &Record) -> Result<PairImages> {
        let clean = RgbImage::load(&self.root.join(&r.clean))?;
        let degraded = RgbImage::load(&self.root.join(&r.degraded))?;
        if !clean.same_size(&degraded) {
            return Err(Error::Data(format!("record {}: clean/degraded size mismatch", r.id)));
        }
        Ok(PairImages {
            clean,
            degraded,
            label: r.label,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<PairImages>> {
        self.split(split).map(|r| self.load_pair(r)).collect()
    }
}
