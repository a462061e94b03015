//! Residual estimation network `I_res(I_t, I_in, t)`: a small conditional
//! encoder/bottleneck/decoder with a sinusoidal time embedding, and prompt
//! guidance plus dynamic expert selection after every encoder level.

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::desm::{Desm, RoutingDecision, DEFAULT_EXPERTS, DEFAULT_THRESHOLD};
use crate::diffusion::ResidualPredictor;
use crate::embedding::{DEFAULT_TOKENS, DEFAULT_WIDTH};
use crate::layers::{Conv2d, Init, Linear, ResBlock};
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::{from_f64, reflect_pad_to_multiple};
use crate::wpg::{select_encoded, PromptAdapter, PromptSelection, ShallowProbe};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RestorerConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub time_embed_dim: usize,
    pub n_experts: usize,
    pub threshold: f64,
    pub tokens: usize,
    pub width: usize,
    pub seed: u64,
    pub wpg: bool,
    pub desm: bool,
}

impl Default for RestorerConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 32,
            time_embed_dim: 128,
            n_experts: DEFAULT_EXPERTS,
            threshold: DEFAULT_THRESHOLD,
            tokens: DEFAULT_TOKENS,
            width: DEFAULT_WIDTH,
            seed: 0,
            wpg: true,
            desm: true,
        }
    }
}

impl RestorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.width == 0 || self.tokens == 0 {
            return Err(Error::Config("levels, channels, tokens and width must be positive".into()));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time_embed_dim must be even and at least 2".into()));
        }
        if self.n_experts == 0 {
            return Err(Error::Config("n_experts must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial sizes are padded to a multiple of this.
    pub fn multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// Sinusoidal features of `t / T`: `dim / 2` sines then `dim / 2` cosines at
/// geometrically spaced frequencies.
pub fn time_embedding(t: usize, total: usize, dim: usize) -> Result<Vec<f64>> {
    if t > total || total == 0 {
        return Err(Error::OutOfRange(format!("timestep {t} outside [0, {total}]")));
    }
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("embedding dim {dim} must be even")));
    }
    let half = dim / 2;
    let pos = 1000.0 * t as f64 / total as f64;
    let freqs: Vec<f64> = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp()).collect();
    let mut out: Vec<f64> = freqs.iter().map(|f| (pos * f).sin()).collect();
    out.extend(freqs.iter().map(|f| (pos * f).cos()));
    Ok(out)
}

/// Frozen prompt embeddings for guidance, `[3, D]` in label order.
#[derive(Debug, Clone)]
pub struct PromptContext {
    pub encoded: Tensor,
}

/// Everything the training objective needs from a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardAux {
    /// One decision per encoder level when expert selection is on.
    pub decisions: Vec<RoutingDecision>,
    pub selection: Option<PromptSelection>,
}

#[derive(Clone)]
struct Level {
    down: Option<Conv2d>,
    block: ResBlock,
    adapter: Option<PromptAdapter>,
    desm: Option<Desm>,
}

#[derive(Clone)]
struct UpLevel {
    reduce: Conv2d,
    block: ResBlock,
}

#[derive(Clone)]
pub struct Restorer {
    cfg: RestorerConfig,
    store: ParamStore,
    time1: Linear,
    time2: Linear,
    stem: Conv2d,
    levels: Vec<Level>,
    bottleneck: ResBlock,
    ups: Vec<UpLevel>,
    head: Conv2d,
    probe: Option<ShallowProbe>,
}

impl Restorer {
    pub fn new(cfg: &RestorerConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut pb = ParamBuilder::new(&mut store, crate::rng::stream(cfg.seed, "restorer-init", 0));
        let td = cfg.time_embed_dim;
        let time1 = Linear::new(&mut pb, "time.fc1", td, td, Init::He)?;
        let time2 = Linear::new(&mut pb, "time.fc2", td, td, Init::Scaled(1.0))?;
        let stem = Conv2d::new(&mut pb, "stem", 6, cfg.channels(0), 3, 1, Init::He)?;
        let mut levels = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            let c = cfg.channels(l);
            let down = if l == 0 {
                None
            } else {
                Some(Conv2d::new(&mut pb, &format!("enc.level_{l}.down"), cfg.channels(l - 1), c, 3, 2, Init::He)?)
            };
            let block = ResBlock::new(&mut pb, &format!("enc.level_{l}.block"), c, td)?;
            let adapter = if cfg.wpg {
                Some(PromptAdapter::new(&mut pb, &format!("wpg.level_{l}"), cfg.width, c)?)
            } else {
                None
            };
            let desm = if cfg.desm {
                Some(Desm::new(&mut pb, &format!("desm.level_{l}"), c, cfg.n_experts, cfg.threshold)?)
            } else {
                None
            };
            levels.push(Level {
                down,
                block,
                adapter,
                desm,
            });
        }
        let deepest = cfg.channels(cfg.levels - 1);
        let bottleneck = ResBlock::new(&mut pb, "bottleneck", deepest, td)?;
        let mut ups = Vec::new();
        for l in (0..cfg.levels - 1).rev() {
            ups.push(UpLevel {
                reduce: Conv2d::new(&mut pb, &format!("dec.level_{l}.reduce"), cfg.channels(l + 1), cfg.channels(l), 1, 1, Init::Scaled(1.0))?,
                block: ResBlock::new(&mut pb, &format!("dec.level_{l}.block"), cfg.channels(l), td)?,
            });
        }
        let head = Conv2d::new(&mut pb, "head", cfg.channels(0), 3, 3, 1, Init::Scaled(0.1))?;
        let probe = if cfg.wpg {
            Some(ShallowProbe::new(&mut pb, "wpg.probe", cfg.width)?)
        } else {
            None
        };
        drop(pb);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            time1,
            time2,
            stem,
            levels,
            bottleneck,
            ups,
            head,
            probe,
        })
    }

    pub fn config(&self) -> &RestorerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn probe(&self) -> Option<&ShallowProbe> {
        self.probe.as_ref()
    }

    pub fn adapter(&self, level: usize) -> Option<&PromptAdapter> {
        self.levels.get(level).and_then(|l| l.adapter.as_ref())
    }

    pub fn desm(&self, level: usize) -> Option<&Desm> {
        self.levels.get(level).and_then(|l| l.desm.as_ref())
    }

    /// `[B, time_embed_dim]` conditioning vectors for per-sample steps.
    pub fn time_features(&self, ts: &[usize], total: usize) -> Result<Tensor> {
        let dim = self.cfg.time_embed_dim;
        let mut flat = Vec::with_capacity(ts.len() * dim);
        for &t in ts {
            flat.extend(time_embedding(t, total, dim)?);
        }
        let e = from_f64(flat, &[ts.len(), dim], self.dtype())?;
        self.time2.forward(&crate::ops::gelu(&self.time1.forward(&e)?)?)
    }

    /// Predicts `I_res` for a batch. `ts[b]` is the step of row `b`; gate
    /// noise is drawn from `rng` only when `training`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        i_t: &Tensor,
        degraded: &Tensor,
        ts: &[usize],
        total_steps: usize,
        prompts: Option<&PromptContext>,
        training: bool,
        rng: &mut R,
    ) -> Result<(Tensor, ForwardAux)> {
        crate::tensor::ensure_same_shape(i_t, degraded, "restorer inputs")?;
        let (b, c, _, _) = i_t.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3-channel images, got {c}")));
        }
        if ts.len() != b {
            return Err(Error::Shape(format!("{} timesteps for batch {b}", ts.len())));
        }
        if let Some(&bad) = ts.iter().find(|&&t| t == 0 || t > total_steps) {
            return Err(Error::OutOfRange(format!("timestep {bad} outside [1, {total_steps}]")));
        }
        let dtype = self.dtype();
        let i_t = i_t.to_dtype(dtype)?;
        let degraded = degraded.to_dtype(dtype)?;
        let mut aux = ForwardAux::default();
        let f_s = match &self.probe {
            Some(probe) => {
                let ctx = prompts.ok_or_else(|| Error::InvalidArgument("prompt guidance needs encoded prompts".into()))?;
                let sel = select_encoded(probe, &ctx.encoded.to_dtype(dtype)?.detach(), &i_t)?;
                let f_s = sel.embeddings.clone();
                aux.selection = Some(sel);
                Some(f_s)
            }
            None => None,
        };
        let temb = self.time_features(ts, total_steps)?;
        let input = Tensor::cat(&[&i_t, &degraded], 1)?;
        let (input, h, w) = reflect_pad_to_multiple(&input, self.cfg.multiple())?;
        let mut x = self.stem.forward(&input)?;
        let mut skips = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            if let Some(down) = &level.down {
                x = down.forward(&x)?;
            }
            let f_e = level.block.forward(&x, &temb)?;
            let f_pa = match (&level.adapter, &f_s) {
                (Some(pa), Some(f_s)) => pa.forward(&f_e, f_s)?,
                _ => f_e.clone(),
            };
            x = match &level.desm {
                Some(desm) => {
                    let (mixed, decision) = desm.forward(&f_e, &f_pa, training, rng)?;
                    aux.decisions.push(decision);
                    (&f_e + mixed)?
                }
                None => f_e,
            };
            skips.push(x.clone());
        }
        let mut x = self.bottleneck.forward(&x, &temb)?;
        for (up, skip) in self.ups.iter().zip(skips.iter().rev().skip(1)) {
            let (_, _, sh, sw) = skip.dims4()?;
            let y = up.reduce.forward(&x.upsample_nearest2d(sh, sw)?)?;
            x = up.block.forward(&(y + skip)?, &temb)?;
        }
        let out = self.head.forward(&x)?;
        let out = out.narrow(2, 0, h)?.narrow(3, 0, w)?;
        Ok((out, aux))
    }

    /// Inference adapter for the samplers: noise-free gates, one state.
    pub fn predictor<'a>(&'a self, total_steps: usize, prompts: Option<&'a PromptContext>) -> RestorerPredictor<'a> {
        RestorerPredictor {
            model: self,
            total_steps,
            prompts,
        }
    }
}

pub struct RestorerPredictor<'a> {
    model: &'a Restorer,
    total_steps: usize,
    prompts: Option<&'a PromptContext>,
}

impl ResidualPredictor for RestorerPredictor<'_> {
    fn predict_residual(&mut self, i_t: &Tensor, degraded: &Tensor, t: usize) -> Result<Tensor> {
        let b = i_t.dim(0)?;
        let ts = vec![t; b];
        // gates are noise-free at inference, so this stream is never drawn from
        let mut rng = crate::rng::stream(0, "unused", 0);
        let (out, _) = self
            .model
            .forward(i_t, degraded, &ts, self.total_steps, self.prompts, false, &mut rng)?;
        Ok(out.to_dtype(i_t.dtype())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{randn, to_f64_vec};

    fn small(wpg: bool, desm: bool) -> RestorerConfig {
        RestorerConfig {
            levels: 2,
            base_channels: 4,
            time_embed_dim: 8,
            width: 16,
            wpg,
            desm,
            ..Default::default()
        }
    }

    fn ctx(dtype: DType) -> PromptContext {
        let mut rng = crate::rng::stream(9, "p", 0);
        let e = randn(&mut rng, &[3, 16], dtype).unwrap();
        PromptContext {
            encoded: crate::tensor::l2_normalize_last(&e).unwrap(),
        }
    }

    #[test]
    fn time_embedding_contract() {
        let e = time_embedding(0, 100, 8).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        assert_eq!(time_embedding(37, 100, 8).unwrap(), time_embedding(37, 100, 8).unwrap());
        assert!(time_embedding(101, 100, 8).is_err());
    }

    #[test]
    fn output_matches_input_shape_with_padding() {
        let model = Restorer::new(&small(true, true), DType::F64).unwrap();
        let mut rng = crate::rng::stream(1, "x", 0);
        let x = randn(&mut rng, &[2, 3, 7, 9], DType::F64).unwrap();
        let c = ctx(DType::F64);
        let (out, aux) = model.forward(&x, &x, &[3, 50], 100, Some(&c), true, &mut rng).unwrap();
        assert_eq!(out.dims(), &[2, 3, 7, 9]);
        assert_eq!(aux.decisions.len(), 2);
        assert!(aux.selection.is_some());
        assert!(to_f64_vec(&out).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn inference_is_deterministic() {
        let model = Restorer::new(&small(true, true), DType::F64).unwrap();
        let mut rng = crate::rng::stream(2, "x", 0);
        let x = randn(&mut rng, &[1, 3, 8, 8], DType::F64).unwrap();
        let y = randn(&mut rng, &[1, 3, 8, 8], DType::F64).unwrap();
        let c = ctx(DType::F64);
        let mut p = model.predictor(100, Some(&c));
        let a = to_f64_vec(&p.predict_residual(&x, &y, 10).unwrap()).unwrap();
        let b = to_f64_vec(&p.predict_residual(&x, &y, 10).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ablation_parameter_sets_nest() {
        let names = |w, d| Restorer::new(&small(w, d), DType::F32).unwrap().params().names();
        let base = names(false, false);
        let v1 = names(true, false);
        let v2 = names(true, true);
        assert!(base.iter().all(|n| v1.contains(n)));
        assert!(v1.iter().all(|n| v2.contains(n)));
        assert!(base.len() < v1.len() && v1.len() < v2.len());
        assert!(v2.iter().any(|n| n.starts_with("desm.level_1.expert_3.")));
        assert!(v2.iter().any(|n| n.starts_with("wpg.level_0.")));
    }

    #[test]
    fn guidance_requires_prompts_and_valid_steps() {
        let model = Restorer::new(&small(true, false), DType::F64).unwrap();
        let mut rng = crate::rng::stream(3, "x", 0);
        let x = randn(&mut rng, &[1, 3, 8, 8], DType::F64).unwrap();
        assert!(model.forward(&x, &x, &[1], 100, None, false, &mut rng).is_err());
        let c = ctx(DType::F64);
        assert!(model.forward(&x, &x, &[0], 100, Some(&c), false, &mut rng).is_err());
        assert!(model.forward(&x, &x, &[101], 100, Some(&c), false, &mut rng).is_err());
    }
}
