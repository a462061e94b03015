//! Stage 2: residual-diffusion training with prompt guidance and expert
//! routing, EMA weight tracking, checkpoints and the training log.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, NamedArrays};
use crate::desm::load_balance_loss_levels;
use crate::diffusion::{forward_sample_batch, residual_loss, DiffusionSchedule};
use crate::embedding::PromptBank;
use crate::img::RgbImage;
use crate::params::{Adam, ParamStore};
use crate::prompt_trainer::cross_entropy_loss;
use crate::restorer::{ForwardAux, PromptContext, Restorer, RestorerConfig};
use crate::tensor::{randn, scalar_f64};
use crate::weathergen::PairImages;
use crate::{Error, Precision, Result, Weather};

pub const MODEL_KIND: &str = "restorer";
pub const MODEL_FORMAT: &str = "1";

/// Flat training configuration; every key can appear in a TOML config file.
/// The full-scale setting is 400k iterations on 256x256 crops; the defaults
/// are sized for a CPU run at 64x64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub lambda_balance: f64,
    pub ema_decay: f64,
    pub crop_size: usize,
    pub seed: u64,
    pub wpg_on: bool,
    pub desm_on: bool,
    pub balance_on: bool,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; off by default.
    pub clip_norm: Option<f64>,
    pub diffusion_steps: usize,
    pub beta_bar_terminal: f64,
    pub levels: usize,
    pub base_channels: usize,
    pub time_embed_dim: usize,
    pub n_experts: usize,
    pub threshold: f64,
    /// Weight of the probe's prompt-alignment loss (trains the probe only).
    pub probe_weight: f64,
    /// Temperature of the probe's cosine logits in that loss.
    pub probe_temperature: f64,
    pub log_every: usize,
    pub precision: Precision,
}

impl Default for Stage2Config {
    fn default() -> Self {
        let r = RestorerConfig::default();
        Self {
            iterations: 5000,
            lr: 8e-5,
            batch_size: 6,
            lambda_balance: 0.01,
            ema_decay: 0.995,
            crop_size: 64,
            seed: 0,
            wpg_on: true,
            desm_on: true,
            balance_on: true,
            beta1: 0.9,
            beta2: 0.99,
            clip_norm: None,
            diffusion_steps: 100,
            beta_bar_terminal: 0.1,
            levels: r.levels,
            base_channels: r.base_channels,
            time_embed_dim: r.time_embed_dim,
            n_experts: r.n_experts,
            threshold: r.threshold,
            probe_weight: 1.0,
            probe_temperature: 0.1,
            log_every: 50,
            precision: Precision::F32,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("ema_decay {} outside (0, 1)", self.ema_decay)));
        }
        if !(self.lambda_balance >= 0.0) {
            return Err(Error::Config(format!("lambda_balance {} must be >= 0", self.lambda_balance)));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.crop_size == 0 {
            return Err(Error::Config("lr, batch_size and crop_size must be positive".into()));
        }
        if !(self.probe_weight >= 0.0) || !(self.probe_temperature > 0.0) {
            return Err(Error::Config("probe_weight must be >= 0 and probe_temperature > 0".into()));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} does not fit a TOML integer (max {})", self.seed, i64::MAX)));
        }
        if self.balance_on && !self.desm_on {
            return Err(Error::Config("balance_on requires desm_on".into()));
        }
        DiffusionSchedule::new(self.diffusion_steps, self.beta_bar_terminal)?;
        Ok(())
    }

    pub fn restorer_config(&self, tokens: usize, width: usize) -> RestorerConfig {
        RestorerConfig {
            levels: self.levels,
            base_channels: self.base_channels,
            time_embed_dim: self.time_embed_dim,
            n_experts: self.n_experts,
            threshold: self.threshold,
            tokens,
            width,
            seed: self.seed,
            wpg: self.wpg_on,
            desm: self.desm_on,
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.diffusion_steps, self.beta_bar_terminal)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Shadow copy of the parameters, `shadow <- d * shadow + (1 - d) * param`.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub decay: f64,
    shadow: BTreeMap<String, Tensor>,
}

impl EmaState {
    pub fn new(params: &ParamStore, decay: f64) -> Result<Self> {
        Ok(Self {
            decay,
            shadow: params.snapshot()?,
        })
    }

    pub fn from_shadow(shadow: BTreeMap<String, Tensor>, decay: f64) -> Self {
        Self { decay, shadow }
    }

    pub fn shadow(&self) -> &BTreeMap<String, Tensor> {
        &self.shadow
    }

    pub fn update(&mut self, params: &ParamStore) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::Shape(format!(
                "EMA tracks {} tensors, model has {}",
                self.shadow.len(),
                params.len()
            )));
        }
        for (name, var) in params.iter() {
            let s = self
                .shadow
                .get_mut(name)
                .ok_or_else(|| Error::Shape(format!("EMA has no entry `{name}`")))?;
            if s.dims() != var.dims() {
                return Err(Error::Shape(format!("EMA shape drift on `{name}`")));
            }
            *s = ((&*s * self.decay)? + (var.as_tensor().detach() * (1.0 - self.decay))?)?;
        }
        Ok(())
    }
}

/// One training batch, NCHW.
#[derive(Debug, Clone)]
pub struct Batch {
    pub clean: Tensor,
    pub degraded: Tensor,
    pub labels: Vec<Weather>,
}

/// Random crop and horizontal flip of `batch_size` pairs, drawn with the
/// step's own RNG stream so any step can be rebuilt without replay.
pub fn sample_batch(data: &[PairImages], cfg: &Stage2Config, step: u64, dtype: DType) -> Result<Batch> {
    if data.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    let mut rng = crate::rng::stream(cfg.seed, "batch", step);
    let mut clean = Vec::with_capacity(cfg.batch_size);
    let mut degraded = Vec::with_capacity(cfg.batch_size);
    let mut labels = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let p = &data[rng.random_range(0..data.len())];
        let (h, w) = (p.clean.height, p.clean.width);
        if h < cfg.crop_size || w < cfg.crop_size {
            return Err(Error::Data(format!("{h}x{w} pair smaller than crop {}", cfg.crop_size)));
        }
        let top = rng.random_range(0..=h - cfg.crop_size);
        let left = rng.random_range(0..=w - cfg.crop_size);
        let flip = rng.random_bool(0.5);
        let mut c = p.clean.crop(top, left, cfg.crop_size, cfg.crop_size)?;
        let mut d = p.degraded.crop(top, left, cfg.crop_size, cfg.crop_size)?;
        if flip {
            c = c.flip_horizontal();
            d = d.flip_horizontal();
        }
        clean.push(c);
        degraded.push(d);
        labels.push(p.label);
    }
    Ok(Batch {
        clean: RgbImage::stack(&clean.iter().collect::<Vec<_>>(), dtype)?,
        degraded: RgbImage::stack(&degraded.iter().collect::<Vec<_>>(), dtype)?,
        labels,
    })
}

/// Loss terms of one forward pass. `total = L_res + lambda * L_balance`;
/// the probe term is separate and only reaches probe parameters.
pub struct Objective {
    pub residual: Tensor,
    pub balance: Option<Tensor>,
    pub total: Tensor,
    pub probe: Option<Tensor>,
}

impl Objective {
    /// What backpropagation sees.
    pub fn backward_target(&self, probe_weight: f64) -> Result<Tensor> {
        match &self.probe {
            Some(p) if probe_weight > 0.0 => Ok((&self.total + (p * probe_weight)?)?),
            _ => Ok(self.total.clone()),
        }
    }
}

/// Assembles the objective from a prediction and its auxiliary outputs.
pub fn objective(
    res_true: &Tensor,
    res_hat: &Tensor,
    aux: &ForwardAux,
    labels: &[Weather],
    cfg: &Stage2Config,
) -> Result<Objective> {
    let residual = residual_loss(res_true, res_hat)?;
    let balance = if cfg.balance_on && !aux.decisions.is_empty() {
        Some(load_balance_loss_levels(&aux.decisions)?)
    } else {
        None
    };
    let total = match &balance {
        Some(b) if cfg.lambda_balance != 0.0 => (&residual + (b * cfg.lambda_balance)?)?,
        _ => residual.clone(),
    };
    let probe = match &aux.selection {
        Some(sel) => {
            let idx: Vec<usize> = labels.iter().map(|w| w.index()).collect();
            let logits = sel.similarities.affine(1.0 / cfg.probe_temperature, 0.0)?;
            Some(cross_entropy_loss(&logits, &idx)?)
        }
        None => None,
    };
    Ok(Objective {
        residual,
        balance,
        total,
        probe,
    })
}

/// Per-step training record (one JSON line in the log).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: u64,
    pub l_res: f64,
    pub l_balance: Option<f64>,
    pub total: f64,
    pub probe_loss: Option<f64>,
    /// Per level, fraction of samples in which each expert was active.
    pub expert_freq: Vec<Vec<f64>>,
    /// Selected prompt counts in label order.
    pub prompt_hist: [usize; 3],
    /// Fraction of samples whose selected prompt matches the label.
    pub prompt_match: Option<f64>,
    pub timesteps: Vec<usize>,
}

pub struct Trainer {
    cfg: Stage2Config,
    schedule: DiffusionSchedule,
    model: Restorer,
    ema: EmaState,
    adam: Adam,
    step: u64,
    prompts: Option<PromptContext>,
    bank: Option<PromptBank>,
}

impl Trainer {
    /// Fresh model. `prompts` (encoded bank) is required when guidance is on.
    pub fn new(cfg: &Stage2Config, prompts: Option<PromptContext>, bank: Option<PromptBank>) -> Result<Self> {
        cfg.validate()?;
        let (tokens, width) = match (&bank, &prompts) {
            (Some(b), _) => (b.tokens(), b.width()),
            (None, Some(p)) => (crate::embedding::DEFAULT_TOKENS, p.encoded.dim(1)?),
            (None, None) => (crate::embedding::DEFAULT_TOKENS, crate::embedding::DEFAULT_WIDTH),
        };
        if cfg.wpg_on && prompts.is_none() {
            return Err(Error::Config("prompt guidance is on but no prompt bank was given".into()));
        }
        let dtype = cfg.precision.dtype();
        let model = Restorer::new(&cfg.restorer_config(tokens, width), dtype)?;
        let ema = EmaState::new(model.params(), cfg.ema_decay)?;
        let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
        adam.clip_norm = cfg.clip_norm;
        let prompts = match prompts {
            Some(p) => Some(PromptContext {
                encoded: p.encoded.to_dtype(dtype)?.detach(),
            }),
            None => None,
        };
        Ok(Self {
            cfg: cfg.clone(),
            schedule: cfg.schedule()?,
            model,
            ema,
            adam,
            step: 0,
            prompts,
            bank,
        })
    }

    pub fn config(&self) -> &Stage2Config {
        &self.cfg
    }

    pub fn model(&self) -> &Restorer {
        &self.model
    }

    pub fn ema(&self) -> &EmaState {
        &self.ema
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    /// Extends (or shortens) the run; the only setting a resume may change.
    pub fn set_iterations(&mut self, iterations: usize) {
        self.cfg.iterations = iterations;
    }

    pub fn prompts(&self) -> Option<&PromptContext> {
        self.prompts.as_ref()
    }

    /// Forward pass and objective for a batch at this trainer's step, using
    /// the step's noise and gate streams.
    pub fn evaluate_objective(&self, batch: &Batch, training: bool) -> Result<(Objective, Vec<usize>, ForwardAux)> {
        let b = batch.labels.len();
        let mut rng = crate::rng::stream(self.cfg.seed, "diffusion", self.step);
        let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=self.schedule.steps())).collect();
        let eps = randn(&mut rng, batch.clean.dims(), self.model.dtype())?;
        let clean = batch.clean.to_dtype(self.model.dtype())?;
        let degraded = batch.degraded.to_dtype(self.model.dtype())?;
        let i_t = forward_sample_batch(&self.schedule, &clean, &degraded, &ts, &eps)?;
        let mut gate_rng = crate::rng::stream(self.cfg.seed, "gates", self.step);
        let (res_hat, aux) = self.model.forward(
            &i_t,
            &degraded,
            &ts,
            self.schedule.steps(),
            self.prompts.as_ref(),
            training,
            &mut gate_rng,
        )?;
        let res_true = (&degraded - &clean)?;
        let obj = objective(&res_true, &res_hat, &aux, &batch.labels, &self.cfg)?;
        Ok((obj, ts, aux))
    }

    /// One Adam update plus EMA update.
    pub fn training_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let (obj, ts, aux) = self.evaluate_objective(batch, true)?;
        let l_res = scalar_f64(&obj.residual)?;
        let total = scalar_f64(&obj.total)?;
        let l_balance = obj.balance.as_ref().map(scalar_f64).transpose()?;
        let probe_loss = obj.probe.as_ref().map(scalar_f64).transpose()?;
        if !total.is_finite() || !probe_loss.unwrap_or(0.0).is_finite() {
            return Err(Error::NonFinite(self.diagnostic(batch, &ts, &aux, l_res, l_balance)));
        }
        let grads = obj.backward_target(self.cfg.probe_weight)?.backward()?;
        self.adam.step(self.model.params(), &grads)?;
        self.ema.update(self.model.params())?;
        self.step += 1;
        let mut prompt_hist = [0usize; 3];
        let mut prompt_match = None;
        if let Some(sel) = &aux.selection {
            for &i in &sel.indices {
                prompt_hist[i] += 1;
            }
            let hits = sel.indices.iter().zip(&batch.labels).filter(|(i, w)| **i == w.index()).count();
            prompt_match = Some(hits as f64 / batch.labels.len() as f64);
        }
        Ok(StepRecord {
            iter: self.step,
            l_res,
            l_balance,
            total,
            probe_loss,
            expert_freq: aux.decisions.iter().map(|d| d.activation_frequency()).collect(),
            prompt_hist,
            prompt_match,
            timesteps: ts,
        })
    }

    fn diagnostic(&self, batch: &Batch, ts: &[usize], aux: &ForwardAux, l_res: f64, l_balance: Option<f64>) -> String {
        let stat = |t: &Tensor| -> String {
            match crate::tensor::to_f64_vec(t) {
                Ok(v) => {
                    let finite = v.iter().filter(|x| x.is_finite()).count();
                    let max = v.iter().cloned().filter(|x| x.is_finite()).fold(f64::NEG_INFINITY, f64::max);
                    format!("{finite}/{} finite, max {max:.4}", v.len())
                }
                Err(e) => format!("unreadable ({e})"),
            }
        };
        let gates: Vec<String> = aux
            .decisions
            .iter()
            .enumerate()
            .map(|(l, d)| format!("level {l} probs {}", stat(&d.probs)))
            .collect();
        format!(
            "non-finite loss at step {}: l_res {l_res}, l_balance {l_balance:?}, t {ts:?}, labels {:?}, clean {}, degraded {}, gates [{}]",
            self.step,
            batch.labels,
            stat(&batch.clean),
            stat(&batch.degraded),
            gates.join("; ")
        )
    }

    /// Runs up to `cfg.iterations` total steps, appending JSON lines to `log`
    /// every `log_every` steps (and on the last one).
    pub fn run(&mut self, data: &[PairImages], mut log: Option<&mut dyn Write>) -> Result<Vec<StepRecord>> {
        let mut records = Vec::new();
        let dtype = self.model.dtype();
        while (self.step as usize) < self.cfg.iterations {
            let batch = sample_batch(data, &self.cfg, self.step, dtype)?;
            let rec = self.training_step(&batch)?;
            let last = rec.iter as usize == self.cfg.iterations;
            if let Some(w) = log.as_deref_mut() {
                if rec.iter as usize % self.cfg.log_every.max(1) == 0 || last {
                    let line = serde_json::to_string(&rec).map_err(|e| Error::Data(e.to_string()))?;
                    writeln!(w, "{line}")
                        .and_then(|_| w.flush())
                        .map_err(|e| Error::io(Path::new("<training log>"), e))?;
                }
            }
            records.push(rec);
        }
        Ok(records)
    }

    /// Model with the EMA weights loaded.
    pub fn ema_model(&self) -> Result<Restorer> {
        weights_model(&self.model, self.ema.shadow())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut data = NamedArrays::default();
        for (k, t) in self.model.params().snapshot()? {
            data.arrays.insert(format!("model.{k}"), t);
        }
        for (k, t) in self.ema.shadow() {
            data.arrays.insert(format!("ema.{k}"), t.clone());
        }
        let (adam_step, state) = self.adam.state();
        for (k, t) in state {
            data.arrays.insert(format!("adam.{k}"), t);
        }
        if let Some(p) = &self.prompts {
            data.arrays.insert("prompts.encoded".into(), p.encoded.clone());
        }
        if let Some(b) = &self.bank {
            for w in Weather::ALL {
                data.arrays
                    .insert(format!("prompts.bank.{}", w.name()), b.prompt(w).as_tensor().clone());
            }
            data.metadata.insert("bank_seed".into(), b.seed().to_string());
            data.metadata.insert("encoder_seed".into(), b.encoder_seed().to_string());
        }
        data.metadata.insert("kind".into(), MODEL_KIND.into());
        data.metadata.insert("format_version".into(), MODEL_FORMAT.into());
        data.metadata.insert("config".into(), self.cfg.to_json());
        data.metadata.insert("step".into(), self.step.to_string());
        data.metadata.insert("adam_step".into(), adam_step.to_string());
        data.metadata.insert("ema".into(), "true".into());
        data.metadata.insert("num_parameters".into(), self.model.params().num_elements().to_string());
        checkpoint::save(path, &data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut data = checkpoint::load(path)?;
        checkpoint::check_version(&data, MODEL_KIND, MODEL_FORMAT)?;
        let cfg: Stage2Config = serde_json::from_str(data.meta("config")?)
            .map_err(|e| Error::Checkpoint(format!("bad config metadata: {e}")))?;
        let parse = |key: &str, data: &NamedArrays| -> Result<u64> {
            data.meta(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad `{key}` metadata")))
        };
        let step = parse("step", &data)?;
        let adam_step = parse("adam_step", &data)?;
        let prompts = match data.arrays.remove("prompts.encoded") {
            Some(encoded) => Some(PromptContext { encoded }),
            None => None,
        };
        let bank_arrays = data.take_prefixed("prompts.bank");
        let bank = if bank_arrays.is_empty() {
            None
        } else {
            let seed = parse("bank_seed", &data)?;
            let encoder_seed = parse("encoder_seed", &data)?;
            Some(PromptBank::from_arrays(&bank_arrays, seed, encoder_seed)?)
        };
        let mut trainer = Self::new(&cfg, prompts, bank)?;
        trainer.model.params().load(&data.take_prefixed("model"))?;
        let shadow = data.take_prefixed("ema");
        check_same_names(trainer.model.params(), &shadow)?;
        trainer.ema = EmaState::from_shadow(shadow, cfg.ema_decay);
        trainer.adam.restore_state(adam_step, &data.take_prefixed("adam"))?;
        if let Some(extra) = data.arrays.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected entry `{extra}`")));
        }
        trainer.step = step;
        Ok(trainer)
    }
}

fn check_same_names(store: &ParamStore, map: &BTreeMap<String, Tensor>) -> Result<()> {
    for (name, var) in store.iter() {
        match map.get(name) {
            None => return Err(Error::Checkpoint(format!("missing EMA entry `{name}`"))),
            Some(t) if t.dims() != var.dims() => {
                return Err(Error::Checkpoint(format!("EMA shape drift on `{name}`")))
            }
            _ => {}
        }
    }
    if map.len() != store.len() {
        return Err(Error::Checkpoint("EMA entries do not match the model".into()));
    }
    Ok(())
}

/// Copy of `model` carrying `weights`.
pub fn weights_model(model: &Restorer, weights: &BTreeMap<String, Tensor>) -> Result<Restorer> {
    let copy = Restorer::new(model.config(), model.dtype())?;
    copy.params().load(weights)?;
    Ok(copy)
}

/// A trained model ready for sampling.
pub struct LoadedModel {
    pub model: Restorer,
    pub prompts: Option<PromptContext>,
    pub schedule: DiffusionSchedule,
    pub config: Stage2Config,
    /// Digest of the sampling weights.
    pub digest: String,
}

/// Loads a checkpoint's EMA weights (or the raw weights with `use_ema = false`).
pub fn load_for_inference(path: &Path, use_ema: bool) -> Result<LoadedModel> {
    let trainer = Trainer::load(path)?;
    let model = if use_ema {
        trainer.ema_model()?
    } else {
        trainer.model.clone()
    };
    let digest = model.params().digest()?;
    Ok(LoadedModel {
        prompts: trainer.prompts.clone(),
        schedule: trainer.schedule.clone(),
        config: trainer.cfg.clone(),
        model,
        digest,
    })
}

impl LoadedModel {
    pub fn predictor(&self) -> crate::restorer::RestorerPredictor<'_> {
        self.model.predictor(self.schedule.steps(), self.prompts.as_ref())
    }
}

/// Encodes a stage-1 bank with the frozen text encoder it was trained
/// against, producing the context the restorer selects from.
pub fn encode_bank(bank: &PromptBank, dtype: DType) -> Result<PromptContext> {
    let enc = crate::embedding::FrozenEncoders::new(bank.encoder_seed(), bank.tokens(), bank.width(), dtype)?;
    Ok(PromptContext {
        encoded: bank.encode(&enc)?.detach(),
    })
}

/// Restores and scores `samples` with a loaded model.
pub fn evaluate_model(
    loaded: &LoadedModel,
    samples: &[(String, PairImages)],
    opts: &crate::evalkit::EvalOptions,
) -> Result<(Vec<crate::evalkit::ImageScore>, crate::evalkit::EvalReport)> {
    let mut predictor = loaded.predictor();
    let opts = crate::evalkit::EvalOptions {
        dtype: loaded.model.dtype(),
        ..*opts
    };
    let scores = crate::evalkit::evaluate(&mut predictor, &loaded.schedule, samples, &opts)?;
    let report = crate::evalkit::EvalReport::from_scores(&scores, opts.steps, opts.strategy, opts.seed, &loaded.digest)?;
    Ok((scores, report))
}

/// Fraction of samples whose selected prompt matches the weather label when
/// the state is drawn at timestep `t`. `None` without prompt guidance.
pub fn selection_accuracy(loaded: &LoadedModel, samples: &[(String, PairImages)], t: usize, seed: u64) -> Result<Option<f64>> {
    let (Some(probe), Some(prompts)) = (loaded.model.probe(), loaded.prompts.as_ref()) else {
        return Ok(None);
    };
    if samples.is_empty() {
        return Err(Error::Config("selection accuracy needs at least one sample".into()));
    }
    let dtype = loaded.model.dtype();
    let mut hits = 0usize;
    for (i, (_, pair)) in samples.iter().enumerate() {
        let clean = pair.clean.to_tensor(dtype)?.unsqueeze(0)?;
        let degraded = pair.degraded.to_tensor(dtype)?.unsqueeze(0)?;
        let mut rng = crate::rng::stream(seed, "selection-noise", i as u64);
        let eps = randn(&mut rng, clean.dims(), dtype)?;
        let i_t = forward_sample_batch(&loaded.schedule, &clean, &degraded, &[t], &eps)?;
        let sel = crate::wpg::select_encoded(probe, &prompts.encoded, &i_t)?;
        hits += usize::from(sel.indices[0] == pair.label.index());
    }
    Ok(Some(hits as f64 / samples.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::digest_tensors;
    use crate::tensor::{from_f64, to_f64_vec};
    use crate::weathergen::generate_pairs;

    fn tiny(wpg: bool, desm: bool) -> Stage2Config {
        Stage2Config {
            iterations: 4,
            batch_size: 2,
            crop_size: 16,
            levels: 2,
            base_channels: 4,
            time_embed_dim: 8,
            lr: 1e-3,
            wpg_on: wpg,
            desm_on: desm,
            balance_on: desm,
            log_every: 1,
            ..Default::default()
        }
    }

    fn bank() -> PromptBank {
        PromptBank::init(3, 4, 16, DType::F32).unwrap()
    }

    fn trainer(cfg: &Stage2Config) -> Trainer {
        if cfg.wpg_on {
            let b = bank();
            let p = encode_bank(&b, DType::F32).unwrap();
            Trainer::new(cfg, Some(p), Some(b)).unwrap()
        } else {
            Trainer::new(cfg, None, None).unwrap()
        }
    }

    fn data() -> Vec<PairImages> {
        generate_pairs(5, 2, 16)
    }

    #[test]
    fn config_toml_round_trip_and_unknown_keys() {
        let cfg = tiny(true, true);
        assert_eq!(Stage2Config::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert!(Stage2Config::from_toml("bogus = 1").is_err());
        let bad = Stage2Config { desm_on: false, ..tiny(true, true) };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ema_reaches_fixed_point() {
        let mut store = ParamStore::new(DType::F64);
        store
            .insert("w", candle_core::Var::from_tensor(&from_f64(vec![2.0, -1.0], &[2], DType::F64).unwrap()).unwrap())
            .unwrap();
        let mut ema = EmaState::new(&store, 0.9).unwrap();
        for _ in 0..10 {
            ema.update(&store).unwrap();
        }
        assert_eq!(to_f64_vec(&ema.shadow()["w"]).unwrap(), vec![2.0, -1.0]);
        let mut other = ParamStore::new(DType::F64);
        other
            .insert("w", candle_core::Var::from_tensor(&from_f64(vec![1.0; 3], &[3], DType::F64).unwrap()).unwrap())
            .unwrap();
        assert!(ema.update(&other).is_err());
    }

    #[test]
    fn lambda_zero_leaves_residual_loss() {
        let cfg = Stage2Config { lambda_balance: 0.0, ..tiny(false, true) };
        let t = trainer(&cfg);
        let batch = sample_batch(&data(), &cfg, 0, DType::F32).unwrap();
        let (obj, _, _) = t.evaluate_objective(&batch, true).unwrap();
        assert!(obj.balance.is_some());
        assert_eq!(scalar_f64(&obj.total).unwrap(), scalar_f64(&obj.residual).unwrap());
    }

    #[test]
    fn oracle_prediction_has_zero_residual_loss() {
        let cfg = tiny(false, false);
        let batch = sample_batch(&data(), &cfg, 0, DType::F32).unwrap();
        let res = (&batch.degraded - &batch.clean).unwrap();
        let obj = objective(&res, &res, &ForwardAux::default(), &batch.labels, &cfg).unwrap();
        assert_eq!(scalar_f64(&obj.total).unwrap(), 0.0);
        assert!(obj.probe.is_none() && obj.balance.is_none());
    }

    #[test]
    fn save_load_is_bit_identical_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = Stage2Config { iterations: 6, ..tiny(true, true) };
        let d = data();
        let mut straight = trainer(&cfg);
        let full = straight.run(&d, None).unwrap();

        let mut first = trainer(&Stage2Config { iterations: 3, ..cfg.clone() });
        first.run(&d, None).unwrap();
        let path = dir.path().join("ckpt.safetensors");
        first.save(&path).unwrap();
        let mut resumed = Trainer::load(&path).unwrap();
        assert_eq!(resumed.model().params().digest().unwrap(), first.model().params().digest().unwrap());
        assert_eq!(digest_tensors(resumed.ema().shadow()).unwrap(), digest_tensors(first.ema().shadow()).unwrap());
        resumed.set_iterations(6);
        let tail = resumed.run(&d, None).unwrap();
        let a: Vec<f64> = full[3..].iter().map(|r| r.total).collect();
        let b: Vec<f64> = tail.iter().map(|r| r.total).collect();
        assert_eq!(a, b);
        assert_eq!(resumed.model().params().digest().unwrap(), straight.model().params().digest().unwrap());
    }

    #[test]
    fn selection_accuracy_is_a_fraction_and_needs_guidance() {
        let samples: Vec<(String, PairImages)> =
            data().into_iter().enumerate().map(|(i, p)| (format!("s{i}"), p)).collect();
        let loaded = |cfg: &Stage2Config| {
            let tr = trainer(cfg);
            LoadedModel {
                model: tr.model().clone(),
                prompts: tr.prompts().cloned(),
                schedule: tr.schedule().clone(),
                config: cfg.clone(),
                digest: String::new(),
            }
        };
        let guided = loaded(&tiny(true, true));
        let t = guided.schedule.steps();
        let a = selection_accuracy(&guided, &samples, t, 3).unwrap().unwrap();
        assert!((0.0..=1.0).contains(&a));
        assert_eq!(selection_accuracy(&guided, &samples, t, 3).unwrap(), Some(a));
        assert_eq!(selection_accuracy(&loaded(&tiny(false, true)), &samples, t, 3).unwrap(), None);
        assert!(selection_accuracy(&guided, &[], t, 3).is_err());
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        trainer(&tiny(false, true)).save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(Trainer::load(&path).is_err());
        assert!(load_for_inference(&path, true).is_err());
    }

    #[test]
    fn ema_and_raw_weights_differ_after_training() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        let mut t = trainer(&tiny(false, false));
        t.run(&data(), None).unwrap();
        t.save(&path).unwrap();
        let ema = load_for_inference(&path, true).unwrap();
        let raw = load_for_inference(&path, false).unwrap();
        assert_ne!(ema.digest, raw.digest);
        let samples: Vec<(String, PairImages)> = data().into_iter().take(2).map(|p| ("x".into(), p)).collect();
        let opts = crate::evalkit::EvalOptions::default();
        let (a, _) = evaluate_model(&ema, &samples, &opts).unwrap();
        let (b, _) = evaluate_model(&raw, &samples, &opts).unwrap();
        assert_ne!(a[0].psnr_restored, b[0].psnr_restored);
    }

    #[test]
    fn ablation_parameter_sets_nest() {
        let names = |wpg, desm| -> std::collections::BTreeSet<String> {
            trainer(&tiny(wpg, desm)).model().params().names().into_iter().collect()
        };
        let base = names(false, false);
        let wpg = names(true, false);
        let desm = names(false, true);
        let full = names(true, true);
        assert!(base.is_subset(&wpg) && base.is_subset(&desm));
        assert!(wpg.is_subset(&full) && desm.is_subset(&full));
        assert!(base.len() < wpg.len() && base.len() < desm.len());
    }

    #[test]
    fn guidance_requires_prompts() {
        assert!(Trainer::new(&tiny(true, false), None, None).is_err());
    }

    #[test]
    fn run_logs_json_lines() {
        let mut t = trainer(&tiny(true, true));
        let mut buf = Vec::new();
        t.run(&data(), Some(&mut buf)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<StepRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[3].iter, 4);
        assert!(lines.iter().all(|r| r.probe_loss.is_some() && r.l_balance.is_some()));
    }
}
