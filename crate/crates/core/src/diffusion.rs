//! Residual diffusion: coefficient schedule, closed-form forward process,
//! reverse-step mean/variance and few-step implicit sampling.
//!
//! The forward process moves a clean image `I_0` toward `0.1 * I_in` plus
//! Gaussian noise:
//!
//! ```text
//! I_t = I_0 + abar_t * I_res + bbar_t * eps - dbar_t * I_in,   I_res = I_in - I_0
//! ```
//!
//! with `abar_T = 1` and `dbar_T = 0.9`.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::tensor::{ensure_finite, ensure_same_shape};
use crate::{Error, Result, Weather};

/// Terminal value of the cumulative shared-distribution coefficient.
pub const DELTA_BAR_TERMINAL: f64 = 0.9;

/// Per-step and cumulative coefficients for `T` steps. Index `t - 1` holds step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    steps: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub delta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub beta_bar: Vec<f64>,
    pub delta_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear `abar_t = t/T`, `dbar_t = 0.9 t/T` and square-root
    /// `bbar_t = bbar_T sqrt(t/T)`; per-step values come from differencing.
    pub fn new(steps: usize, beta_bar_terminal: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs T >= 2, got {steps}"
            )));
        }
        if !(beta_bar_terminal > 0.0) || !beta_bar_terminal.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "terminal noise level must be positive, got {beta_bar_terminal}"
            )));
        }
        let tt = steps as f64;
        let alpha_bar: Vec<f64> = (1..=steps).map(|t| t as f64 / tt).collect();
        let delta_bar: Vec<f64> = (1..=steps)
            .map(|t| DELTA_BAR_TERMINAL * t as f64 / tt)
            .collect();
        let beta_bar: Vec<f64> = (1..=steps)
            .map(|t| beta_bar_terminal * (t as f64 / tt).sqrt())
            .collect();
        let diff = |v: &[f64]| -> Vec<f64> {
            (0..steps)
                .map(|i| if i == 0 { v[0] } else { v[i] - v[i - 1] })
                .collect()
        };
        let beta = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 0.0 } else { beta_bar[i - 1] };
                (beta_bar[i] * beta_bar[i] - prev * prev).max(0.0).sqrt()
            })
            .collect();
        Ok(Self {
            steps,
            alpha: diff(&alpha_bar),
            beta,
            delta: diff(&delta_bar),
            alpha_bar,
            beta_bar,
            delta_bar,
        })
    }

    /// Total number of steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    fn check_step(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps {
            return Err(Error::OutOfRange(format!(
                "timestep {t} outside [1, {}]",
                self.steps
            )));
        }
        Ok(t - 1)
    }

    fn cumulative(v: &[f64], t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            v[t - 1]
        }
    }

    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        Self::cumulative(&self.alpha_bar, t)
    }

    pub fn beta_bar_at(&self, t: usize) -> f64 {
        Self::cumulative(&self.beta_bar, t)
    }

    pub fn delta_bar_at(&self, t: usize) -> f64 {
        Self::cumulative(&self.delta_bar, t)
    }

    pub fn beta_bar_terminal(&self) -> f64 {
        self.beta_bar[self.steps - 1]
    }
}

/// Latent `I_t` together with its step index.
#[derive(Debug, Clone)]
pub struct DiffusionState {
    pub image: Tensor,
    pub t: usize,
}

/// A clean/degraded pair. Tensors may carry any layout as long as both agree.
#[derive(Debug, Clone)]
pub struct DegradedPair {
    pub clean: Tensor,
    pub degraded: Tensor,
    pub label: Weather,
}

impl DegradedPair {
    pub fn new(clean: Tensor, degraded: Tensor, label: Weather) -> Result<Self> {
        ensure_same_shape(&clean, &degraded, "degraded pair")?;
        Ok(Self {
            clean,
            degraded,
            label,
        })
    }

    /// `I_res = I_in - I_0`.
    pub fn residual(&self) -> Result<Tensor> {
        Ok((&self.degraded - &self.clean)?)
    }
}

/// Closed-form forward sample at step `t`.
pub fn forward_sample(
    s: &DiffusionSchedule,
    pair: &DegradedPair,
    t: usize,
    eps: &Tensor,
) -> Result<DiffusionState> {
    s.check_step(t)?;
    ensure_same_shape(&pair.clean, eps, "forward_sample noise")?;
    let residual = pair.residual()?;
    let image = ((&pair.clean + (residual * s.alpha_bar_at(t))?)? + (eps * s.beta_bar_at(t))?)?;
    let image = (image - (&pair.degraded * s.delta_bar_at(t))?)?;
    Ok(DiffusionState { image, t })
}

fn per_sample_coeff(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![values.len()];
    shape.extend(std::iter::repeat(1).take(like.rank() - 1));
    Ok(Tensor::from_vec(values.to_vec(), shape, &Device::Cpu)?.to_dtype(like.dtype())?)
}

/// Batched forward sample: row `b` of the leading dim uses step `ts[b]`.
pub fn forward_sample_batch(
    s: &DiffusionSchedule,
    clean: &Tensor,
    degraded: &Tensor,
    ts: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    ensure_same_shape(clean, degraded, "forward_sample_batch")?;
    ensure_same_shape(clean, eps, "forward_sample_batch noise")?;
    if clean.dim(0)? != ts.len() {
        return Err(Error::Shape(format!(
            "{} timesteps for a batch of {}",
            ts.len(),
            clean.dim(0)?
        )));
    }
    for &t in ts {
        s.check_step(t)?;
    }
    let ab: Vec<f64> = ts.iter().map(|&t| s.alpha_bar_at(t)).collect();
    let bb: Vec<f64> = ts.iter().map(|&t| s.beta_bar_at(t)).collect();
    let db: Vec<f64> = ts.iter().map(|&t| s.delta_bar_at(t)).collect();
    let residual = (degraded - clean)?;
    let out = (clean + residual.broadcast_mul(&per_sample_coeff(&ab, clean)?)?)?;
    let out = (out + eps.broadcast_mul(&per_sample_coeff(&bb, clean)?)?)?;
    Ok((out - degraded.broadcast_mul(&per_sample_coeff(&db, clean)?)?)?)
}

/// Mean and standard deviation of the learned reverse step `t -> t-1`.
pub fn reverse_mean_sigma(
    s: &DiffusionSchedule,
    state: &DiffusionState,
    degraded: &Tensor,
    res_hat: &Tensor,
    eps_hat: &Tensor,
) -> Result<(Tensor, f64)> {
    let i = s.check_step(state.t).map_err(|_| {
        Error::OutOfRange(format!("cannot reverse from step {}", state.t))
    })?;
    ensure_same_shape(&state.image, res_hat, "reverse residual")?;
    ensure_same_shape(&state.image, eps_hat, "reverse noise")?;
    ensure_same_shape(&state.image, degraded, "reverse degraded")?;
    let (alpha, beta, delta) = (s.alpha[i], s.beta[i], s.delta[i]);
    let bbar = s.beta_bar[i];
    let mean = ((&state.image - (res_hat * alpha)?)? + (degraded * delta)?)?;
    let mean = (mean - (eps_hat * (beta * beta / bbar))?)?;
    let sigma = beta * s.beta_bar_at(state.t - 1) / bbar;
    Ok((mean, sigma))
}

/// Noise implied by a residual estimate, by inverting the forward closed form.
pub fn estimate_noise(
    s: &DiffusionSchedule,
    state: &DiffusionState,
    degraded: &Tensor,
    res_hat: &Tensor,
) -> Result<Tensor> {
    s.check_step(state.t)?;
    ensure_same_shape(&state.image, res_hat, "estimate_noise residual")?;
    ensure_same_shape(&state.image, degraded, "estimate_noise degraded")?;
    let bbar = s.beta_bar_at(state.t);
    if bbar == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "zero noise level at step {}",
            state.t
        )));
    }
    let clean_hat = (degraded - res_hat)?;
    let num = ((&state.image - clean_hat)? - (res_hat * s.alpha_bar_at(state.t))?)?;
    let num = (num + (degraded * s.delta_bar_at(state.t))?)?;
    Ok((num / bbar)?)
}

/// Anything that predicts `I_res` from `(I_t, I_in, t)`.
pub trait ResidualPredictor {
    fn predict_residual(&mut self, i_t: &Tensor, degraded: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> ResidualPredictor for F
where
    F: FnMut(&Tensor, &Tensor, usize) -> Result<Tensor>,
{
    fn predict_residual(&mut self, i_t: &Tensor, degraded: &Tensor, t: usize) -> Result<Tensor> {
        self(i_t, degraded, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Re-noise with the implied noise estimate after every jump.
    #[default]
    NoiseProjected,
    /// Coefficient-difference form of the single-step update.
    CoefficientStep,
}

impl std::str::FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise_projected" => Ok(Self::NoiseProjected),
            "coefficient_step" => Ok(Self::CoefficientStep),
            other => Err(Error::InvalidArgument(format!("unknown strategy `{other}`"))),
        }
    }
}

/// `S` timesteps uniformly spaced from `T` down to 1, both endpoints included.
pub fn sampling_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::OutOfRange(format!(
            "sampling steps {steps} outside [1, {total}]"
        )));
    }
    if steps == 1 {
        return Ok(vec![total]);
    }
    let spacing = (total - 1) as f64 / (steps - 1) as f64;
    Ok((0..steps)
        .map(|k| total - (k as f64 * spacing).round() as usize)
        .collect())
}

/// Terminal state `I_T = 0.1 I_in + bbar_T eps` with seeded noise.
pub fn terminal_state(s: &DiffusionSchedule, degraded: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = crate::rng::stream(seed, "sample-noise", 0);
    let eps = crate::tensor::randn(&mut rng, degraded.dims(), degraded.dtype())?;
    let t = s.steps();
    Ok(((degraded * (1.0 - s.delta_bar_at(t)))? + (eps * s.beta_bar_at(t))?)?)
}

/// Deterministic few-step restoration. Makes exactly `steps` model calls and
/// returns `I_in - res_hat` from the last visited step.
pub fn implicit_sample<M: ResidualPredictor + ?Sized>(
    s: &DiffusionSchedule,
    model: &mut M,
    degraded: &Tensor,
    steps: usize,
    strategy: SamplingStrategy,
    seed: u64,
) -> Result<Tensor> {
    let schedule = sampling_timesteps(s.steps(), steps)?;
    let mut current = terminal_state(s, degraded, seed)?;
    for (k, &t) in schedule.iter().enumerate() {
        let res_hat = model.predict_residual(&current, degraded, t)?;
        ensure_same_shape(&current, &res_hat, "model output")?;
        ensure_finite(&res_hat, &format!("model output at step {t}"))?;
        let Some(&next) = schedule.get(k + 1) else {
            return Ok((degraded - res_hat)?);
        };
        current = match strategy {
            SamplingStrategy::NoiseProjected => {
                let state = DiffusionState {
                    image: current,
                    t,
                };
                let eps_hat = estimate_noise(s, &state, degraded, &res_hat)?;
                let clean_hat = (degraded - &res_hat)?;
                let x = (clean_hat + (&res_hat * s.alpha_bar_at(next))?)?;
                let x = (x - (degraded * s.delta_bar_at(next))?)?;
                (x + (eps_hat * s.beta_bar_at(next))?)?
            }
            SamplingStrategy::CoefficientStep => {
                let da = s.alpha_bar_at(t) - s.alpha_bar_at(next);
                let dd = s.delta_bar_at(t) - s.delta_bar_at(next);
                ((&current - (&res_hat * da)?)? + (degraded * dd)?)?
            }
        };
    }
    unreachable!("schedule is never empty")
}

/// Mean absolute error, differentiable in both arguments.
pub fn residual_loss(res_true: &Tensor, res_hat: &Tensor) -> Result<Tensor> {
    ensure_same_shape(res_true, res_hat, "residual_loss")?;
    Ok((res_true - res_hat)?.abs()?.mean_all()?)
}

pub fn residual_loss_value(res_true: &Tensor, res_hat: &Tensor) -> Result<f64> {
    crate::tensor::scalar_f64(&residual_loss(res_true, res_hat)?.to_dtype(DType::F64)?)
}
