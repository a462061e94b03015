//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use candle_core::{DType, Tensor, Var};
use weatherdiff::diffusion::residual_loss;
use weatherdiff::desm::load_balance_loss_levels;
use weatherdiff::embedding::{FrozenEncoders, PromptBank};
use weatherdiff::prompt_trainer::{cross_entropy_loss, similarity_logits};
use weatherdiff::restorer::{PromptContext, Restorer, RestorerConfig};
use weatherdiff::tensor::{from_f64, l2_normalize_last, randn, scalar_f64, to_f64_vec};
use weatherdiff::Result;

/// Relative gradient error of one parameter tensor over the probed entries.
#[derive(Debug, Clone)]
pub struct FdCheck {
    pub name: String,
    pub entries: usize,
    pub rel_error: f64,
}

fn set_entry(var: &Var, values: &[f64], i: usize, v: f64) -> Result<()> {
    let mut vals = values.to_vec();
    vals[i] = v;
    var.set(&from_f64(vals, var.dims(), var.dtype())?)?;
    Ok(())
}

/// Five-point central differences against autograd for up to `per_var` evenly spaced
/// entries of every variable. Error is `|g - n| / max(|g|, |n|)` in the
/// 2-norm over the probed entries; both norms below `floor` count as agreement.
pub fn finite_difference(
    vars: &[(String, Var)],
    loss: &dyn Fn() -> Result<Tensor>,
    per_var: usize,
    h: f64,
    floor: f64,
) -> Result<Vec<FdCheck>> {
    let l = loss()?;
    let grads = l.backward()?;
    let mut out = Vec::new();
    for (name, var) in vars {
        let values = to_f64_vec(var.as_tensor())?;
        let g_all = match grads.get(var.as_tensor()) {
            Some(g) => to_f64_vec(g)?,
            None => vec![0.0; values.len()],
        };
        let n = values.len();
        let k = per_var.min(n);
        let (mut diff, mut ga, mut na) = (0.0, 0.0, 0.0);
        for j in 0..k {
            let i = j * n / k;
            let at = |offset: f64| -> Result<f64> {
                set_entry(var, &values, i, values[i] + offset)?;
                scalar_f64(&loss()?)
            };
            let numeric = (at(-2.0 * h)? - 8.0 * at(-h)? + 8.0 * at(h)? - at(2.0 * h)?) / (12.0 * h);
            set_entry(var, &values, i, values[i])?;
            diff += (g_all[i] - numeric).powi(2);
            ga += g_all[i].powi(2);
            na += numeric.powi(2);
        }
        let scale = ga.sqrt().max(na.sqrt());
        let rel_error = if scale < floor { 0.0 } else { diff.sqrt() / scale };
        out.push(FdCheck { name: name.clone(), entries: k, rel_error });
    }
    Ok(out)
}

pub fn worst(checks: &[FdCheck]) -> f64 {
    checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
}

/// Replaces every parameter with N(0, std^2) so zero-initialised branches
/// carry gradient.
pub fn randomize(vars: &[(String, Var)], seed: u64, std: f64) -> Result<()> {
    let mut rng = weatherdiff::rng::stream(seed, "fd-randomize", 0);
    for (_, v) in vars {
        v.set(&(randn(&mut rng, v.dims(), v.dtype())? * std)?)?;
    }
    Ok(())
}

pub fn model_vars(model: &Restorer, filter: impl Fn(&str) -> bool) -> Vec<(String, Var)> {
    model
        .params()
        .iter()
        .filter(|(k, _)| filter(k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

/// Tiny 64-bit restorer with guidance and experts on 8x8 inputs.
pub struct GradFixture {
    pub model: Restorer,
    pub prompts: PromptContext,
    pub i_t: Tensor,
    pub degraded: Tensor,
    pub res_true: Tensor,
    pub ts: Vec<usize>,
}

impl GradFixture {
    pub fn new() -> Result<Self> {
        let cfg = RestorerConfig {
            levels: 2,
            base_channels: 2,
            time_embed_dim: 4,
            width: 8,
            tokens: 2,
            seed: 4,
            ..Default::default()
        };
        let model = Restorer::new(&cfg, DType::F64)?;
        let all = model_vars(&model, |_| true);
        randomize(&all, 21, 0.3)?;
        let mut rng = weatherdiff::rng::stream(22, "fd-inputs", 0);
        let prompts = PromptContext {
            encoded: l2_normalize_last(&randn(&mut rng, &[3, 8], DType::F64)?)?,
        };
        let i_t = randn(&mut rng, &[2, 3, 8, 8], DType::F64)?;
        let degraded = randn(&mut rng, &[2, 3, 8, 8], DType::F64)?;
        let res_true = randn(&mut rng, &[2, 3, 8, 8], DType::F64)?;
        Ok(Self { model, prompts, i_t, degraded, res_true, ts: vec![17, 64] })
    }

    /// Forward pass with a fixed gate-noise stream. Returns
    /// `(L_res, L_balance, probe cross-entropy)`.
    pub fn losses(&self) -> Result<(Tensor, Tensor, Tensor)> {
        let mut rng = weatherdiff::rng::stream(23, "fd-gates", 0);
        let (res_hat, aux) =
            self.model
                .forward(&self.i_t, &self.degraded, &self.ts, 100, Some(&self.prompts), true, &mut rng)?;
        let l_res = residual_loss(&self.res_true, &res_hat)?;
        let l_bal = load_balance_loss_levels(&aux.decisions)?;
        let sel = aux.selection.expect("guidance is on");
        let probe = cross_entropy_loss(&sel.similarities.affine(10.0, 0.0)?, &[0, 2])?;
        Ok((l_res, l_bal, probe))
    }
}

/// Prompt cross-entropy against frozen encoders on two 8x8 images.
pub fn prompt_ce_check(per_var: usize) -> Result<Vec<FdCheck>> {
    let enc = FrozenEncoders::new(5, 3, 8, DType::F64)?;
    let bank = PromptBank::init(6, 3, 8, DType::F64)?;
    let mut rng = weatherdiff::rng::stream(7, "fd-images", 0);
    let images = (randn(&mut rng, &[3, 3, 8, 8], DType::F64)?.affine(0.2, 0.5))?;
    let vars: Vec<(String, Var)> = weatherdiff::Weather::ALL
        .iter()
        .map(|w| (format!("prompt.{w}"), bank.prompt(*w).clone()))
        .collect();
    let loss = || cross_entropy_loss(&similarity_logits(&enc, &bank, &images)?.affine(10.0, 0.0)?, &[0, 1, 2]);
    finite_difference(&vars, &loss, per_var, 1e-3, 1e-9)
}
