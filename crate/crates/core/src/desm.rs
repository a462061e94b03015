//! Dynamic expert selection: noisy gating, Top(P) routing over a variable
//! number of feed-forward experts, and the batch load-balance loss.

use candle_core::{DType, Tensor, Var};
use rand::Rng;

use crate::layers::{Conv2d, Init};
use crate::params::ParamBuilder;
use crate::prompt_trainer::argmax_lowest;
use crate::tensor::{global_avg_pool, softmax_last, softplus};
use crate::{Error, Result};

pub const DEFAULT_EXPERTS: usize = 4;
pub const DEFAULT_THRESHOLD: f64 = 0.4;

/// Pointwise feed-forward expert: 1x1 expand to twice the channels, GELU, 1x1 back.
#[derive(Clone)]
pub struct Expert {
    up: Conv2d,
    down: Conv2d,
}

impl Expert {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            up: Conv2d::new(pb, &format!("{name}.up"), channels, 2 * channels, 1, 1, Init::He)?,
            down: Conv2d::new(pb, &format!("{name}.down"), 2 * channels, channels, 1, 1, Init::Scaled(0.5))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&crate::ops::gelu(&self.up.forward(x)?)?)
    }
}

/// One routed row.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub active: Vec<bool>,
    /// Probabilities on the active set, exactly zero elsewhere.
    pub weights: Vec<f64>,
}

impl Route {
    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Activates experts in descending probability (ties to the lower index)
/// until the cumulative probability reaches `p`. At least one expert is
/// always active; active weights are not renormalised.
pub fn top_p_route(probs: &[f64], p: f64) -> Result<Route> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::OutOfRange(format!("routing threshold {p} outside [0, 1]")));
    }
    if probs.is_empty() {
        return Err(Error::InvalidArgument("no experts to route".into()));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut active = vec![false; probs.len()];
    let mut weights = vec![0.0; probs.len()];
    let mut cumulative = 0.0;
    for &i in &order {
        active[i] = true;
        weights[i] = probs[i];
        cumulative += probs[i];
        if cumulative >= p {
            break;
        }
    }
    Ok(Route { active, weights })
}

/// Gate output and routing for a batch at one level.
#[derive(Debug, Clone)]
pub struct RoutingDecision {
    /// Softmax probabilities `[B, n]`, differentiable in the gate.
    pub probs: Tensor,
    pub routes: Vec<Route>,
}

impl RoutingDecision {
    pub fn experts(&self) -> usize {
        self.routes.first().map_or(0, |r| r.active.len())
    }

    pub fn prob_values(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.probs.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }

    /// `[B, n]` mask of active experts as a 0/1 tensor.
    pub fn mask(&self, dtype: DType) -> Result<Tensor> {
        let n = self.experts();
        let flat: Vec<f64> = self
            .routes
            .iter()
            .flat_map(|r| r.active.iter().map(|&a| if a { 1.0 } else { 0.0 }))
            .collect();
        crate::tensor::from_f64(flat, &[self.routes.len(), n], dtype)
    }

    /// `r_i`: probabilities where active, zero elsewhere; differentiable.
    pub fn weights(&self) -> Result<Tensor> {
        Ok((&self.probs * self.mask(self.probs.dtype())?)?)
    }

    /// Fraction of samples whose highest-probability expert is `i`.
    pub fn argmax_fractions(&self) -> Result<Vec<f64>> {
        let rows = self.prob_values()?;
        let mut f = vec![0.0; self.experts()];
        for r in &rows {
            f[argmax_lowest(r)] += 1.0 / rows.len() as f64;
        }
        Ok(f)
    }

    /// Fraction of samples in which each expert is active.
    pub fn activation_frequency(&self) -> Vec<f64> {
        let mut f = vec![0.0; self.experts()];
        for r in &self.routes {
            for (i, &a) in r.active.iter().enumerate() {
                if a {
                    f[i] += 1.0 / self.routes.len() as f64;
                }
            }
        }
        f
    }
}

/// DESM parameters for one encoder level.
#[derive(Clone)]
pub struct Desm {
    pub experts: Vec<Expert>,
    pub w_gate: Var,
    pub w_noise: Var,
    threshold: f64,
}

impl Desm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, experts: usize, threshold: f64) -> Result<Self> {
        if experts == 0 {
            return Err(Error::Config("DESM needs at least one expert".into()));
        }
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Config(format!("routing threshold {threshold} outside [0, 1]")));
        }
        let experts = (0..experts)
            .map(|i| Expert::new(pb, &format!("{name}.expert_{i}"), channels))
            .collect::<Result<Vec<_>>>()?;
        let std = 1.0 / (channels as f64).sqrt();
        Ok(Self {
            w_gate: pb.normal(&format!("{name}.gate.w_g"), &[channels, experts.len()], std)?,
            w_noise: pb.normal(&format!("{name}.gate.w_noise"), &[channels, experts.len()], std)?,
            experts,
            threshold,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// `g = pool(F_pa) W_g + xi * softplus(pool(F_pa) W_noise)`; `xi` is
    /// `[B, n]` standard normal noise, present only when training.
    pub fn gate_logits(&self, f_pa: &Tensor, noise: Option<&Tensor>) -> Result<Tensor> {
        let pooled = global_avg_pool(f_pa)?;
        gate_from_pooled(&pooled, &self.w_gate, &self.w_noise, noise)
    }

    pub fn route(&self, f_pa: &Tensor, noise: Option<&Tensor>) -> Result<RoutingDecision> {
        let probs = softmax_last(&self.gate_logits(f_pa, noise)?)?;
        let routes = probs
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?
            .iter()
            .map(|r| top_p_route(r, self.threshold))
            .collect::<Result<Vec<_>>>()?;
        Ok(RoutingDecision { probs, routes })
    }

    /// `sum_i r_i e_i(F_e)`, evaluating each expert only on the samples that
    /// route to it.
    pub fn mix(&self, f_e: &Tensor, decision: &RoutingDecision) -> Result<Tensor> {
        let weights = decision.weights()?;
        let mut out = f_e.zeros_like()?;
        for (i, expert) in self.experts.iter().enumerate() {
            let rows: Vec<u32> = decision
                .routes
                .iter()
                .enumerate()
                .filter(|(_, r)| r.active[i])
                .map(|(b, _)| b as u32)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let idx = Tensor::new(rows.as_slice(), &crate::tensor::cpu())?;
            let y = expert.forward(&f_e.index_select(&idx, 0)?)?;
            let w = weights.narrow(1, i, 1)?.contiguous()?.index_select(&idx, 0)?;
            let y = y.broadcast_mul(&w.reshape((rows.len(), 1, 1, 1))?)?;
            out = out.index_add(&idx, &y, 0)?;
        }
        Ok(out)
    }

    /// Dense reference: every expert on every sample, masked weights.
    pub fn mix_dense(&self, f_e: &Tensor, decision: &RoutingDecision) -> Result<Tensor> {
        let weights = decision.weights()?;
        let b = f_e.dim(0)?;
        let mut out = f_e.zeros_like()?;
        for (i, expert) in self.experts.iter().enumerate() {
            let w = weights.narrow(1, i, 1)?.reshape((b, 1, 1, 1))?;
            out = (out + expert.forward(f_e)?.broadcast_mul(&w)?)?;
        }
        Ok(out)
    }

    /// Routes on `F_pa`, mixes experts over `F_e`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        f_e: &Tensor,
        f_pa: &Tensor,
        training: bool,
        rng: &mut R,
    ) -> Result<(Tensor, RoutingDecision)> {
        crate::tensor::ensure_same_shape(f_e, f_pa, "DESM inputs")?;
        let noise = if training {
            let b = f_pa.dim(0)?;
            Some(crate::tensor::randn(rng, &[b, self.experts.len()], f_pa.dtype())?)
        } else {
            None
        };
        let decision = self.route(f_pa, noise.as_ref())?;
        Ok((self.mix(f_e, &decision)?, decision))
    }
}

pub fn gate_from_pooled(pooled: &Tensor, w_gate: &Tensor, w_noise: &Tensor, noise: Option<&Tensor>) -> Result<Tensor> {
    let clean = pooled.matmul(w_gate)?;
    match noise {
        None => Ok(clean),
        Some(xi) => {
            let scale = softplus(&pooled.matmul(w_noise)?)?;
            Ok((clean + (xi * scale)?)?)
        }
    }
}

/// `n * sum_i f_i P_i` from plain numbers.
pub fn balance_value(f: &[f64], p: &[f64]) -> f64 {
    f.len() as f64 * f.iter().zip(p).map(|(a, b)| a * b).sum::<f64>()
}

/// Load-balance loss of one level: `f` (argmax fractions) is a constant,
/// `P` (mean probabilities) carries the gradient.
pub fn load_balance_loss(decision: &RoutingDecision) -> Result<Tensor> {
    let b = decision.probs.dim(0)?;
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = decision.experts();
    let f = crate::tensor::from_f64(decision.argmax_fractions()?, &[n], decision.probs.dtype())?;
    let p_frac = decision.probs.mean(0)?;
    Ok((p_frac * f)?.sum_all()?.affine(n as f64, 0.0)?)
}

/// Mean of the per-level losses.
pub fn load_balance_loss_levels(decisions: &[RoutingDecision]) -> Result<Tensor> {
    if decisions.is_empty() {
        return Err(Error::InvalidArgument("no routing decisions".into()));
    }
    let mut total = load_balance_loss(&decisions[0])?;
    for d in &decisions[1..] {
        total = (total + load_balance_loss(d)?)?;
    }
    Ok(total.affine(1.0 / decisions.len() as f64, 0.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::{randn, scalar_f64, to_f64_vec};

    #[test]
    fn routing_examples() {
        let probs = [0.5, 0.3, 0.15, 0.05];
        assert_eq!(top_p_route(&probs, 0.4).unwrap().weights, vec![0.5, 0.0, 0.0, 0.0]);
        assert_eq!(top_p_route(&probs, 0.7).unwrap().weights, vec![0.5, 0.3, 0.0, 0.0]);
        assert_eq!(top_p_route(&probs, 1.0).unwrap().active_count(), 4);
        assert_eq!(top_p_route(&[1.0, 0.0], 1.0).unwrap().active, vec![true, false]);
        assert_eq!(top_p_route(&probs, 0.0).unwrap().active_count(), 1);
        assert!(top_p_route(&probs, 1.1).is_err());
        assert!(top_p_route(&probs, -0.1).is_err());
    }

    #[test]
    fn ties_prefer_lower_index() {
        let r = top_p_route(&[0.25, 0.25, 0.25, 0.25], 0.5).unwrap();
        assert_eq!(r.active, vec![true, true, false, false]);
    }

    #[test]
    fn balance_closed_forms() {
        assert!((balance_value(&[0.25; 4], &[0.25; 4]) - 1.0).abs() < 1e-12);
        assert!((balance_value(&[1.0, 0.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]) - 4.0).abs() < 1e-12);
        assert!((balance_value(&[0.5, 0.5, 0.0, 0.0], &[0.4, 0.6, 0.0, 0.0]) - 2.0).abs() < 1e-12);
    }

    fn level(seed: u64) -> (ParamStore, Desm) {
        let mut store = ParamStore::new(DType::F64);
        let mut pb = ParamBuilder::new(&mut store, crate::rng::stream(seed, "t", 0));
        let d = Desm::new(&mut pb, "desm", 6, 4, 0.6).unwrap();
        drop(pb);
        (store, d)
    }

    #[test]
    fn sparse_mix_equals_dense_oracle() {
        let (_, d) = level(1);
        let mut rng = crate::rng::stream(2, "x", 0);
        for _ in 0..5 {
            let f_e = randn(&mut rng, &[5, 6, 4, 4], DType::F64).unwrap();
            let f_pa = randn(&mut rng, &[5, 6, 4, 4], DType::F64).unwrap();
            let decision = d.route(&f_pa, None).unwrap();
            let sparse = to_f64_vec(&d.mix(&f_e, &decision).unwrap()).unwrap();
            let dense = to_f64_vec(&d.mix_dense(&f_e, &decision).unwrap()).unwrap();
            assert_eq!(sparse, dense);
        }
    }

    #[test]
    fn inference_gate_is_deterministic() {
        let (_, d) = level(3);
        let mut rng = crate::rng::stream(4, "x", 0);
        let f = randn(&mut rng, &[2, 6, 3, 3], DType::F64).unwrap();
        let a = to_f64_vec(&d.gate_logits(&f, None).unwrap()).unwrap();
        let b = to_f64_vec(&d.gate_logits(&f, None).unwrap()).unwrap();
        assert_eq!(a, b);
        let decision = d.route(&f, None).unwrap();
        for row in decision.prob_values().unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_scale_is_softplus_of_zero_for_zero_input() {
        let n = 10_000;
        let mut rng = crate::rng::stream(5, "xi", 0);
        let pooled = Tensor::zeros((n, 3), DType::F64, &crate::tensor::cpu()).unwrap();
        let w = Tensor::zeros((3, 1), DType::F64, &crate::tensor::cpu()).unwrap();
        let xi = randn(&mut rng, &[n, 1], DType::F64).unwrap();
        let g = to_f64_vec(&gate_from_pooled(&pooled, &w, &w, Some(&xi)).unwrap()).unwrap();
        let mean = g.iter().sum::<f64>() / n as f64;
        let std = (g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let ln2 = std::f64::consts::LN_2;
        assert!(mean.abs() < 0.05 * ln2);
        assert!((std - ln2).abs() < 0.05 * ln2);
    }

    #[test]
    fn level_loss_matches_scalar_formula() {
        let (_, d) = level(6);
        let mut rng = crate::rng::stream(7, "x", 0);
        let f = randn(&mut rng, &[8, 6, 2, 2], DType::F64).unwrap();
        let decision = d.route(&f, None).unwrap();
        let probs = decision.prob_values().unwrap();
        let p: Vec<f64> = (0..4).map(|i| probs.iter().map(|r| r[i]).sum::<f64>() / 8.0).collect();
        let want = balance_value(&decision.argmax_fractions().unwrap(), &p);
        let got = scalar_f64(&load_balance_loss(&decision).unwrap()).unwrap();
        assert!((got - want).abs() < 1e-12);
    }
}
