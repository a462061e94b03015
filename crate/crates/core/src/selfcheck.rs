//! Analytic invariant suite run by `weatherdiff selfcheck`.

use candle_core::{DType, Tensor, Var};
use rand::Rng;

use crate::desm::{load_balance_loss, top_p_route, Route, RoutingDecision};
use crate::diffusion::{forward_sample_batch, implicit_sample, DiffusionSchedule, SamplingStrategy};
use crate::params::ParamStore;
use crate::pipeline::EmaState;
use crate::tensor::{from_f64, randn, scalar_f64, to_f64_vec};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Outcome = std::result::Result<String, String>;

fn run(name: &'static str, f: impl FnOnce() -> Result<Outcome>) -> CheckResult {
    let (passed, detail) = match f() {
        Ok(Ok(d)) => (true, d),
        Ok(Err(d)) => (false, d),
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult { name, passed, detail }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = to_f64_vec(&(a - b)?)?;
    Ok(d.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// `abar_T = 1` and `dbar_T = 0.9` for a grid of schedules.
pub fn schedule_constraints() -> Result<Outcome> {
    let mut worst = 0.0f64;
    for steps in [2usize, 3, 10, 50, 100, 1000] {
        for bt in [0.01, 0.1, 0.5, 1.0] {
            let s = DiffusionSchedule::new(steps, bt)?;
            worst = worst
                .max((s.alpha_bar_at(steps) - 1.0).abs())
                .max((s.delta_bar_at(steps) - 0.9).abs());
        }
    }
    Ok(if worst <= 1e-12 {
        Ok(format!("max deviation {worst:.1e}"))
    } else {
        Err(format!("terminal coefficients off by {worst:.3e}"))
    })
}

/// `I_T = 0.1 I_in + bbar_T eps` over random cases.
pub fn terminal_identity(cases: usize) -> Result<Outcome> {
    let mut rng = crate::rng::stream(11, "selfcheck-terminal", 0);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let steps = rng.random_range(2..=200);
        let bt = rng.random_range(0.01..0.5);
        let s = DiffusionSchedule::new(steps, bt)?;
        let clean = randn(&mut rng, &[1, 3, 4, 4], DType::F64)?;
        let degraded = randn(&mut rng, &[1, 3, 4, 4], DType::F64)?;
        let eps = randn(&mut rng, &[1, 3, 4, 4], DType::F64)?;
        let i_t = forward_sample_batch(&s, &clean, &degraded, &[steps], &eps)?;
        let expect = ((&degraded * 0.1)? + (&eps * s.beta_bar_terminal())?)?;
        worst = worst.max(max_abs_diff(&i_t, &expect)?);
    }
    Ok(if worst <= 1e-6 {
        Ok(format!("{cases} cases, max error {worst:.1e}"))
    } else {
        Err(format!("terminal state off by {worst:.3e}"))
    })
}

/// The sampler driven by the true residual recovers the clean image.
pub fn oracle_sampler(cases: usize) -> Result<Outcome> {
    let mut rng = crate::rng::stream(12, "selfcheck-oracle", 0);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let steps = rng.random_range(10..=200);
        let bt = rng.random_range(0.01..0.5);
        let s = DiffusionSchedule::new(steps, bt)?;
        let clean = randn(&mut rng, &[1, 3, 6, 5], DType::F64)?;
        let degraded = randn(&mut rng, &[1, 3, 6, 5], DType::F64)?;
        let residual = (&degraded - &clean)?;
        for sample_steps in [1usize, 2, 3, 10] {
            for strategy in [SamplingStrategy::NoiseProjected, SamplingStrategy::CoefficientStep] {
                let mut oracle = |_: &Tensor, _: &Tensor, _: usize| -> Result<Tensor> { Ok(residual.clone()) };
                let out = implicit_sample(&s, &mut oracle, &degraded, sample_steps, strategy, case as u64)?;
                worst = worst.max(max_abs_diff(&out, &clean)?);
            }
        }
    }
    Ok(if worst <= 1e-5 {
        Ok(format!("{cases} schedules x S in {{1,2,3,10}} x 2 strategies, max error {worst:.1e}"))
    } else {
        Err(format!("oracle sampling error {worst:.3e}"))
    })
}

fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    // occasional exact ties exercise the lower-index rule
    let tie = rng.random_bool(0.2);
    let raw: Vec<f64> = (0..n)
        .map(|_| if tie { rng.random_range(1..4) as f64 } else { rng.random::<f64>() + 1e-12 })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Sorted order used by the router: descending, ties to the lower index.
fn routing_order(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

/// Checks one routed vector; returns the violated property, if any.
pub fn top_p_violation(probs: &[f64], p: f64, route: &Route) -> Option<&'static str> {
    let order = routing_order(probs);
    let k = route.active_count();
    if k == 0 {
        return Some("no active expert");
    }
    if order.iter().take(k).any(|&i| !route.active[i]) {
        return Some("active set is not a prefix of the sorted order");
    }
    let prefix = |m: usize| order.iter().take(m).map(|&i| probs[i]).fold(0.0, |a, b| a + b);
    if prefix(k) < p && k < probs.len() {
        return Some("coverage below P");
    }
    if k > 1 && prefix(k - 1) >= p {
        return Some("prefix not minimal");
    }
    for i in 0..probs.len() {
        let expect = if route.active[i] { probs[i] } else { 0.0 };
        if route.weights[i] != expect {
            return Some("weights differ from probs on the active set or are nonzero elsewhere");
        }
    }
    None
}

/// Prefix, coverage, zeros and monotonicity over random probability vectors.
pub fn top_p_semantics(vectors: usize) -> Result<Outcome> {
    let mut rng = crate::rng::stream(13, "selfcheck-topp", 0);
    for case in 0..vectors {
        let n = [2usize, 4, 8, 16][case % 4];
        let probs = random_simplex(&mut rng, n);
        let (p1, p2) = {
            let a: f64 = rng.random();
            let b: f64 = rng.random();
            (a.min(b), a.max(b))
        };
        let r1 = top_p_route(&probs, p1)?;
        let r2 = top_p_route(&probs, p2)?;
        for (p, r) in [(p1, &r1), (p2, &r2)] {
            if let Some(why) = top_p_violation(&probs, p, r) {
                return Ok(Err(format!("{why} for probs {probs:?}, P = {p}")));
            }
        }
        if r1.active_count() > r2.active_count() {
            return Ok(Err(format!("active count not monotone in P for {probs:?}")));
        }
    }
    Ok(Ok(format!("{vectors} vectors, n in {{2,4,8,16}}")))
}

fn decision_from(rows: &[Vec<f64>], p: f64) -> Result<RoutingDecision> {
    let n = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let probs = from_f64(flat, &[rows.len(), n], DType::F64)?;
    let routes = rows.iter().map(|r| top_p_route(r, p)).collect::<Result<Vec<_>>>()?;
    Ok(RoutingDecision { probs, routes })
}

/// Uniform routing gives 1, collapsed routing gives `n`.
pub fn balance_closed_forms() -> Result<Outcome> {
    let mut worst = 0.0f64;
    for n in [2usize, 4, 8, 16] {
        let uniform = vec![vec![1.0 / n as f64; n]; 8];
        let mut onehot = vec![0.0; n];
        onehot[0] = 1.0;
        let collapsed = vec![onehot; 8];
        let u = scalar_f64(&load_balance_loss(&decision_from(&uniform, 0.4)?)?)?;
        let c = scalar_f64(&load_balance_loss(&decision_from(&collapsed, 0.4)?)?)?;
        worst = worst.max((u - 1.0).abs()).max((c - n as f64).abs());
    }
    Ok(if worst <= 1e-9 {
        Ok(format!("max deviation {worst:.1e}"))
    } else {
        Err(format!("balance closed form off by {worst:.3e}"))
    })
}

/// `k` updates toward a constant parameter follow `p + (s0 - p) d^k`.
pub fn ema_closed_form() -> Result<Outcome> {
    let mut store = ParamStore::new(DType::F64);
    let p = [0.3, -1.7, 2.5, 0.0];
    let s0 = [1.0, 0.5, -2.0, 4.0];
    store.insert("w", Var::from_tensor(&from_f64(p.to_vec(), &[4], DType::F64)?)?)?;
    let decay = 0.995;
    let mut shadow = std::collections::BTreeMap::new();
    shadow.insert("w".to_string(), from_f64(s0.to_vec(), &[4], DType::F64)?);
    let mut ema = EmaState::from_shadow(shadow, decay);
    let mut worst = 0.0f64;
    for k in 1..=500 {
        ema.update(&store)?;
        let got = to_f64_vec(&ema.shadow()["w"])?;
        for i in 0..4 {
            let expect = p[i] + (s0[i] - p[i]) * decay.powi(k);
            worst = worst.max((got[i] - expect).abs());
        }
    }
    Ok(if worst <= 1e-10 {
        Ok(format!("500 updates, max deviation {worst:.1e}"))
    } else {
        Err(format!("EMA closed form off by {worst:.3e}"))
    })
}

pub fn run_all() -> Vec<CheckResult> {
    vec![
        run("schedule constraints", schedule_constraints),
        run("terminal-state identity", || terminal_identity(100)),
        run("oracle-sampler exactness", || oracle_sampler(20)),
        run("Top(P) semantics", || top_p_semantics(10_000)),
        run("load-balance closed forms", balance_closed_forms),
        run("EMA closed form", ema_closed_form),
    ]
}

pub fn render_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in results {
        let mark = if r.passed { "PASS" } else { "FAIL" };
        out.push_str(&format!("{mark}  {:width$}  {}\n", r.name, r.detail));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_invariants_hold() {
        for r in run_all() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn violations_are_detected() {
        let probs = [0.5, 0.3, 0.2];
        let good = top_p_route(&probs, 0.6).unwrap();
        assert_eq!(top_p_violation(&probs, 0.6, &good), None);
        let too_many = Route {
            active: vec![true, true, true],
            weights: probs.to_vec(),
        };
        assert_eq!(top_p_violation(&probs, 0.6, &too_many), Some("prefix not minimal"));
        let wrong_order = Route {
            active: vec![false, true, false],
            weights: vec![0.0, 0.3, 0.0],
        };
        assert!(top_p_violation(&probs, 0.2, &wrong_order).is_some());
    }

    #[test]
    fn table_marks_failures() {
        let rows = [
            CheckResult { name: "a", passed: true, detail: "ok".into() },
            CheckResult { name: "bb", passed: false, detail: "bad".into() },
        ];
        let t = render_table(&rows);
        assert!(t.contains("PASS  a "));
        assert!(t.contains("FAIL  bb  bad"));
    }
}
