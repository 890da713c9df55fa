use log::warn;

use super::{forward_marginal, forward_trajectory, posterior, reverse_distributions, terminal_prior};
use crate::corpus::TokenSequence;
use crate::denoiser::Denoiser;
use crate::rng::seeded;
use crate::schedule::ScheduleTable;
use crate::{Error, Result};

pub const EXACT_MAX_CATEGORIES: usize = 4;
pub const EXACT_MAX_STEPS: usize = 6;
const EXACT_MAX_STATES: usize = 1 << 20;
const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VlbMode {
    /// Enumerates every joint `x_t`; small `K`, `T` and length only.
    Exact,
    /// Monte Carlo over forward trajectories.
    Sampled { samples: usize, seed: u64 },
    /// Exact when feasible, otherwise sampled.
    Auto { samples: usize, seed: u64 },
}

/// Variational bound in nats, summed over active positions.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VlbReport {
    pub prior: f64,
    /// `intermediate[t − 2]` is the KL term for step `t`, `t = 2..=T`.
    pub intermediate: Vec<f64>,
    pub reconstruction: f64,
    pub total: f64,
    /// Standard error of `total`; zero when computed exactly.
    pub std_error: f64,
    pub exact: bool,
}

fn exact_feasible(x0: &TokenSequence, table: &ScheduleTable) -> bool {
    let k = x0.vocab().categories();
    let states = (k + 1).checked_pow(x0.len() as u32);
    k <= EXACT_MAX_CATEGORIES && table.steps() <= EXACT_MAX_STEPS && states.is_some_and(|s| s <= EXACT_MAX_STATES)
}

pub fn vlb<D: Denoiser + ?Sized>(x0: &TokenSequence, denoiser: &D, table: &ScheduleTable, mode: VlbMode) -> Result<VlbReport> {
    table.check_covers(x0.len())?;
    if x0.contains_mask() {
        return Err(Error::TokenRange {
            token: x0.vocab().mask(),
            categories: x0.vocab().categories(),
        });
    }
    match mode {
        VlbMode::Exact => {
            if !exact_feasible(x0, table) {
                return Err(Error::Config(format!(
                    "exact VLB needs K <= {EXACT_MAX_CATEGORIES}, T <= {EXACT_MAX_STEPS} and a short sequence"
                )));
            }
            exact(x0, denoiser, table)
        }
        VlbMode::Sampled { samples, seed } => sampled(x0, denoiser, table, samples, seed),
        VlbMode::Auto { samples, seed } => {
            if exact_feasible(x0, table) {
                exact(x0, denoiser, table)
            } else {
                sampled(x0, denoiser, table, samples, seed)
            }
        }
    }
}

fn prior_term(x0: &TokenSequence, table: &ScheduleTable) -> Result<f64> {
    let vocab = x0.vocab();
    let t = table.steps();
    x0.active()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let row = table.row(i);
            Ok(forward_marginal(x, row, t, vocab)?.kl(&terminal_prior(row, vocab)?))
        })
        .sum()
}

/// `Σ_i KL(q(x_{t−1} | x_t, x_0) ‖ p_θ(x_{t−1} | x_t))` for `t ≥ 2`.
fn kl_term<D: Denoiser + ?Sized>(x0: &TokenSequence, xt: &TokenSequence, denoiser: &D, table: &ScheduleTable, t: usize) -> Result<f64> {
    let vocab = x0.vocab();
    let model = reverse_distributions(xt, denoiser, table, t)?;
    let mut total = 0.0;
    for (i, p) in model.iter().enumerate() {
        let q = posterior(xt.active()[i], x0.active()[i], table.row(i), t, vocab)?;
        total += q.kl(p);
    }
    Ok(total)
}

/// `−Σ_i log p_θ(x_0 | x_1)`.
fn reconstruction_term<D: Denoiser + ?Sized>(x0: &TokenSequence, x1: &TokenSequence, denoiser: &D, table: &ScheduleTable) -> Result<f64> {
    let model = reverse_distributions(x1, denoiser, table, 1)?;
    let mut total = 0.0;
    for (p, &x) in model.iter().zip(x0.active()) {
        let prob = p.prob(x);
        if prob < LOG_FLOOR {
            warn!("reconstruction probability {prob:e} floored at {LOG_FLOOR:e}");
        }
        total -= prob.max(LOG_FLOOR).ln();
    }
    Ok(total)
}

/// Visits every joint `x_t` with positive probability under `q(x_t | x_0)`.
fn for_each_state<F>(x0: &TokenSequence, table: &ScheduleTable, t: usize, mut visit: F) -> Result<()>
where
    F: FnMut(&TokenSequence, f64) -> Result<()>,
{
    let vocab = x0.vocab();
    let supports = x0
        .active()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let m = forward_marginal(x, table.row(i), t, vocab)?;
            Ok(m.probs()
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(s, p)| (s, *p))
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let n = supports.len();
    let mut digits = vec![0usize; n];
    loop {
        let state: Vec<usize> = digits.iter().zip(&supports).map(|(&d, s)| s[d].0).collect();
        let prob: f64 = digits.iter().zip(&supports).map(|(&d, s)| s[d].1).product();
        visit(&x0.with_active(state)?, prob)?;
        let mut i = 0;
        loop {
            if i == n {
                return Ok(());
            }
            digits[i] += 1;
            if digits[i] < supports[i].len() {
                break;
            }
            digits[i] = 0;
            i += 1;
        }
    }
}

fn exact<D: Denoiser + ?Sized>(x0: &TokenSequence, denoiser: &D, table: &ScheduleTable) -> Result<VlbReport> {
    let steps = table.steps();
    let prior = prior_term(x0, table)?;
    let mut intermediate = Vec::with_capacity(steps.saturating_sub(1));
    for t in 2..=steps {
        let mut acc = 0.0;
        for_each_state(x0, table, t, |xt, p| {
            acc += p * kl_term(x0, xt, denoiser, table, t)?;
            Ok(())
        })?;
        intermediate.push(acc);
    }
    let mut reconstruction = 0.0;
    for_each_state(x0, table, 1, |x1, p| {
        reconstruction += p * reconstruction_term(x0, x1, denoiser, table)?;
        Ok(())
    })?;
    let total = prior + intermediate.iter().sum::<f64>() + reconstruction;
    Ok(VlbReport {
        prior,
        intermediate,
        reconstruction,
        total,
        std_error: 0.0,
        exact: true,
    })
}

fn sampled<D: Denoiser + ?Sized>(x0: &TokenSequence, denoiser: &D, table: &ScheduleTable, samples: usize, seed: u64) -> Result<VlbReport> {
    if samples == 0 {
        return Err(Error::Config("sampled VLB needs at least one sample".into()));
    }
    let steps = table.steps();
    let mut rng = seeded(seed);
    let prior = prior_term(x0, table)?;
    let mut intermediate = vec![0.0; steps.saturating_sub(1)];
    let mut reconstruction = 0.0;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let traj = forward_trajectory(x0, table, &mut rng)?;
        let mut value = prior;
        for t in 2..=steps {
            let kl = kl_term(x0, &traj[t], denoiser, table, t)?;
            intermediate[t - 2] += kl;
            value += kl;
        }
        let rec = reconstruction_term(x0, &traj[1], denoiser, table)?;
        reconstruction += rec;
        value += rec;
        sum += value;
        sum_sq += value * value;
    }
    let n = samples as f64;
    intermediate.iter_mut().for_each(|v| *v /= n);
    reconstruction /= n;
    let mean = sum / n;
    let var = if samples > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(VlbReport {
        prior,
        intermediate,
        reconstruction,
        total: mean,
        std_error: (var / n).sqrt(),
        exact: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocab;
    use crate::denoiser::{OracleDenoiser, UniformDenoiser};
    use crate::schedule::linear_base_schedule;

    fn seq(tokens: Vec<usize>, k: usize) -> TokenSequence {
        TokenSequence::new("s", tokens, None, Vocab::new(k).unwrap()).unwrap()
    }

    #[test]
    fn oracle_denoiser_has_zero_bound() {
        let table = linear_base_schedule(4, 2, 0.9, 0.1).unwrap();
        let x0 = seq(vec![0, 1, 1], 2);
        let r = vlb(&x0, &OracleDenoiser::new(x0.clone()), &table, VlbMode::Exact).unwrap();
        assert!(r.total.abs() < 1e-12, "{r:?}");
    }

    #[test]
    fn uniform_denoiser_is_positive_and_sampled_agrees() {
        let table = linear_base_schedule(3, 3, 0.8, 0.2).unwrap();
        let x0 = seq(vec![2, 0], 3);
        let den = UniformDenoiser::new(3);
        let e = vlb(&x0, &den, &table, VlbMode::Exact).unwrap();
        assert!(e.total > 0.0);
        assert_eq!(e.intermediate.len(), 2);
        let s = vlb(&x0, &den, &table, VlbMode::Sampled { samples: 4000, seed: 3 }).unwrap();
        assert!((s.total - e.total).abs() < 4.0 * s.std_error.max(1e-9), "{e:?} {s:?}");
    }

    #[test]
    fn single_step_has_only_reconstruction_and_prior() {
        let table = linear_base_schedule(1, 2, 0.5, 0.5).unwrap();
        let x0 = seq(vec![1], 2);
        let r = vlb(&x0, &UniformDenoiser::new(2), &table, VlbMode::Exact).unwrap();
        assert!(r.intermediate.is_empty());
        assert!((r.total - r.prior - r.reconstruction).abs() < 1e-15);
    }

    #[test]
    fn exact_refuses_large_problems() {
        let table = linear_base_schedule(8, 2, 0.9, 0.1).unwrap();
        let x0 = seq(vec![0, 1], 2);
        assert!(matches!(
            vlb(&x0, &UniformDenoiser::new(2), &table, VlbMode::Exact),
            Err(Error::Config(_))
        ));
        let r = vlb(&x0, &UniformDenoiser::new(2), &table, VlbMode::Auto { samples: 10, seed: 0 }).unwrap();
        assert!(!r.exact);
    }

    #[test]
    fn pad_positions_do_not_contribute() {
        let table = linear_base_schedule(3, 2, 0.9, 0.1).unwrap();
        let a = seq(vec![0, 1], 2);
        let b = seq(vec![0, 1, 3, 3], 2);
        let den = UniformDenoiser::new(2);
        let ra = vlb(&a, &den, &table, VlbMode::Exact).unwrap();
        let rb = vlb(&b, &den, &table, VlbMode::Exact).unwrap();
        assert!((ra.total - rb.total).abs() < 1e-12);
    }
}
