//! Mask-and-replace categorical diffusion.
//!
//! Column-vector convention throughout: `[Q_t]_{ij} = q(x_t = i | x_{t−1} = j)`
//! and `p_t = Q_t p_{t−1}`. States `0..K` are real categories and state `K` is
//! the absorbing MASK. PAD positions never enter a kernel.

mod vlb;

use rand::Rng;

use crate::corpus::{TokenSequence, Vocab};
use crate::denoiser::{Denoiser, DenoiserOutput};
use crate::rng::sample_categorical;
use crate::schedule::{ScheduleRow, ScheduleTable};
use crate::{Error, Result};

pub use vlb::{vlb, VlbMode, VlbReport, EXACT_MAX_CATEGORIES, EXACT_MAX_STEPS};

const DISTRIBUTION_TOLERANCE: f64 = 1e-9;
const COLUMN_TOLERANCE: f64 = 1e-12;

/// Dense `(K+1) × (K+1)` column-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    states: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    /// Mask-and-replace step: keep with `α`, mask with `γ`, otherwise move to a
    /// uniformly drawn category (`β = (1 − α − γ)/K` each, the source included).
    pub fn build(alpha: f64, gamma: f64, categories: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidProbability(format!("alpha={alpha}, gamma={gamma}")));
        }
        let beta = (1.0 - alpha - gamma) / categories as f64;
        if beta < -COLUMN_TOLERANCE {
            return Err(Error::InvalidProbability(format!("negative beta {beta}")));
        }
        let beta = beta.max(0.0);
        let n = categories + 1;
        let mask = categories;
        let mut data = vec![0.0; n * n];
        for j in 0..categories {
            for i in 0..categories {
                data[i * n + j] = if i == j { alpha + beta } else { beta };
            }
            data[mask * n + j] = gamma;
        }
        data[mask * n + mask] = 1.0;
        Ok(Self { states: n, data })
    }

    pub fn for_step(row: &ScheduleRow, t: usize, categories: usize) -> Result<Self> {
        Self::build(row.alpha[t], row.gamma[t], categories)
    }

    pub fn states(&self) -> usize {
        self.states
    }

    /// `q(x_t = to | x_{t−1} = from)`.
    pub fn get(&self, to: usize, from: usize) -> f64 {
        self.data[to * self.states + from]
    }

    pub fn column(&self, from: usize) -> Vec<f64> {
        (0..self.states).map(|i| self.get(i, from)).collect()
    }

    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        (0..self.states)
            .map(|i| (0..self.states).map(|j| self.get(i, j) * p[j]).sum())
            .collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.states).map(|j| self.column(j).iter().sum()).collect()
    }
}

/// Probability vector with validated normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDistribution {
    probs: Vec<f64>,
}

impl CategoricalDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidProbability("negative or non-finite entry".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(Error::InvalidProbability(format!("entries sum to {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn delta(states: usize, at: usize) -> Self {
        let mut probs = vec![0.0; states];
        probs[at] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, state: usize) -> f64 {
        self.probs[state]
    }

    /// `KL(self ‖ other)`, with `other` floored at `1e-12` where `self` has mass.
    pub fn kl(&self, other: &Self) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, q)| p * (p.ln() - q.max(1e-12).ln()))
            .sum::<f64>()
            .max(0.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.probs, rng)
    }
}

fn check_step(table_steps: usize, t: usize) -> Result<()> {
    if t > table_steps {
        return Err(Error::Shape(format!("t={t} exceeds T={table_steps}")));
    }
    Ok(())
}

/// `q(x_t | x_0)`: `ᾱ_t + β̄_t` at `x_0`, `β̄_t` on other categories, `γ̄_t` on MASK.
pub fn forward_marginal(x0: usize, row: &ScheduleRow, t: usize, vocab: Vocab) -> Result<CategoricalDistribution> {
    if !vocab.is_real(x0) {
        return Err(Error::TokenRange {
            token: x0,
            categories: vocab.categories(),
        });
    }
    check_step(row.steps(), t)?;
    let mut probs = vec![row.beta_bar[t]; vocab.states()];
    probs[x0] += row.alpha_bar[t];
    probs[vocab.mask()] = row.gamma_bar[t];
    CategoricalDistribution::new(probs)
}

/// Prior over `x_T` implied by a fully absorbing schedule.
pub fn terminal_prior(row: &ScheduleRow, vocab: Vocab) -> Result<CategoricalDistribution> {
    let t = row.steps();
    let mut probs = vec![row.beta_bar[t]; vocab.states()];
    probs[vocab.mask()] = row.gamma_bar[t];
    let sum: f64 = probs.iter().sum();
    CategoricalDistribution::new(probs.into_iter().map(|p| p / sum).collect())
}

/// `q(x_t = to | x_{t−1} = from)` for a single step, without materialising `Q_t`.
fn step_prob(to: usize, from: usize, row: &ScheduleRow, t: usize, vocab: Vocab) -> f64 {
    let mask = vocab.mask();
    if from == mask {
        return if to == mask { 1.0 } else { 0.0 };
    }
    if to == mask {
        row.gamma[t]
    } else if to == from {
        row.alpha[t] + row.beta[t]
    } else {
        row.beta[t]
    }
}

/// Unnormalized posterior together with its normalizer `q(x_t | x_0)`.
fn posterior_parts(x_t: usize, x0: usize, row: &ScheduleRow, t: usize, vocab: Vocab) -> Result<(Vec<f64>, f64)> {
    if t == 0 {
        return Err(Error::Shape("posterior needs t >= 1".into()));
    }
    if x_t >= vocab.states() {
        return Err(Error::TokenRange {
            token: x_t,
            categories: vocab.categories(),
        });
    }
    let prev = forward_marginal(x0, row, t - 1, vocab)?;
    let weights: Vec<f64> = (0..vocab.states())
        .map(|s| step_prob(x_t, s, row, t, vocab) * prev.prob(s))
        .collect();
    let evidence = weights.iter().sum();
    Ok((weights, evidence))
}

/// `q(x_{t−1} | x_t, x_0) ∝ q(x_t | x_{t−1}) · q(x_{t−1} | x_0)`.
pub fn posterior(x_t: usize, x0: usize, row: &ScheduleRow, t: usize, vocab: Vocab) -> Result<CategoricalDistribution> {
    let (weights, evidence) = posterior_parts(x_t, x0, row, t, vocab)?;
    if !(evidence > 0.0) {
        return Err(Error::InconsistentEvidence(format!(
            "x_t={x_t} has zero probability given x_0={x0} at t={t}"
        )));
    }
    CategoricalDistribution::new(weights.into_iter().map(|w| w / evidence).collect())
}

/// x0-parameterized reverse kernel `Σ_{x̃0} q(x_{t−1} | x_t, x̃0) · p(x̃0 | x_t)`.
///
/// Hypotheses `x̃0` that cannot produce `x_t` are dropped and the remaining
/// weights renormalized.
pub fn reverse_distribution(
    x_t: usize,
    x0_probs: &[f64],
    row: &ScheduleRow,
    t: usize,
    vocab: Vocab,
) -> Result<CategoricalDistribution> {
    if x0_probs.len() != vocab.categories() {
        return Err(Error::Shape("denoiser row must cover the K real categories".into()));
    }
    let mut mix = vec![0.0; vocab.states()];
    let mut mass = 0.0;
    for (x0, &w) in x0_probs.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        let (weights, evidence) = posterior_parts(x_t, x0, row, t, vocab)?;
        if evidence <= 0.0 {
            continue;
        }
        mass += w;
        for (m, v) in mix.iter_mut().zip(weights) {
            *m += w * v / evidence;
        }
    }
    if !(mass > 0.0) {
        return Err(Error::InconsistentEvidence(format!(
            "denoiser gives no mass to any x_0 consistent with x_t={x_t} at t={t}"
        )));
    }
    let probs: Vec<f64> = mix.into_iter().map(|m| m / mass).collect();
    let sum: f64 = probs.iter().sum();
    CategoricalDistribution::new(probs.into_iter().map(|p| p / sum).collect())
}

fn check_clean(seq: &TokenSequence, table: &ScheduleTable) -> Result<()> {
    table.check_covers(seq.len())?;
    if table.categories() != seq.vocab().categories() {
        return Err(Error::Shape("schedule and sequence disagree on K".into()));
    }
    Ok(())
}

/// Draws `x_t ~ q(x_t | x_0)` independently per active position.
pub fn sample_forward<R: Rng + ?Sized>(
    seq: &TokenSequence,
    table: &ScheduleTable,
    t: usize,
    rng: &mut R,
) -> Result<TokenSequence> {
    check_clean(seq, table)?;
    let vocab = seq.vocab();
    let active = seq
        .active()
        .iter()
        .enumerate()
        .map(|(i, &x0)| Ok(forward_marginal(x0, table.row(i), t, vocab)?.sample(rng)))
        .collect::<Result<Vec<_>>>()?;
    seq.with_active(active)
}

/// One forward transition `x_{t−1} → x_t`.
pub fn sample_step<R: Rng + ?Sized>(
    prev: &TokenSequence,
    table: &ScheduleTable,
    t: usize,
    rng: &mut R,
) -> Result<TokenSequence> {
    check_clean(prev, table)?;
    if t == 0 || t > table.steps() {
        return Err(Error::Shape(format!("forward step t={t} outside 1..={}", table.steps())));
    }
    let vocab = prev.vocab();
    let mut probs = vec![0.0; vocab.states()];
    let active = prev
        .active()
        .iter()
        .enumerate()
        .map(|(i, &from)| {
            for (to, p) in probs.iter_mut().enumerate() {
                *p = step_prob(to, from, table.row(i), t, vocab);
            }
            sample_categorical(&probs, rng)
        })
        .collect();
    prev.with_active(active)
}

/// `x_0, x_1, …, x_T` sampled step by step.
pub fn forward_trajectory<R: Rng + ?Sized>(
    x0: &TokenSequence,
    table: &ScheduleTable,
    rng: &mut R,
) -> Result<Vec<TokenSequence>> {
    let mut out = vec![x0.clone()];
    for t in 1..=table.steps() {
        let next = sample_step(out.last().expect("non-empty"), table, t, rng)?;
        out.push(next);
    }
    Ok(out)
}

/// Per-position reverse kernels for `x_t` under the denoiser's prediction.
pub fn reverse_distributions<D: Denoiser + ?Sized>(
    x_t: &TokenSequence,
    denoiser: &D,
    table: &ScheduleTable,
    t: usize,
) -> Result<Vec<CategoricalDistribution>> {
    table.check_covers(x_t.len())?;
    if t == 0 || t > table.steps() {
        return Err(Error::Shape(format!("reverse step t={t} outside 1..={}", table.steps())));
    }
    let vocab = x_t.vocab();
    let out: DenoiserOutput = denoiser.predict(x_t, t)?;
    out.validate(vocab.categories(), x_t.len())?;
    x_t.active()
        .iter()
        .enumerate()
        .map(|(i, &s)| reverse_distribution(s, out.row(i), table.row(i), t, vocab))
        .collect()
}

/// Samples `x_{t−1}` from the x0-parameterized reverse kernel.
pub fn reverse_step<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    x_t: &TokenSequence,
    denoiser: &D,
    table: &ScheduleTable,
    t: usize,
    rng: &mut R,
) -> Result<TokenSequence> {
    let dists = reverse_distributions(x_t, denoiser, table, t)?;
    x_t.with_active(dists.iter().map(|d| d.sample(rng)).collect())
}

/// Runs `t = T..1` from `x_T`; returns `[x_T, x_{T−1}, …, x_0]`.
pub fn reverse_chain<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    x_t: &TokenSequence,
    denoiser: &D,
    table: &ScheduleTable,
    rng: &mut R,
) -> Result<Vec<TokenSequence>> {
    let mut out = vec![x_t.clone()];
    for t in (1..=table.steps()).rev() {
        let next = reverse_step(out.last().expect("non-empty"), denoiser, table, t, rng)?;
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{OracleDenoiser, UniformDenoiser};
    use crate::rng::seeded;
    use crate::schedule::linear_base_schedule;

    fn vocab(k: usize) -> Vocab {
        Vocab::new(k).unwrap()
    }

    #[test]
    fn identity_when_nothing_corrupts() {
        let q = TransitionMatrix::build(1.0, 0.0, 3).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(q.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn binary_matrix_entries() {
        let q = TransitionMatrix::build(0.7, 0.1, 2).unwrap();
        let c0 = q.column(0);
        let c1 = q.column(1);
        for (a, b) in c0.iter().zip([0.8, 0.1, 0.1]) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in c1.iter().zip([0.1, 0.8, 0.1]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(q.column(2), vec![0.0, 0.0, 1.0]);
        assert!(matches!(TransitionMatrix::build(0.8, 0.3, 2), Err(Error::InvalidProbability(_))));
    }

    #[test]
    fn marginal_endpoints() {
        let table = linear_base_schedule(5, 3, 0.9, 0.1).unwrap();
        let row = table.row(0);
        assert_eq!(forward_marginal(1, row, 0, vocab(3)).unwrap().probs(), &[0.0, 1.0, 0.0, 0.0]);
        let end0 = forward_marginal(0, row, 5, vocab(3)).unwrap();
        let end2 = forward_marginal(2, row, 5, vocab(3)).unwrap();
        for (a, b) in end0.probs().iter().zip(end2.probs()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((end0.prob(3) - 0.9).abs() < 1e-15);
        assert!(matches!(forward_marginal(3, row, 1, vocab(3)), Err(Error::TokenRange { .. })));
    }

    #[test]
    fn posterior_at_first_step_is_delta() {
        let table = linear_base_schedule(4, 3, 0.9, 0.1).unwrap();
        for xt in 0..4 {
            let p = posterior(xt, 2, table.row(0), 1, vocab(3)).unwrap();
            assert!((p.prob(2) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn posterior_rejects_impossible_evidence() {
        // pure masking: a real x_t different from x_0 cannot happen
        let row = crate::schedule::ScheduleRow::from_per_step(&[0.5, 0.0], &[0.5, 1.0], 2).unwrap();
        assert!(matches!(posterior(1, 0, &row, 1, vocab(2)), Err(Error::InconsistentEvidence(_))));
    }

    #[test]
    fn binary_posterior_mode_stays_on_x0() {
        let row = crate::schedule::ScheduleRow::from_per_step(&[0.9, 0.9, 0.0], &[0.02, 0.02, 0.9], 2).unwrap();
        let p = posterior(0, 0, &row, 2, vocab(2)).unwrap();
        let mode = (0..3).max_by(|&a, &b| p.prob(a).total_cmp(&p.prob(b))).unwrap();
        assert_eq!(mode, 0);
        // q(x1 | x2=0, x0=0) ∝ Q2[0, x1] · q(x1 | x0=0); hand-enumerated
        let a1 = 0.9;
        let b1 = (1.0 - 0.9 - 0.02) / 2.0;
        let prior = [a1 + b1, b1, 0.02];
        let lik = [0.9 + b1, b1, 0.0];
        let z: f64 = prior.iter().zip(&lik).map(|(p, l)| p * l).sum();
        for s in 0..3 {
            assert!((p.prob(s) - prior[s] * lik[s] / z).abs() < 1e-15);
        }
    }

    #[test]
    fn oracle_reverse_matches_posterior() {
        let v = vocab(3);
        let table = linear_base_schedule(6, 3, 0.9, 0.1).unwrap();
        let x0 = TokenSequence::new("x", vec![0, 2, 1], None, v).unwrap();
        let oracle = OracleDenoiser::new(x0.clone());
        let xt = TokenSequence::new("x", vec![3, 1, 1], None, v).unwrap();
        let dists = reverse_distributions(&xt, &oracle, &table, 4).unwrap();
        for (i, d) in dists.iter().enumerate() {
            let expect = posterior(xt.active()[i], x0.active()[i], table.row(i), 4, v).unwrap();
            for s in 0..4 {
                assert!((d.prob(s) - expect.prob(s)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn uniform_reverse_binary_enumeration() {
        let v = vocab(2);
        let table = linear_base_schedule(3, 2, 0.8, 0.2).unwrap();
        let row = table.row(0);
        let xt = TokenSequence::new("x", vec![2], None, v).unwrap();
        let d = &reverse_distributions(&xt, &UniformDenoiser::new(2), &table, 2).unwrap()[0];
        let p0 = posterior(2, 0, row, 2, v).unwrap();
        let p1 = posterior(2, 1, row, 2, v).unwrap();
        for s in 0..3 {
            assert!((d.prob(s) - 0.5 * (p0.prob(s) + p1.prob(s))).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_step_and_pad_are_frozen() {
        let v = vocab(3);
        let table = linear_base_schedule(5, 3, 0.9, 0.1).unwrap();
        let x0 = TokenSequence::new("x", vec![0, 1, 2, 4, 4], None, v).unwrap();
        let mut rng = seeded(1);
        assert_eq!(sample_forward(&x0, &table, 0, &mut rng).unwrap(), x0);
        let pads = TokenSequence::new("p", vec![4, 4, 4], None, v).unwrap();
        for t in 0..=5 {
            assert_eq!(sample_forward(&pads, &table, t, &mut rng).unwrap(), pads);
        }
        let xt = sample_forward(&x0, &table, 5, &mut rng).unwrap();
        assert_eq!(&xt.tokens()[3..], &[4, 4]);
    }

    #[test]
    fn mask_is_absorbing() {
        let v = vocab(3);
        let table = linear_base_schedule(8, 3, 0.9, 0.1).unwrap();
        let x0 = TokenSequence::new("x", vec![0, 1, 2, 0, 1, 2], None, v).unwrap();
        let mut rng = seeded(2);
        for _ in 0..50 {
            let traj = forward_trajectory(&x0, &table, &mut rng).unwrap();
            for w in traj.windows(2) {
                for (a, b) in w[0].active().iter().zip(w[1].active()) {
                    if *a == v.mask() {
                        assert_eq!(*b, v.mask());
                    }
                }
            }
        }
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let d = CategoricalDistribution::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(d.kl(&d), 0.0);
        assert!(CategoricalDistribution::new(vec![0.2, 0.3]).is_err());
    }
}
