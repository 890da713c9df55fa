//! Token-ordering agent trained with the likelihood-ratio policy gradient.
//!
//! An episode builds a sequence up one position at a time, starting from the
//! all-MASK reconstruction. The reward of a pick is the decrease in
//! reconstruction error it causes. Rewards telescope, so the undiscounted return
//! is order-independent; the agent optimizes the discounted return, which
//! favours large error drops early.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_decodable, decode_full, TokenDecoder};
use crate::corpus::{ContinuousSequence, TokenSequence};
use crate::rng::{sample_categorical, seeded};
use crate::{Error, Result};

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Baseline {
    None,
    /// Exponential moving average of the return-to-go, kept per step index.
    MovingAverage { decay: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub learning_rate: f64,
    pub episodes: usize,
    pub discount: f64,
    pub baseline: Baseline,
    pub drop_buckets: usize,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            episodes: 2000,
            discount: 0.8,
            baseline: Baseline::MovingAverage { decay: 0.95 },
            drop_buckets: 4,
            seed: 0,
        }
    }
}

/// Linear softmax policy over the remaining positions.
///
/// Candidate features: the candidate's error drop relative to the best
/// remaining drop, that value scaled by the fraction already selected, a
/// one-hot bucket of the relative drop, and a one-hot of the candidate's category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingPolicy {
    categories: usize,
    drop_buckets: usize,
    weights: Vec<f64>,
}

/// Positions still available at one step, with their features.
struct StepView {
    candidates: Vec<usize>,
    features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    /// Positions in pick order; a permutation of `0..N`.
    pub picks: Vec<usize>,
    /// Reconstruction error before the first pick and after every pick (N + 1 values).
    pub errors: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Σ rewards, always `errors[0] − errors[N]`.
    pub ret: f64,
    pub discounted_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrace {
    /// Discounted return per episode, divided by the episode's initial error.
    pub normalized_returns: Vec<f64>,
}

impl AgentTrace {
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let r = &self.normalized_returns;
        if window == 0 || r.len() < window {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(r.len() - window + 1);
        let mut acc: f64 = r[..window].iter().sum();
        out.push(acc / window as f64);
        for i in window..r.len() {
            acc += r[i] - r[i - window];
            out.push(acc / window as f64);
        }
        out
    }
}

fn local_errors<D: TokenDecoder + ?Sized>(
    decoder: &D,
    tokens: &[usize],
    target: &ContinuousSequence,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if target.frames() != tokens.len() || target.width() != decoder.width() {
        return Err(Error::Shape("target does not match sequence".into()));
    }
    let masked = (0..tokens.len())
        .map(|i| target.frame(i).iter().map(|a| a * a).sum())
        .collect();
    let kept = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            target
                .frame(i)
                .iter()
                .zip(decoder.frame(t))
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        })
        .collect();
    Ok((masked, kept))
}

impl OrderingPolicy {
    pub fn new(categories: usize, drop_buckets: usize) -> Result<Self> {
        if categories == 0 || drop_buckets == 0 {
            return Err(Error::Config("policy needs categories and drop buckets".into()));
        }
        Ok(Self {
            categories,
            drop_buckets,
            weights: vec![0.0; 2 + drop_buckets + categories],
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    fn view(&self, tokens: &[usize], selected: &[bool], drops: &[f64]) -> StepView {
        let n = tokens.len();
        let progress = selected.iter().filter(|&&s| s).count() as f64 / n as f64;
        let candidates: Vec<usize> = (0..n).filter(|&i| !selected[i]).collect();
        let best = candidates.iter().map(|&i| drops[i]).fold(f64::NEG_INFINITY, f64::max);
        let features = candidates
            .iter()
            .map(|&i| {
                let rel = if best > 0.0 { drops[i] / best } else { 0.0 };
                let mut phi = vec![0.0; self.weights.len()];
                phi[0] = rel;
                phi[1] = rel * progress;
                let bucket = ((rel.clamp(0.0, 1.0) * self.drop_buckets as f64) as usize).min(self.drop_buckets - 1);
                phi[2 + bucket] = 1.0;
                phi[2 + self.drop_buckets + tokens[i].min(self.categories - 1)] = 1.0;
                phi
            })
            .collect();
        StepView { candidates, features }
    }

    fn probabilities(&self, view: &StepView) -> Vec<f64> {
        let logits: Vec<f64> = view
            .features
            .iter()
            .map(|phi| phi.iter().zip(&self.weights).map(|(a, b)| a * b).sum())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    /// Selection distribution over the unselected positions, as `(position, prob)`.
    pub fn selection_distribution<D: TokenDecoder + ?Sized>(
        &self,
        seq: &TokenSequence,
        selected: &[bool],
        decoder: &D,
        target: &ContinuousSequence,
    ) -> Result<Vec<(usize, f64)>> {
        let (masked, kept) = local_errors(decoder, seq.active(), target)?;
        let drops: Vec<f64> = masked.iter().zip(&kept).map(|(m, k)| m - k).collect();
        let view = self.view(seq.active(), selected, &drops);
        let probs = self.probabilities(&view);
        Ok(view.candidates.into_iter().zip(probs).collect())
    }

    fn run<D, F>(
        &self,
        seq: &TokenSequence,
        decoder: &D,
        target: &ContinuousSequence,
        discount: f64,
        mut choose: F,
    ) -> Result<(EpisodeTrace, Vec<(StepView, Vec<f64>, usize)>)>
    where
        D: TokenDecoder + ?Sized,
        F: FnMut(&[f64]) -> usize,
    {
        check_decodable(seq, decoder)?;
        let tokens = seq.active();
        let n = tokens.len();
        let (masked, kept) = local_errors(decoder, tokens, target)?;
        let drops: Vec<f64> = masked.iter().zip(&kept).map(|(m, k)| m - k).collect();
        let mut selected = vec![false; n];
        let mut err: f64 = masked.iter().sum();
        let mut errors = vec![err];
        let mut picks = Vec::with_capacity(n);
        let mut steps = Vec::with_capacity(n);
        for _ in 0..n {
            let view = self.view(tokens, &selected, &drops);
            let probs = self.probabilities(&view);
            let choice = choose(&probs);
            let pos = view.candidates[choice];
            selected[pos] = true;
            err -= drops[pos];
            errors.push(err);
            picks.push(pos);
            steps.push((view, probs, choice));
        }
        let rewards: Vec<f64> = errors.windows(2).map(|w| w[0] - w[1]).collect();
        let ret = rewards.iter().sum();
        let discounted_return = rewards.iter().rev().fold(0.0, |acc, r| r + discount * acc);
        Ok((
            EpisodeTrace {
                picks,
                errors,
                rewards,
                ret,
                discounted_return,
            },
            steps,
        ))
    }

    /// Deterministic rollout taking the most probable position at each step
    /// (lowest position on ties).
    pub fn greedy_order<D: TokenDecoder + ?Sized>(
        &self,
        seq: &TokenSequence,
        decoder: &D,
        target: &ContinuousSequence,
    ) -> Result<Vec<usize>> {
        let (trace, _) = self.run(seq, decoder, target, 1.0, |probs| {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            best
        })?;
        Ok(trace.picks)
    }

    pub fn sample_episode<D: TokenDecoder + ?Sized, R: Rng + ?Sized>(
        &self,
        seq: &TokenSequence,
        decoder: &D,
        target: &ContinuousSequence,
        discount: f64,
        rng: &mut R,
    ) -> Result<EpisodeTrace> {
        Ok(self
            .run(seq, decoder, target, discount, |p| sample_categorical(p, rng))?
            .0)
    }

    pub fn to_checkpoint(&self, config: &AgentConfig) -> AgentCheckpoint {
        AgentCheckpoint {
            version: CHECKPOINT_VERSION,
            seed: config.seed,
            config: config.clone(),
            policy: self.clone(),
        }
    }
}

/// Versioned agent dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub version: u32,
    pub seed: u64,
    pub config: AgentConfig,
    pub policy: OrderingPolicy,
}

impl AgentCheckpoint {
    pub fn into_policy(self) -> Result<OrderingPolicy> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: self.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let expected = 2 + self.policy.drop_buckets + self.policy.categories;
        if self.policy.weights.len() != expected {
            return Err(Error::Shape("policy weight count".into()));
        }
        Ok(self.policy)
    }
}

/// Trains the ordering policy on sequences whose targets are their own full decodings.
pub fn train_ordering_agent<D: TokenDecoder + ?Sized>(
    corpus: &[TokenSequence],
    decoder: &D,
    config: &AgentConfig,
) -> Result<(OrderingPolicy, AgentTrace)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if !(config.learning_rate >= 0.0) || !(0.0..=1.0).contains(&config.discount) {
        return Err(Error::Config("learning rate must be >= 0 and discount in [0,1]".into()));
    }
    if let Baseline::MovingAverage { decay } = config.baseline {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config("baseline decay must lie in [0,1)".into()));
        }
    }
    let mut policy = OrderingPolicy::new(decoder.categories(), config.drop_buckets)?;
    let targets = corpus
        .iter()
        .map(|s| decode_full(decoder, s))
        .collect::<Result<Vec<_>>>()?;
    let max_len = corpus.iter().map(TokenSequence::len).max().unwrap_or(0);
    let mut baseline = vec![0.0; max_len];
    let mut baseline_ready = vec![false; max_len];
    let mut rng = seeded(config.seed);
    let mut normalized_returns = Vec::with_capacity(config.episodes);

    for episode in 0..config.episodes {
        let idx = rng.random_range(0..corpus.len());
        let (trace, steps) = policy.run(&corpus[idx], decoder, &targets[idx], config.discount, |p| {
            sample_categorical(p, &mut rng)
        })?;
        let scale = if trace.errors[0] > 0.0 { 1.0 / trace.errors[0] } else { 0.0 };
        let mut to_go = vec![0.0; trace.rewards.len()];
        let mut acc = 0.0;
        for t in (0..trace.rewards.len()).rev() {
            acc = trace.rewards[t] * scale + config.discount * acc;
            to_go[t] = acc;
        }
        normalized_returns.push(to_go.first().copied().unwrap_or(0.0));

        let mut grad = vec![0.0; policy.weights.len()];
        for (t, (view, probs, choice)) in steps.iter().enumerate() {
            let advantage = match config.baseline {
                Baseline::None => to_go[t],
                Baseline::MovingAverage { decay } => {
                    let b = if baseline_ready[t] { baseline[t] } else { to_go[t] };
                    let adv = to_go[t] - b;
                    baseline[t] = if baseline_ready[t] {
                        decay * baseline[t] + (1.0 - decay) * to_go[t]
                    } else {
                        to_go[t]
                    };
                    baseline_ready[t] = true;
                    adv
                }
            };
            if advantage == 0.0 {
                continue;
            }
            // ∇ log π(a) = φ(a) − E_π[φ]
            for (j, phi) in view.features.iter().enumerate() {
                let coeff = if j == *choice { 1.0 - probs[j] } else { -probs[j] };
                if coeff != 0.0 {
                    for (g, f) in grad.iter_mut().zip(phi) {
                        *g += advantage * coeff * f;
                    }
                }
            }
        }
        for (w, g) in policy.weights.iter_mut().zip(&grad) {
            *w += config.learning_rate * g;
        }
        if policy.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Diverged(format!("policy parameters became non-finite at episode {episode}")));
        }
    }
    Ok((policy, AgentTrace { normalized_returns }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocab;
    use crate::priority::TableDecoder;

    fn fixture() -> (Vec<TokenSequence>, TableDecoder) {
        let vocab = Vocab::new(6).unwrap();
        let dec = TableDecoder::separable(&[0.5, 1.0, 1.5, 2.0, 2.5, 3.0], 4, 2).unwrap();
        let mut rng = seeded(5);
        let corpus = (0..40)
            .map(|i| {
                let tokens = (0..6).map(|_| rng.random_range(0..6)).collect();
                TokenSequence::new(format!("s{i}"), tokens, None, vocab).unwrap()
            })
            .collect();
        (corpus, dec)
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        let (corpus, dec) = fixture();
        let cfg = AgentConfig {
            learning_rate: 0.0,
            episodes: 50,
            ..AgentConfig::default()
        };
        let (policy, trace) = train_ordering_agent(&corpus, &dec, &cfg).unwrap();
        assert_eq!(policy, OrderingPolicy::new(6, cfg.drop_buckets).unwrap());
        assert_eq!(trace.normalized_returns.len(), 50);
    }

    #[test]
    fn rewards_telescope() {
        let (corpus, dec) = fixture();
        let policy = OrderingPolicy::new(6, 4).unwrap();
        let mut rng = seeded(1);
        for seq in &corpus {
            let target = decode_full(&dec, seq).unwrap();
            let ep = policy.sample_episode(seq, &dec, &target, 0.9, &mut rng).unwrap();
            let n = seq.len();
            assert!((ep.ret - (ep.errors[0] - ep.errors[n])).abs() < 1e-12);
            let mut sorted = ep.picks.clone();
            sorted.sort();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn single_position_return_is_the_drop() {
        let vocab = Vocab::new(2).unwrap();
        let dec = TableDecoder::separable(&[1.0, 2.0], 3, 4).unwrap();
        let seq = TokenSequence::new("one", vec![1], None, vocab).unwrap();
        let target = decode_full(&dec, &seq).unwrap();
        let mut policy = OrderingPolicy::new(2, 4).unwrap();
        policy.weights[0] = -3.0;
        let ep = policy.sample_episode(&seq, &dec, &target, 0.5, &mut seeded(0)).unwrap();
        assert!((ep.ret - 4.0).abs() < 1e-12);
        assert_eq!(ep.picks, vec![0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = AgentConfig::default();
        let policy = OrderingPolicy::new(3, 4).unwrap();
        let json = serde_json::to_string(&policy.to_checkpoint(&cfg)).unwrap();
        let back: AgentCheckpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(back.into_policy().unwrap(), policy);
    }
}
