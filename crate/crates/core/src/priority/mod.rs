//! Per-token priority scores.
//!
//! Scores are mean-one multipliers on corruption probability. A LOW score means
//! HIGH priority: the token is corrupted late in the forward process and
//! restored early in the reverse process.

mod agent;

use serde::{Deserialize, Serialize};

use crate::corpus::{ContinuousSequence, CorpusStats, TokenSequence};
use crate::quantizer::ToyVq;
use crate::rng::seeded;
use crate::{Error, Result};

pub use agent::{
    train_ordering_agent, AgentCheckpoint, AgentConfig, AgentTrace, Baseline, EpisodeTrace, OrderingPolicy,
};

const SUM_TOLERANCE: f64 = 1e-9;

/// Positive per-position scores with `Σ F_i = N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorityScores {
    scores: Vec<f64>,
}

impl PriorityScores {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptySequence);
        }
        if let Some(&bad) = scores.iter().find(|&&f| !(f > 0.0) || !f.is_finite()) {
            return Err(Error::InvalidScore(bad));
        }
        let n = scores.len() as f64;
        let sum: f64 = scores.iter().sum();
        if (sum - n).abs() > SUM_TOLERANCE * n {
            return Err(Error::InvalidProbability(format!("scores sum to {sum}, expected {n}")));
        }
        Ok(Self { scores })
    }

    /// All-ones scores, the neutral element for schedule modulation.
    pub fn uniform(len: usize) -> Result<Self> {
        Self::new(vec![1.0; len])
    }

    /// Rescales arbitrary positive weights to mean one.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if let Some(&bad) = weights.iter().find(|&&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidScore(bad));
        }
        let n = weights.len() as f64;
        let sum: f64 = weights.iter().sum();
        Self::new(weights.iter().map(|w| n * w / sum).collect())
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Per-category entropy contribution `H_k = −p_k ln p_k` (nats).
pub fn token_entropy(stats: &CorpusStats) -> Result<Vec<f64>> {
    if stats.total == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok((0..stats.counts.len())
        .map(|k| {
            let p = stats.frequency(k);
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .collect())
}

/// Static entropy scores `F_i = N·H_i / Σ_j H_j` over the active positions.
///
/// Positions whose category has zero entropy (unseen in the corpus) are lifted
/// to a tiny floor so every score stays strictly positive.
pub fn static_scores(seq: &TokenSequence, entropy: &[f64]) -> Result<PriorityScores> {
    let vocab = seq.vocab();
    let mut h = Vec::with_capacity(seq.len());
    for &t in seq.active() {
        if !vocab.is_real(t) {
            return Err(Error::TokenRange {
                token: t,
                categories: vocab.categories(),
            });
        }
        let v = *entropy.get(t).ok_or(Error::Shape(format!("no entropy for category {t}")))?;
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::InvalidProbability(format!("entropy {v} for category {t}")));
        }
        h.push(v);
    }
    if h.is_empty() {
        return Err(Error::EmptySequence);
    }
    let max = h.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::DegeneratePriorities);
    }
    let floor = max * 1e-9;
    for v in &mut h {
        *v = v.max(floor);
    }
    PriorityScores::from_weights(&h)
}

/// Maps every category to a reconstructed frame.
pub trait TokenDecoder {
    fn categories(&self) -> usize;
    fn width(&self) -> usize;
    fn frame(&self, category: usize) -> &[f64];
}

/// Lookup-table decoder; the toy VQ decoder and synthetic fixtures are both tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableDecoder {
    width: usize,
    frames: Vec<f64>,
}

impl TableDecoder {
    pub fn new(width: usize, frames: Vec<f64>) -> Result<Self> {
        if width == 0 || frames.is_empty() || frames.len() % width != 0 {
            return Err(Error::Shape("decoder table".into()));
        }
        Ok(Self { width, frames })
    }

    /// Category `k` decodes to `magnitudes[k]` times a seeded random unit direction.
    pub fn separable(magnitudes: &[f64], width: usize, seed: u64) -> Result<Self> {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = seeded(seed);
        let mut frames = Vec::with_capacity(magnitudes.len() * width);
        for &m in magnitudes {
            let dir: Vec<f64> = (0..width).map(|_| StandardNormal.sample(&mut rng)).collect();
            let unit = crate::quantizer::l2_normalize(&dir)?;
            frames.extend(unit.into_iter().map(|u| m * u));
        }
        Self::new(width, frames)
    }

    /// Decoder image of every code of a trained toy VQ model.
    pub fn from_vq(model: &ToyVq) -> Result<Self> {
        let book = &model.codebook;
        let frames = (0..book.len())
            .flat_map(|k| model.decoder.mul_vec(book.entry(k)))
            .collect();
        Self::new(model.input_dim(), frames)
    }
}

impl TokenDecoder for TableDecoder {
    fn categories(&self) -> usize {
        self.frames.len() / self.width
    }

    fn width(&self) -> usize {
        self.width
    }

    fn frame(&self, category: usize) -> &[f64] {
        &self.frames[category * self.width..(category + 1) * self.width]
    }
}

/// Decodes a sequence, treating unselected positions as MASK (zero frame).
pub fn decode_selected<D: TokenDecoder + ?Sized>(
    decoder: &D,
    tokens: &[usize],
    selected: &[bool],
) -> Result<ContinuousSequence> {
    let mut data = Vec::with_capacity(tokens.len() * decoder.width());
    for (&t, &on) in tokens.iter().zip(selected) {
        if on {
            data.extend_from_slice(decoder.frame(t));
        } else {
            data.extend(std::iter::repeat_n(0.0, decoder.width()));
        }
    }
    ContinuousSequence::new(decoder.width(), data)
}

pub fn decode_full<D: TokenDecoder + ?Sized>(decoder: &D, seq: &TokenSequence) -> Result<ContinuousSequence> {
    decode_selected(decoder, seq.active(), &vec![true; seq.len()])
}

/// `‖target − decode(selected)‖²`.
pub fn reconstruction_error<D: TokenDecoder + ?Sized>(
    decoder: &D,
    tokens: &[usize],
    selected: &[bool],
    target: &ContinuousSequence,
) -> Result<f64> {
    if target.frames() != tokens.len() || target.width() != decoder.width() {
        return Err(Error::Shape(format!(
            "target {}x{} vs {} tokens of width {}",
            target.frames(),
            target.width(),
            tokens.len(),
            decoder.width()
        )));
    }
    let mut err = 0.0;
    for (i, (&t, &on)) in tokens.iter().zip(selected).enumerate() {
        let goal = target.frame(i);
        if on {
            err += goal.iter().zip(decoder.frame(t)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        } else {
            err += goal.iter().map(|a| a * a).sum::<f64>();
        }
    }
    Ok(err)
}

pub(crate) fn check_decodable<D: TokenDecoder + ?Sized>(seq: &TokenSequence, decoder: &D) -> Result<()> {
    let vocab = seq.vocab();
    for &t in seq.active() {
        if !vocab.is_real(t) || t >= decoder.categories() {
            return Err(Error::TokenRange {
                token: t,
                categories: vocab.categories(),
            });
        }
    }
    Ok(())
}

/// Exact greedy build-up order: each step adds the position whose inclusion
/// minimizes the reconstruction error, lowest position on ties.
pub fn greedy_order_oracle<D: TokenDecoder + ?Sized>(
    seq: &TokenSequence,
    decoder: &D,
    target: &ContinuousSequence,
) -> Result<Vec<usize>> {
    check_decodable(seq, decoder)?;
    let tokens = seq.active();
    let n = tokens.len();
    let mut selected = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best = None;
        let mut best_err = f64::INFINITY;
        for i in 0..n {
            if selected[i] {
                continue;
            }
            selected[i] = true;
            let err = reconstruction_error(decoder, tokens, &selected, target)?;
            selected[i] = false;
            if err < best_err {
                best_err = err;
                best = Some(i);
            }
        }
        let pick = best.expect("at least one unselected position");
        selected[pick] = true;
        order.push(pick);
    }
    Ok(order)
}

/// Scores from a pick order: rank 1 (picked first) gets the smallest score,
/// `F_i = 2 r_i / (N + 1)`.
pub fn rank_scores(order: &[usize]) -> Result<PriorityScores> {
    let n = order.len();
    let mut scores = vec![0.0; n];
    let mut seen = vec![false; n];
    for (r, &pos) in order.iter().enumerate() {
        if pos >= n || seen[pos] {
            return Err(Error::Shape("order is not a permutation".into()));
        }
        seen[pos] = true;
        scores[pos] = 2.0 * (r + 1) as f64 / (n + 1) as f64;
    }
    PriorityScores::new(scores)
}

/// Dynamic scores from the policy's greedy rollout.
pub fn dynamic_scores<D: TokenDecoder + ?Sized>(
    seq: &TokenSequence,
    policy: &OrderingPolicy,
    decoder: &D,
    target: &ContinuousSequence,
) -> Result<PriorityScores> {
    rank_scores(&policy.greedy_order(seq, decoder, target)?)
}

/// Kendall rank correlation between two pick orders over the same positions.
pub fn kendall_tau(a: &[usize], b: &[usize]) -> Result<f64> {
    let n = a.len();
    if b.len() != n {
        return Err(Error::Shape("orders differ in length".into()));
    }
    if n < 2 {
        return Ok(1.0);
    }
    let rank = |order: &[usize]| -> Result<Vec<usize>> {
        let mut r = vec![usize::MAX; n];
        for (i, &p) in order.iter().enumerate() {
            if p >= n || r[p] != usize::MAX {
                return Err(Error::Shape("order is not a permutation".into()));
            }
            r[p] = i;
        }
        Ok(r)
    };
    let (ra, rb) = (rank(a)?, rank(b)?);
    let mut score = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let s = (ra[i] as i64 - ra[j] as i64).signum() * (rb[i] as i64 - rb[j] as i64).signum();
            score += s;
        }
    }
    Ok(score as f64 / (n * (n - 1) / 2) as f64)
}

/// Score export line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sequence_id: String,
    pub scores: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocab;

    fn seq(tokens: Vec<usize>, k: usize) -> TokenSequence {
        TokenSequence::new("s", tokens, None, Vocab::new(k).unwrap()).unwrap()
    }

    #[test]
    fn entropy_of_skewed_pair() {
        let stats = CorpusStats {
            counts: vec![8, 2],
            total: 10,
        };
        let h = token_entropy(&stats).unwrap();
        assert!((h[0] - 0.17851).abs() < 1e-5, "{}", h[0]);
        assert!((h[1] - 0.32189).abs() < 1e-5, "{}", h[1]);
    }

    #[test]
    fn entropy_edge_cases() {
        let single = CorpusStats {
            counts: vec![5, 0],
            total: 5,
        };
        assert_eq!(token_entropy(&single).unwrap(), vec![0.0, 0.0]);
        let uniform = CorpusStats {
            counts: vec![3; 4],
            total: 12,
        };
        let h = token_entropy(&uniform).unwrap();
        assert!(h.iter().all(|&v| v == h[0]));
        let empty = CorpusStats {
            counts: vec![0; 3],
            total: 0,
        };
        assert!(token_entropy(&empty).is_err());
    }

    #[test]
    fn static_scores_worked_pair() {
        let h = token_entropy(&CorpusStats {
            counts: vec![8, 2],
            total: 10,
        })
        .unwrap();
        let f = static_scores(&seq(vec![0, 1], 2), &h).unwrap();
        assert!((f.scores()[0] - 0.71346).abs() < 1e-4);
        assert!((f.scores()[1] - 1.28654).abs() < 1e-4);
    }

    #[test]
    fn static_scores_degenerate_cases() {
        let h = vec![0.3, 0.2, 0.0];
        let f = static_scores(&seq(vec![1, 1, 1], 3), &h).unwrap();
        assert!(f.scores().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let f = static_scores(&seq(vec![0], 3), &h).unwrap();
        assert_eq!(f.scores(), &[1.0]);
        assert!(matches!(
            static_scores(&seq(vec![2, 2], 3), &h),
            Err(Error::DegeneratePriorities)
        ));
        // unseen category among seen ones: floored, still positive
        let f = static_scores(&seq(vec![0, 2], 3), &h).unwrap();
        assert!(f.scores()[1] > 0.0 && f.scores()[1] < 1e-6);
    }

    #[test]
    fn rank_map_arithmetic() {
        let f = rank_scores(&[0, 1, 2]).unwrap();
        assert_eq!(f.scores(), &[0.5, 1.0, 1.5]);
        assert_eq!(rank_scores(&[0]).unwrap().scores(), &[1.0]);
        assert!(rank_scores(&[0, 0]).is_err());
    }

    #[test]
    fn greedy_sorts_separable_contributions() {
        let dec = TableDecoder::separable(&[1.0, 3.0, 2.0, 0.5], 3, 1).unwrap();
        let s = seq(vec![0, 1, 2, 3], 4);
        let target = decode_full(&dec, &s).unwrap();
        assert_eq!(greedy_order_oracle(&s, &dec, &target).unwrap(), vec![1, 2, 0, 3]);
    }

    #[test]
    fn greedy_ties_are_positional() {
        let dec = TableDecoder::separable(&[1.0], 2, 1).unwrap();
        let s = seq(vec![0, 0, 0], 1);
        let target = decode_full(&dec, &s).unwrap();
        assert_eq!(greedy_order_oracle(&s, &dec, &target).unwrap(), vec![0, 1, 2]);
        let one = seq(vec![0], 1);
        let t1 = decode_full(&dec, &one).unwrap();
        assert_eq!(greedy_order_oracle(&one, &dec, &t1).unwrap(), vec![0]);
    }

    #[test]
    fn kendall_extremes() {
        assert_eq!(kendall_tau(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[0, 1, 2], &[2, 1, 0]).unwrap(), -1.0);
        assert_eq!(kendall_tau(&[0], &[0]).unwrap(), 1.0);
    }

    #[test]
    fn scores_reject_non_positive() {
        assert!(matches!(PriorityScores::new(vec![0.0, 2.0]), Err(Error::InvalidScore(_))));
        assert!(PriorityScores::new(vec![0.5, 1.0]).is_err());
    }
}
