//! Denoisers `p_θ(x̃_0 | x_t)` and the generation loop.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSequence, Vocab};
use crate::diffusion::{reverse_step, sample_forward, terminal_prior, vlb, VlbMode};
use crate::rng::seeded;
use crate::schedule::{ScheduleProvider, ScheduleTable};
use crate::{Error, Result};

const ROW_TOLERANCE: f64 = 1e-6;
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MAX_TABLE_CELLS: usize = 1 << 26;

/// One distribution over the `K` real categories per active position.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    rows: Vec<Vec<f64>>,
}

impl DenoiserOutput {
    pub fn new(rows: Vec<Vec<f64>>) -> Self {
        Self { rows }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, position: usize) -> &[f64] {
        &self.rows[position]
    }

    pub fn validate(&self, categories: usize, len: usize) -> Result<()> {
        if self.rows.len() != len {
            return Err(Error::Shape(format!("denoiser returned {} rows for {len} positions", self.rows.len())));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != categories {
                return Err(Error::Shape(format!("row {i} has {} entries, expected {categories}", row.len())));
            }
            if row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidProbability(format!("row {i} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::InvalidProbability(format!("row {i} sums to {sum}")));
            }
        }
        Ok(())
    }
}

pub trait Denoiser {
    fn categories(&self) -> usize;
    /// Predicts `x̃_0` for every active position of `x_t`; the condition is read from `x_t`.
    fn predict(&self, x_t: &TokenSequence, t: usize) -> Result<DenoiserOutput>;
}

/// Knows the clean sequence; its reverse kernel is the exact posterior.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    x0: TokenSequence,
}

impl OracleDenoiser {
    pub fn new(x0: TokenSequence) -> Self {
        Self { x0 }
    }
}

impl Denoiser for OracleDenoiser {
    fn categories(&self) -> usize {
        self.x0.vocab().categories()
    }

    fn predict(&self, x_t: &TokenSequence, _t: usize) -> Result<DenoiserOutput> {
        if x_t.len() != self.x0.len() {
            return Err(Error::Shape("oracle queried with a different length".into()));
        }
        let k = self.categories();
        Ok(DenoiserOutput::new(
            self.x0
                .active()
                .iter()
                .map(|&x| {
                    let mut row = vec![0.0; k];
                    row[x] = 1.0;
                    row
                })
                .collect(),
        ))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct UniformDenoiser {
    categories: usize,
}

impl UniformDenoiser {
    pub fn new(categories: usize) -> Self {
        Self { categories }
    }
}

impl Denoiser for UniformDenoiser {
    fn categories(&self) -> usize {
        self.categories
    }

    fn predict(&self, x_t: &TokenSequence, _t: usize) -> Result<DenoiserOutput> {
        let k = self.categories;
        Ok(DenoiserOutput::new(vec![vec![1.0 / k as f64; k]; x_t.len()]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TabularConfig {
    /// Additive smoothing on every count.
    pub epsilon: f64,
    pub time_buckets: usize,
    pub position_buckets: usize,
    pub position_bucket_width: usize,
    pub epochs: usize,
    /// Forward draws per sequence and timestep in each epoch.
    pub samples_per_step: usize,
    /// Monte Carlo samples for held-out VLB when exact evaluation is infeasible.
    pub vlb_samples: usize,
    pub seed: u64,
}

impl Default for TabularConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            time_buckets: 4,
            position_buckets: 32,
            position_bucket_width: 1,
            epochs: 3,
            samples_per_step: 2,
            vlb_samples: 8,
            seed: 0,
        }
    }
}

impl TabularConfig {
    fn check(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || self.time_buckets == 0 || self.position_buckets == 0 || self.position_bucket_width == 0 {
            return Err(Error::Config("tabular denoiser needs epsilon > 0 and non-zero bucket counts".into()));
        }
        Ok(())
    }
}

/// Smoothed counts of `x_0` given (condition, position bucket, observed state, timestep bucket).
/// Each row backs off to the state-pooled counts of its position and timestep bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDenoiser {
    config: TabularConfig,
    categories: usize,
    steps: usize,
    tables: BTreeMap<i64, Vec<f64>>,
    pooled: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularCheckpoint {
    pub version: u32,
    pub categories: usize,
    pub steps: usize,
    pub config: TabularConfig,
    pub conditioned: Vec<(i64, Vec<f64>)>,
    pub pooled: Vec<f64>,
}

impl TabularDenoiser {
    pub fn new(categories: usize, steps: usize, config: TabularConfig) -> Result<Self> {
        config.check()?;
        if steps == 0 {
            return Err(Error::Config("T must be positive".into()));
        }
        let size = config.position_buckets * (categories + 1) * config.time_buckets * categories;
        if size > MAX_TABLE_CELLS {
            return Err(Error::Config(format!(
                "count table would need {size} cells (limit {MAX_TABLE_CELLS}); reduce K or the bucket counts"
            )));
        }
        Ok(Self {
            config,
            categories,
            steps,
            tables: BTreeMap::new(),
            pooled: vec![0.0; size],
        })
    }

    pub fn config(&self) -> &TabularConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn time_bucket(&self, t: usize) -> usize {
        (((t.max(1) - 1) * self.config.time_buckets) / self.steps).min(self.config.time_buckets - 1)
    }

    pub fn position_bucket(&self, position: usize) -> usize {
        (position / self.config.position_bucket_width).min(self.config.position_buckets - 1)
    }

    fn offset(&self, position: usize, state: usize, t: usize) -> usize {
        let k = self.categories;
        ((self.position_bucket(position) * (k + 1) + state) * self.config.time_buckets + self.time_bucket(t)) * k
    }

    /// Records one `(x_0, x_t)` pair.
    pub fn observe(&mut self, x0: &TokenSequence, xt: &TokenSequence, t: usize) -> Result<()> {
        if x0.len() != xt.len() {
            return Err(Error::Shape("x_0 and x_t lengths differ".into()));
        }
        let size = self.pooled.len();
        let offsets: Vec<usize> = xt
            .active()
            .iter()
            .enumerate()
            .map(|(i, &s)| self.offset(i, s, t))
            .collect();
        let mut cond = x0.condition().map(|c| self.tables.entry(c).or_insert_with(|| vec![0.0; size]));
        for (&off, &x) in offsets.iter().zip(x0.active()) {
            self.pooled[off + x] += 1.0;
            if let Some(table) = cond.as_mut() {
                table[off + x] += 1.0;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> TabularCheckpoint {
        TabularCheckpoint {
            version: CHECKPOINT_VERSION,
            categories: self.categories,
            steps: self.steps,
            config: self.config.clone(),
            conditioned: self.tables.iter().map(|(c, v)| (*c, v.clone())).collect(),
            pooled: self.pooled.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: TabularCheckpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: ckpt.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut model = Self::new(ckpt.categories, ckpt.steps, ckpt.config)?;
        if ckpt.pooled.len() != model.pooled.len() || ckpt.conditioned.iter().any(|(_, v)| v.len() != model.pooled.len()) {
            return Err(Error::Shape("checkpoint table size does not match its config".into()));
        }
        model.pooled = ckpt.pooled;
        model.tables = ckpt.conditioned.into_iter().collect();
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

impl Denoiser for TabularDenoiser {
    fn categories(&self) -> usize {
        self.categories
    }

    fn predict(&self, x_t: &TokenSequence, t: usize) -> Result<DenoiserOutput> {
        if x_t.vocab().categories() != self.categories {
            return Err(Error::Shape("vocabulary size differs from the trained model".into()));
        }
        let table = x_t
            .condition()
            .and_then(|c| self.tables.get(&c))
            .unwrap_or(&self.pooled);
        let k = self.categories;
        let eps = self.config.epsilon;
        let rows = x_t
            .active()
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                // state-pooled counts at this position and time form the backoff
                let mut pooled = vec![0.0; k];
                for state in 0..=k {
                    let off = self.offset(i, state, t);
                    pooled.iter_mut().zip(&table[off..off + k]).for_each(|(p, c)| *p += c);
                }
                let pz = pooled.iter().sum::<f64>() + eps * k as f64;
                let off = self.offset(i, s, t);
                let counts = &table[off..off + k];
                let z = counts.iter().sum::<f64>() + eps * k as f64;
                counts
                    .iter()
                    .zip(&pooled)
                    .map(|(c, p)| (c + eps * k as f64 * (p + eps) / pz) / z)
                    .collect()
            })
            .collect();
        Ok(DenoiserOutput::new(rows))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// Mean held-out VLB of the untrained (uniform) model.
    pub untrained_vlb: f64,
    /// Mean held-out VLB after each epoch.
    pub heldout_vlb: Vec<f64>,
}

/// Mean bound over `heldout`, each sequence under its own schedule.
pub fn mean_vlb<D: Denoiser + ?Sized, P: ScheduleProvider + ?Sized>(
    denoiser: &D,
    heldout: &[TokenSequence],
    schedules: &P,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if heldout.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total = 0.0;
    for (j, seq) in heldout.iter().enumerate() {
        let table = schedules.schedule_for(seq)?;
        let mode = VlbMode::Auto {
            samples,
            seed: seed.wrapping_add(j as u64),
        };
        total += vlb(seq, denoiser, &table, mode)?.total;
    }
    Ok(total / heldout.len() as f64)
}

/// Fits the count table by stratified forward sampling of every timestep.
pub fn train_tabular<P: ScheduleProvider + ?Sized>(
    corpus: &[TokenSequence],
    heldout: &[TokenSequence],
    schedules: &P,
    config: &TabularConfig,
) -> Result<(TabularDenoiser, TrainingTrace)> {
    let first = corpus.first().ok_or(Error::EmptyCorpus)?;
    let k = first.vocab().categories();
    let steps = schedules.steps();
    let mut model = TabularDenoiser::new(k, steps, config.clone())?;
    let untrained_vlb = mean_vlb(&model, heldout, schedules, config.vlb_samples, config.seed)?;
    let mut rng = seeded(config.seed);
    let mut heldout_vlb = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        for seq in corpus {
            let table = schedules.schedule_for(seq)?;
            for t in 1..=steps {
                for _ in 0..config.samples_per_step {
                    let xt = sample_forward(seq, &table, t, &mut rng)?;
                    model.observe(seq, &xt, t)?;
                }
            }
        }
        let v = mean_vlb(&model, heldout, schedules, config.vlb_samples, config.seed)?;
        log::info!("epoch {epoch}: held-out VLB {v:.4}");
        heldout_vlb.push(v);
    }
    Ok((
        model,
        TrainingTrace {
            untrained_vlb,
            heldout_vlb,
        },
    ))
}

/// A generated sequence with its reverse trajectory `[x_T, …, x_0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub sequence: TokenSequence,
    pub trajectory: Vec<TokenSequence>,
}

impl Generation {
    /// Per position, the smallest `t` from which the value already equals the final token.
    pub fn stabilization_steps(&self) -> Vec<usize> {
        stabilization_steps(&self.trajectory)
    }
}

/// `trajectory` runs `x_T` down to `x_0`. A position stabilized at step `s` holds
/// its final value at every `t ≤ s`.
pub fn stabilization_steps(trajectory: &[TokenSequence]) -> Vec<usize> {
    let Some(last) = trajectory.last() else {
        return Vec::new();
    };
    let steps = trajectory.len() - 1;
    let final_tokens = last.active();
    (0..final_tokens.len())
        .map(|i| {
            let mut stable = 0;
            for t in 1..=steps {
                if trajectory[steps - t].active()[i] == final_tokens[i] {
                    stable = t;
                } else {
                    break;
                }
            }
            stable
        })
        .collect()
}

/// Draws `x_T` from the terminal prior of every position's schedule.
pub fn sample_terminal<R: Rng + ?Sized>(
    table: &ScheduleTable,
    length: usize,
    condition: Option<i64>,
    vocab: Vocab,
    rng: &mut R,
) -> Result<TokenSequence> {
    table.check_covers(length)?;
    let tokens = (0..length)
        .map(|i| Ok(terminal_prior(table.row(i), vocab)?.sample(rng)))
        .collect::<Result<Vec<_>>>()?;
    TokenSequence::new("generated", tokens, condition, vocab)
}

/// Ancestral sampling from the terminal prior down to `x_0`.
pub fn generate<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    table: &ScheduleTable,
    length: usize,
    condition: Option<i64>,
    rng: &mut R,
) -> Result<Generation> {
    if length == 0 {
        return Err(Error::EmptySequence);
    }
    let vocab = Vocab::new(denoiser.categories())?;
    let mut x = sample_terminal(table, length, condition, vocab, rng)?;
    let mut trajectory = vec![x.clone()];
    for t in (1..=table.steps()).rev() {
        x = reverse_step(&x, denoiser, table, t, rng)?;
        trajectory.push(x.clone());
    }
    let remaining = x.active().iter().filter(|&&s| s == vocab.mask()).count();
    if remaining > 0 {
        return Err(Error::IncompleteDenoising(remaining));
    }
    Ok(Generation { sequence: x, trajectory })
}
