//! Token corpora, continuous feature sequences and frequency statistics.
//!
//! Corpus files are line-delimited JSON records `{id, tokens, condition}`. The
//! same record shape, with an extra `t` field, is used for trajectory dumps.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{sample_categorical, seeded};
use crate::{Error, Result};

/// Category count `K` together with the two sentinels placed after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    categories: usize,
}

impl Vocab {
    pub fn new(categories: usize) -> Result<Self> {
        if categories == 0 {
            return Err(Error::Config("vocabulary needs at least one category".into()));
        }
        Ok(Self { categories })
    }

    /// Number of real categories `K`.
    pub fn categories(&self) -> usize {
        self.categories
    }

    /// Size of the diffusion state space (`K` real categories plus MASK).
    pub fn states(&self) -> usize {
        self.categories + 1
    }

    pub fn mask(&self) -> usize {
        self.categories
    }

    pub fn pad(&self) -> usize {
        self.categories + 1
    }

    pub fn is_real(&self, token: usize) -> bool {
        token < self.categories
    }
}

/// A validated token sequence. PAD may only appear as a contiguous suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    id: String,
    tokens: Vec<usize>,
    condition: Option<i64>,
    vocab: Vocab,
    length: usize,
}

impl TokenSequence {
    pub fn new(
        id: impl Into<String>,
        tokens: Vec<usize>,
        condition: Option<i64>,
        vocab: Vocab,
    ) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        let pad = vocab.pad();
        if let Some(&token) = tokens.iter().find(|&&t| t > pad) {
            return Err(Error::TokenRange {
                token,
                categories: vocab.categories(),
            });
        }
        let length = tokens.iter().position(|&t| t == pad).unwrap_or(tokens.len());
        if tokens[length..].iter().any(|&t| t != pad) {
            return Err(Error::PadNotSuffix);
        }
        Ok(Self {
            id: id.into(),
            tokens,
            condition,
            vocab,
            length,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// The non-PAD prefix.
    pub fn active(&self) -> &[usize] {
        &self.tokens[..self.length]
    }

    pub fn condition(&self) -> Option<i64> {
        self.condition
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    /// Number of non-PAD positions.
    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    /// Total positions including the PAD suffix.
    pub fn padded_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn contains_mask(&self) -> bool {
        self.active().contains(&self.vocab.mask())
    }

    /// Same id, condition and PAD layout with new active tokens.
    pub fn with_active(&self, active: Vec<usize>) -> Result<Self> {
        if active.len() != self.length {
            return Err(Error::Shape(format!(
                "expected {} active tokens, got {}",
                self.length,
                active.len()
            )));
        }
        let mut tokens = active;
        tokens.resize(self.tokens.len(), self.vocab.pad());
        Self::new(self.id.clone(), tokens, self.condition, self.vocab)
    }

    pub fn to_record(&self) -> CorpusRecord {
        CorpusRecord {
            id: self.id.clone(),
            tokens: self.tokens.clone(),
            condition: self.condition,
            t: None,
        }
    }
}

/// On-disk shape of one corpus line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    #[serde(default)]
    pub id: String,
    pub tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
}

/// Parses line-delimited corpus records. Blank lines are skipped.
pub fn parse_corpus<R: BufRead>(reader: R, vocab: Vocab) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line_no = index + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wrap = |e: Error| Error::Record {
            line: line_no,
            source: Box::new(e),
        };
        let record: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| wrap(Error::Parse(e.to_string())))?;
        let id = if record.id.is_empty() {
            format!("seq-{}", out.len())
        } else {
            record.id
        };
        out.push(TokenSequence::new(id, record.tokens, record.condition, vocab).map_err(wrap)?);
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>, vocab: Vocab) -> Result<Vec<TokenSequence>> {
    parse_corpus(BufReader::new(File::open(path)?), vocab)
}

pub fn write_corpus<W: Write>(mut writer: W, corpus: &[TokenSequence]) -> Result<()> {
    for seq in corpus {
        serde_json::to_writer(&mut writer, &seq.to_record())?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &[TokenSequence]) -> Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_corpus(&mut writer, corpus)?;
    writer.flush()?;
    Ok(())
}

/// `T` frames of `d` finite real features, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousSequence {
    width: usize,
    data: Vec<f64>,
}

impl ContinuousSequence {
    pub fn new(width: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || data.is_empty() || data.len() % width != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form frames of width {width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite feature value".into()));
        }
        Ok(Self { width, data })
    }

    pub fn from_frames(frames: &[Vec<f64>]) -> Result<Self> {
        let width = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != width) {
            return Err(Error::Shape("ragged frames".into()));
        }
        Self::new(width, frames.concat())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn frame(&self, index: usize) -> &[f64] {
        &self.data[index * self.width..(index + 1) * self.width]
    }

    pub fn iter_frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Per-category occurrence counts over MASK-free, PAD-free positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl CorpusStats {
    pub fn frequency(&self, category: usize) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.counts[category] as f64 / self.total as f64
        }
    }

    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "category,count")?;
        for (k, c) in self.counts.iter().enumerate() {
            writeln!(writer, "{k},{c}")?;
        }
        Ok(())
    }
}

pub fn count_frequencies(corpus: &[TokenSequence]) -> Result<CorpusStats> {
    let first = corpus.first().ok_or(Error::EmptyCorpus)?;
    let vocab = first.vocab();
    let mut counts = vec![0u64; vocab.categories()];
    for seq in corpus {
        if seq.vocab() != vocab {
            return Err(Error::Shape("corpus mixes vocabularies".into()));
        }
        for &t in seq.active() {
            if vocab.is_real(t) {
                counts[t] += 1;
            }
        }
    }
    let total = counts.iter().sum();
    Ok(CorpusStats { counts, total })
}

/// Probabilistic finite-state grammar used as a desk-scale token source.
///
/// Each step either continues the previous token to its successor (with
/// probability `stickiness`) or draws a fresh token from a Zipf law with
/// exponent `skew`. With `skew = 0` the stationary distribution is uniform.
/// Conditions rotate the Zipf ranks so different labels favour different
/// categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub categories: usize,
    pub sequences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub skew: f64,
    pub stickiness: f64,
    pub conditions: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            categories: 16,
            sequences: 200,
            min_len: 8,
            max_len: 16,
            skew: 1.1,
            stickiness: 0.3,
            conditions: 0,
        }
    }
}

impl GrammarConfig {
    fn validate(&self) -> Result<()> {
        if self.categories < 2 {
            return Err(Error::Config("grammar needs K >= 2".into()));
        }
        if self.sequences == 0 {
            return Err(Error::Config("grammar needs n >= 1".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "length range [{}, {}] is empty",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.stickiness) || !self.skew.is_finite() || self.skew < 0.0 {
            return Err(Error::Config("stickiness must lie in [0,1], skew >= 0".into()));
        }
        Ok(())
    }

    fn zipf(&self, condition: usize) -> Vec<f64> {
        let k = self.categories;
        let shift = if self.conditions > 0 { k / self.conditions } else { 0 };
        (0..k)
            .map(|cat| {
                let rank = (cat + k - (condition * shift) % k) % k;
                1.0 / ((rank + 1) as f64).powf(self.skew)
            })
            .collect()
    }
}

pub fn synth_grammar_corpus(seed: u64, config: &GrammarConfig) -> Result<Vec<TokenSequence>> {
    config.validate()?;
    let vocab = Vocab::new(config.categories)?;
    let mut rng = seeded(seed);
    let mut out = Vec::with_capacity(config.sequences);
    for i in 0..config.sequences {
        let condition = (config.conditions > 0).then(|| i % config.conditions);
        let zipf = config.zipf(condition.unwrap_or(0));
        let len = rng.random_range(config.min_len..=config.max_len);
        let mut tokens = Vec::with_capacity(len);
        let mut prev = sample_categorical(&zipf, &mut rng);
        tokens.push(prev);
        while tokens.len() < len {
            prev = if rng.random::<f64>() < config.stickiness {
                (prev + 1) % config.categories
            } else {
                sample_categorical(&zipf, &mut rng)
            };
            tokens.push(prev);
        }
        out.push(TokenSequence::new(
            format!("seq-{i:05}"),
            tokens,
            condition.map(|c| c as i64),
            vocab,
        )?);
    }
    Ok(out)
}

/// Continuous corpus built by rendering grammar tokens as noisy cluster centres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousConfig {
    pub grammar: GrammarConfig,
    pub width: usize,
    pub noise: f64,
}

impl Default for ContinuousConfig {
    fn default() -> Self {
        Self {
            grammar: GrammarConfig {
                categories: 8,
                sequences: 40,
                min_len: 16,
                max_len: 16,
                ..GrammarConfig::default()
            },
            width: 6,
            noise: 0.1,
        }
    }
}

pub fn synth_continuous_corpus(seed: u64, config: &ContinuousConfig) -> Result<Vec<ContinuousSequence>> {
    if config.width == 0 {
        return Err(Error::Config("feature width must be positive".into()));
    }
    let tokens = synth_grammar_corpus(seed, &config.grammar)?;
    let mut rng = seeded(seed ^ 0x9e37_79b9_7f4a_7c15);
    let centres: Vec<Vec<f64>> = (0..config.grammar.categories)
        .map(|_| {
            (0..config.width)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect();
    tokens
        .iter()
        .map(|seq| {
            let mut data = Vec::with_capacity(seq.len() * config.width);
            for &t in seq.active() {
                for &c in &centres[t] {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    data.push(c + config.noise * n);
                }
            }
            ContinuousSequence::new(config.width, data)
        })
        .collect()
}
