//! Codebooks and vector quantization on the unit sphere.
//!
//! Latent features and codebook entries are both ℓ2-normalized before the
//! nearest-neighbour search, so quantization depends only on direction.

mod train;

use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{ContinuousSequence, TokenSequence, Vocab};
use crate::rng::seeded;
use crate::{Error, Result};

pub use train::{train_toy_vq, Matrix, ToyVq, ToyVqConfig, ToyVqGradients, TrainedVq};

/// Encoder outputs `b_t`, one row per frame.
pub type LatentSequence = ContinuousSequence;

const CODEBOOK_VERSION: u32 = 1;

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `K` embedding vectors of width `d′` plus hit counters.
#[derive(Debug)]
pub struct Codebook {
    dim: usize,
    entries: Vec<f64>,
    seed: Option<u64>,
    usage: Vec<AtomicU64>,
}

impl Clone for Codebook {
    fn clone(&self) -> Self {
        Self {
            dim: self.dim,
            entries: self.entries.clone(),
            seed: self.seed,
            usage: self
                .usage
                .iter()
                .map(|c| AtomicU64::new(c.load(Ordering::Relaxed)))
                .collect(),
        }
    }
}

impl PartialEq for Codebook {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.entries == other.entries
    }
}

impl Codebook {
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 || entries.is_empty() || entries.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form codebook rows of width {dim}",
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite codebook value".into()));
        }
        if entries.chunks_exact(dim).any(|row| row.iter().all(|&v| v == 0.0)) {
            return Err(Error::ZeroVector);
        }
        let k = entries.len() / dim;
        Ok(Self {
            dim,
            entries,
            seed: None,
            usage: (0..k).map(|_| AtomicU64::new(0)).collect(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged codebook rows".into()));
        }
        Self::new(dim, rows.concat())
    }

    /// Entries drawn uniformly on the unit sphere.
    pub fn random_unit(k: usize, dim: usize, seed: u64) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::Config("codebook needs K >= 1 and d' >= 1".into()));
        }
        let mut rng = seeded(seed);
        let mut entries = Vec::with_capacity(k * dim);
        while entries.len() < k * dim {
            let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            if let Ok(unit) = l2_normalize(&raw) {
                entries.extend(unit);
            }
        }
        let mut book = Self::new(dim, entries)?;
        book.seed = Some(seed);
        Ok(book)
    }

    pub fn len(&self) -> usize {
        self.entries.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.len()).expect("codebook is non-empty")
    }

    pub fn normalized_entries(&self) -> Result<Vec<Vec<f64>>> {
        self.entries.chunks_exact(self.dim).map(l2_normalize).collect()
    }

    /// Nearest normalized entry for every frame, lowest index on ties.
    /// Pure: usage counters are left untouched.
    pub fn assign(&self, latents: &LatentSequence) -> Result<Vec<usize>> {
        if latents.width() != self.dim {
            return Err(Error::Shape(format!(
                "latent width {} does not match codebook width {}",
                latents.width(),
                self.dim
            )));
        }
        let codes = self.normalized_entries()?;
        latents
            .iter_frames()
            .map(|frame| {
                let b = l2_normalize(frame)?;
                let mut best = 0;
                let mut best_dist = f64::INFINITY;
                for (k, z) in codes.iter().enumerate() {
                    let d = squared_distance(&b, z);
                    if d < best_dist {
                        best = k;
                        best_dist = d;
                    }
                }
                Ok(best)
            })
            .collect()
    }

    /// Quantizes a latent sequence and records the hits in the usage counters.
    pub fn quantize(&self, latents: &LatentSequence) -> Result<TokenSequence> {
        let tokens = self.assign(latents)?;
        for &k in &tokens {
            self.usage[k].fetch_add(1, Ordering::Relaxed);
        }
        TokenSequence::new(String::new(), tokens, None, self.vocab())
    }

    pub fn usage_counts(&self) -> Vec<u64> {
        self.usage.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn reset_usage(&self) {
        for c in &self.usage {
            c.store(0, Ordering::Relaxed);
        }
    }

    /// The selected code vectors `z_{k_t}` for a token assignment.
    pub fn gather(&self, tokens: &[usize]) -> Result<LatentSequence> {
        let mut data = Vec::with_capacity(tokens.len() * self.dim);
        for &k in tokens {
            if k >= self.len() {
                return Err(Error::TokenRange {
                    token: k,
                    categories: self.len(),
                });
            }
            data.extend_from_slice(self.entry(k));
        }
        ContinuousSequence::new(self.dim, data)
    }

    pub fn to_file(&self) -> CodebookFile {
        CodebookFile {
            version: CODEBOOK_VERSION,
            k: self.len(),
            dim: self.dim,
            seed: self.seed,
            entries: self.entries.clone(),
        }
    }

    pub fn from_file(file: CodebookFile) -> Result<Self> {
        if file.version != CODEBOOK_VERSION {
            return Err(Error::Version {
                found: file.version,
                expected: CODEBOOK_VERSION,
            });
        }
        if file.entries.len() != file.k * file.dim {
            return Err(Error::Shape(format!(
                "header declares {}x{} but {} values follow",
                file.k,
                file.dim,
                file.entries.len()
            )));
        }
        let mut book = Self::new(file.dim, file.entries)?;
        book.seed = file.seed;
        Ok(book)
    }
}

/// Serialized codebook: header `{K, d′, seed}` then row-major entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookFile {
    pub version: u32,
    pub k: usize,
    pub dim: usize,
    pub seed: Option<u64>,
    pub entries: Vec<f64>,
}

/// Squared Frobenius norm of the normalized Gram matrix minus identity.
pub fn orth_reg(codebook: &Codebook) -> Result<f64> {
    let n = codebook.normalized_entries()?;
    let mut total = 0.0;
    for (i, a) in n.iter().enumerate() {
        for (j, b) in n.iter().enumerate() {
            let g: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            total += (g - target) * (g - target);
        }
    }
    Ok(total)
}

/// Gradient of [`orth_reg`] with respect to the raw (unnormalized) entries.
pub fn orth_reg_gradient(codebook: &Codebook) -> Result<Vec<f64>> {
    let dim = codebook.dim();
    let n = codebook.normalized_entries()?;
    let k = n.len();
    let mut grad = vec![0.0; k * dim];
    for i in 0..k {
        // dL/dn_i = 4 Σ_j (G_ij − δ_ij) n_j
        let mut dn = vec![0.0; dim];
        for j in 0..k {
            let g: f64 = n[i].iter().zip(&n[j]).map(|(x, y)| x * y).sum();
            let coeff = 4.0 * (g - if i == j { 1.0 } else { 0.0 });
            for (d, v) in dn.iter_mut().zip(&n[j]) {
                *d += coeff * v;
            }
        }
        let norm = codebook.entry(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        let radial: f64 = dn.iter().zip(&n[i]).map(|(x, y)| x * y).sum();
        for d in 0..dim {
            grad[i * dim + d] = (dn[d] - radial * n[i][d]) / norm;
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Commitment weight η.
    pub eta: f64,
    /// Orthogonal regularization weight δ.
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VqLossReport {
    pub reconstruction: f64,
    /// Pulls the selected codes towards the stopped encoder output.
    pub embedding: f64,
    /// Pulls the encoder output towards the stopped codes.
    pub commitment: f64,
    pub orthogonal: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl VqLossReport {
    pub fn assemble(
        reconstruction: f64,
        embedding: f64,
        commitment: f64,
        orthogonal: f64,
        weights: LossWeights,
    ) -> Self {
        Self {
            reconstruction,
            embedding,
            commitment,
            orthogonal,
            total: reconstruction + embedding + weights.eta * commitment + weights.delta * orthogonal,
            weights,
        }
    }
}

fn sum_squared_diff(a: &ContinuousSequence, b: &ContinuousSequence, what: &str) -> Result<f64> {
    if a.width() != b.width() || a.frames() != b.frames() {
        return Err(Error::Shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.frames(),
            a.width(),
            b.frames(),
            b.width()
        )));
    }
    Ok(squared_distance(a.data(), b.data()))
}

/// VQ objective terms for one sequence. The embedding and commitment terms
/// share a value and differ only in which side receives gradient.
pub fn vq_losses(
    input: &ContinuousSequence,
    reconstruction: &ContinuousSequence,
    latents: &LatentSequence,
    selected: &LatentSequence,
    codebook: &Codebook,
    weights: LossWeights,
) -> Result<VqLossReport> {
    let rec = sum_squared_diff(input, reconstruction, "reconstruction")?;
    if latents.width() != codebook.dim() {
        return Err(Error::Shape("latent width differs from codebook width".into()));
    }
    let quant = sum_squared_diff(selected, latents, "selected codes")?;
    let orth = orth_reg(codebook)?;
    Ok(VqLossReport::assemble(rec, quant, quant, orth, weights))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub counts: Vec<u64>,
    /// Share of entries hit at least once.
    pub fraction: f64,
    /// Shannon entropy of the empirical code distribution, in nats.
    pub entropy: f64,
}

impl UsageReport {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total: u64 = counts.iter().sum();
        let used = counts.iter().filter(|&&c| c > 0).count();
        let entropy = if total == 0 {
            0.0
        } else {
            counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / total as f64;
                    -p * p.ln()
                })
                .sum()
        };
        Self {
            fraction: used as f64 / counts.len().max(1) as f64,
            entropy,
            counts,
        }
    }

    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "entry,count")?;
        for (k, c) in self.counts.iter().enumerate() {
            writeln!(writer, "{k},{c}")?;
        }
        Ok(())
    }
}

pub fn usage_report(codebook: &Codebook, corpus: &[TokenSequence]) -> UsageReport {
    let mut counts = vec![0u64; codebook.len()];
    for seq in corpus {
        for &t in seq.active() {
            if let Some(c) = counts.get_mut(t) {
                *c += 1;
            }
        }
    }
    UsageReport::from_counts(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latents(rows: &[Vec<f64>]) -> LatentSequence {
        ContinuousSequence::from_frames(rows).unwrap()
    }

    #[test]
    fn normalizes_three_four_five() {
        let u = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
        let e = l2_normalize(&[0.0, 1.0]).unwrap();
        assert_eq!(e, vec![0.0, 1.0]);
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn quantize_basis_cases() {
        let book = Codebook::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let seq = book.quantize(&latents(&[vec![5.0, 0.0], vec![1.0, 1.0], vec![0.1, 3.0]])).unwrap();
        assert_eq!(seq.tokens(), &[0, 0, 1]);
        assert_eq!(book.usage_counts(), vec![2, 1]);
    }

    #[test]
    fn quantize_rejects_width_mismatch() {
        let book = Codebook::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(
            book.assign(&latents(&[vec![1.0, 0.0, 0.0]])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn codebook_rejects_zero_entry() {
        assert!(matches!(
            Codebook::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn orth_reg_known_values() {
        let basis = Codebook::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(orth_reg(&basis).unwrap().abs() < 1e-15);
        let twins = Codebook::from_rows(&[vec![0.6, 0.8], vec![0.6, 0.8]]).unwrap();
        assert!((orth_reg(&twins).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn loss_fixed_point_and_weight_zeroing() {
        let book = Codebook::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let x = latents(&[vec![1.0, 2.0, 3.0]]);
        let b = latents(&[vec![0.0, 2.0]]);
        let sel = book.gather(&[1]).unwrap();
        let w = LossWeights { eta: 0.25, delta: 0.5 };
        let r = vq_losses(&x, &x, &b, &sel, &book, w).unwrap();
        assert_eq!((r.reconstruction, r.embedding, r.commitment), (0.0, 0.0, 0.0));

        let xr = latents(&[vec![1.0, 2.0, 2.0]]);
        let b2 = latents(&[vec![0.5, 1.0]]);
        let zero = LossWeights { eta: 0.0, delta: 0.0 };
        let r = vq_losses(&x, &xr, &b2, &sel, &book, zero).unwrap();
        assert!((r.total - (r.reconstruction + r.embedding)).abs() < 1e-15);
        assert!((r.reconstruction - 1.0).abs() < 1e-15);
        assert!((r.embedding - 1.25).abs() < 1e-15);
    }

    #[test]
    fn loss_shape_mismatch() {
        let book = Codebook::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let x = latents(&[vec![1.0, 2.0, 3.0]]);
        let y = latents(&[vec![1.0, 2.0]]);
        let b = latents(&[vec![1.0, 0.0]]);
        let w = LossWeights { eta: 1.0, delta: 1.0 };
        assert!(matches!(vq_losses(&x, &y, &b, &b, &book, w), Err(Error::Shape(_))));
    }

    #[test]
    fn usage_extremes() {
        let book = Codebook::random_unit(8, 3, 1).unwrap();
        let v = book.vocab();
        let same = TokenSequence::new("s", vec![3; 10], None, v).unwrap();
        let r = usage_report(&book, &[same]);
        assert_eq!(r.fraction, 1.0 / 8.0);
        assert_eq!(r.entropy, 0.0);
        let all = TokenSequence::new("u", (0..8).collect(), None, v).unwrap();
        let r = usage_report(&book, &[all]);
        assert_eq!(r.fraction, 1.0);
        assert!((r.entropy - 8f64.ln()).abs() < 1e-12);
        assert!((r.entropy - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn codebook_file_round_trip() {
        let book = Codebook::random_unit(4, 3, 9).unwrap();
        let json = serde_json::to_string(&book.to_file()).unwrap();
        let back = Codebook::from_file(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, book);
        assert_eq!(back.seed(), Some(9));
        let mut bad = book.to_file();
        bad.version = 7;
        assert!(matches!(Codebook::from_file(bad), Err(Error::Version { .. })));
    }

    #[test]
    fn random_unit_entries_are_unit() {
        let book = Codebook::random_unit(16, 5, 2).unwrap();
        for k in 0..16 {
            let n: f64 = book.entry(k).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
