//! Linear encoder/decoder VQ model trained with closed-form gradients.
//!
//! Stop-gradient placement is realised by routing each term's gradient:
//! the embedding term updates only the codebook, the commitment term only the
//! encoder, and reconstruction reaches the encoder through the straight-through
//! estimator and the decoder directly. Reconstruction never touches the codebook.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{orth_reg, orth_reg_gradient, vq_losses, Codebook, LatentSequence, LossWeights, VqLossReport};
use crate::corpus::ContinuousSequence;
use crate::rng::seeded;
use crate::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn gaussian<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *rng);
                scale * z
            })
            .collect::<Vec<f64>>();
        Self { rows, cols, data }
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn mul_t_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, &s) in self.data.chunks_exact(self.cols).zip(v) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * s;
            }
        }
        out
    }

    fn add_outer(&mut self, scale: f64, left: &[f64], right: &[f64]) {
        for (row, &l) in self.data.chunks_exact_mut(self.cols).zip(left) {
            for (a, &r) in row.iter_mut().zip(right) {
                *a += scale * l * r;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyVqConfig {
    /// Codebook size `K`.
    pub codes: usize,
    /// Latent width `d′`.
    pub latent_dim: usize,
    pub eta: f64,
    pub delta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ToyVqConfig {
    fn default() -> Self {
        Self {
            codes: 16,
            latent_dim: 4,
            eta: 0.25,
            delta: 0.0,
            learning_rate: 0.05,
            epochs: 200,
            seed: 0,
        }
    }
}

impl ToyVqConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            eta: self.eta,
            delta: self.delta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyVq {
    /// `d′ × d`
    pub encoder: Matrix,
    /// `d × d′`
    pub decoder: Matrix,
    pub codebook: Codebook,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyVqGradients {
    pub encoder: Matrix,
    pub decoder: Matrix,
    pub codebook: Vec<f64>,
}

impl ToyVqGradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.encoder.data.clone();
        out.extend_from_slice(&self.decoder.data);
        out.extend_from_slice(&self.codebook);
        out
    }
}

fn check_widths(corpus: &[ContinuousSequence], width: usize) -> Result<usize> {
    let mut frames = 0;
    for seq in corpus {
        if seq.width() != width {
            return Err(Error::Shape(format!(
                "frame width {} differs from model input width {width}",
                seq.width()
            )));
        }
        frames += seq.frames();
    }
    if frames == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(frames)
}

impl ToyVq {
    pub fn new(input_dim: usize, config: &ToyVqConfig) -> Result<Self> {
        if input_dim == 0 || config.latent_dim == 0 || config.codes == 0 {
            return Err(Error::Config("toy VQ needs positive widths and K >= 1".into()));
        }
        let mut rng = seeded(config.seed);
        let encoder = Matrix::gaussian(config.latent_dim, input_dim, 1.0 / (input_dim as f64).sqrt(), &mut rng);
        let decoder = Matrix::gaussian(input_dim, config.latent_dim, 1.0 / (config.latent_dim as f64).sqrt(), &mut rng);
        let codebook = Codebook::random_unit(config.codes, config.latent_dim, rng.random())?;
        Ok(Self {
            encoder,
            decoder,
            codebook,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.cols
    }

    pub fn encode(&self, input: &ContinuousSequence) -> Result<LatentSequence> {
        let data = input.iter_frames().flat_map(|x| self.encoder.mul_vec(x)).collect();
        ContinuousSequence::new(self.encoder.rows, data)
    }

    pub fn decode(&self, codes: &LatentSequence) -> Result<ContinuousSequence> {
        let data = codes.iter_frames().flat_map(|z| self.decoder.mul_vec(z)).collect();
        ContinuousSequence::new(self.decoder.rows, data)
    }

    /// Token assignment of every frame of every sequence.
    pub fn assignments(&self, corpus: &[ContinuousSequence]) -> Result<Vec<Vec<usize>>> {
        corpus
            .iter()
            .map(|seq| self.codebook.assign(&self.encode(seq)?))
            .collect()
    }

    /// Per-frame mean of the data terms plus the (unscaled) orthogonal term.
    pub fn objective(&self, corpus: &[ContinuousSequence], weights: LossWeights) -> Result<VqLossReport> {
        let frames = check_widths(corpus, self.input_dim())? as f64;
        let mut rec = 0.0;
        let mut quant = 0.0;
        for seq in corpus {
            let latents = self.encode(seq)?;
            let tokens = self.codebook.assign(&latents)?;
            let selected = self.codebook.gather(&tokens)?;
            let out = self.decode(&selected)?;
            let r = vq_losses(seq, &out, &latents, &selected, &self.codebook, LossWeights { eta: 0.0, delta: 0.0 })?;
            rec += r.reconstruction;
            quant += r.embedding;
        }
        let orth = orth_reg(&self.codebook)?;
        Ok(VqLossReport::assemble(rec / frames, quant / frames, quant / frames, orth, weights))
    }

    /// Objective and routed gradients at the current parameters.
    pub fn gradients(
        &self,
        corpus: &[ContinuousSequence],
        weights: LossWeights,
    ) -> Result<(VqLossReport, ToyVqGradients)> {
        let frames = check_widths(corpus, self.input_dim())? as f64;
        let scale = 1.0 / frames;
        let dim = self.codebook.dim();
        let mut d_enc = Matrix::zeros(self.encoder.rows, self.encoder.cols);
        let mut d_dec = Matrix::zeros(self.decoder.rows, self.decoder.cols);
        let mut d_book = vec![0.0; self.codebook.entries().len()];
        let mut rec = 0.0;
        let mut quant = 0.0;
        for seq in corpus {
            let latents = self.encode(seq)?;
            let tokens = self.codebook.assign(&latents)?;
            for ((x, b), &k) in seq.iter_frames().zip(latents.iter_frames()).zip(&tokens) {
                let z = self.codebook.entry(k);
                let out = self.decoder.mul_vec(z);
                let resid: Vec<f64> = x.iter().zip(&out).map(|(a, o)| a - o).collect();
                rec += resid.iter().map(|r| r * r).sum::<f64>();
                quant += b.iter().zip(z).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();

                d_dec.add_outer(-2.0 * scale, &resid, z);
                // straight-through: d rec / d b = d rec / d z_q
                let mut g_b = self.decoder.mul_t_vec(&resid);
                for ((g, bv), zv) in g_b.iter_mut().zip(b).zip(z) {
                    *g = -2.0 * *g + 2.0 * weights.eta * (bv - zv);
                }
                d_enc.add_outer(scale, &g_b, x);
                for d in 0..dim {
                    d_book[k * dim + d] += 2.0 * scale * (z[d] - b[d]);
                }
            }
        }
        let orth = orth_reg(&self.codebook)?;
        if weights.delta != 0.0 {
            for (g, o) in d_book.iter_mut().zip(orth_reg_gradient(&self.codebook)?) {
                *g += weights.delta * o;
            }
        }
        let report = VqLossReport::assemble(rec * scale, quant * scale, quant * scale, orth, weights);
        Ok((
            report,
            ToyVqGradients {
                encoder: d_enc,
                decoder: d_dec,
                codebook: d_book,
            },
        ))
    }

    /// Scalar whose ordinary gradient in `self` at `self == frozen` equals the
    /// routed gradient: every stop-gradient operand is read from `frozen`.
    pub fn surrogate_objective(
        &self,
        frozen: &ToyVq,
        corpus: &[ContinuousSequence],
        weights: LossWeights,
    ) -> Result<f64> {
        let frames = check_widths(corpus, self.input_dim())? as f64;
        let mut total = 0.0;
        for seq in corpus {
            let live_b = self.encode(seq)?;
            let frozen_b = frozen.encode(seq)?;
            let tokens = frozen.codebook.assign(&frozen_b)?;
            for (((x, b), bf), &k) in seq
                .iter_frames()
                .zip(live_b.iter_frames())
                .zip(frozen_b.iter_frames())
                .zip(&tokens)
            {
                let z = self.codebook.entry(k);
                let zf = frozen.codebook.entry(k);
                let st: Vec<f64> = b.iter().zip(zf).zip(bf).map(|((bl, q), f)| bl + (q - f)).collect();
                let out = self.decoder.mul_vec(&st);
                total += x.iter().zip(&out).map(|(a, o)| (a - o) * (a - o)).sum::<f64>();
                total += z.iter().zip(bf).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
                total += weights.eta * zf.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            }
        }
        Ok(total / frames + weights.delta * orth_reg(&self.codebook)?)
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut out = self.encoder.data.clone();
        out.extend_from_slice(&self.decoder.data);
        out.extend_from_slice(self.codebook.entries());
        out
    }

    pub fn with_parameters(&self, params: &[f64]) -> Result<Self> {
        let ne = self.encoder.data.len();
        let nd = self.decoder.data.len();
        let nb = self.codebook.entries().len();
        if params.len() != ne + nd + nb {
            return Err(Error::Shape("parameter vector length".into()));
        }
        let mut next = self.clone();
        next.encoder.data.copy_from_slice(&params[..ne]);
        next.decoder.data.copy_from_slice(&params[ne..ne + nd]);
        next.codebook.entries_mut().copy_from_slice(&params[ne + nd..]);
        Ok(next)
    }

    fn step(&mut self, grads: &ToyVqGradients, lr: f64) {
        for (p, g) in self.encoder.data.iter_mut().zip(&grads.encoder.data) {
            *p -= lr * g;
        }
        for (p, g) in self.decoder.data.iter_mut().zip(&grads.decoder.data) {
            *p -= lr * g;
        }
        for (p, g) in self.codebook.entries_mut().iter_mut().zip(&grads.codebook) {
            *p -= lr * g;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedVq {
    pub model: ToyVq,
    /// Objective at the start of each epoch, followed by the final objective.
    pub trace: Vec<VqLossReport>,
}

/// Full-batch gradient descent on the routed VQ objective.
pub fn train_toy_vq(corpus: &[ContinuousSequence], config: &ToyVqConfig) -> Result<TrainedVq> {
    let width = corpus.first().ok_or(Error::EmptyCorpus)?.width();
    if !(config.learning_rate >= 0.0) || config.eta < 0.0 || config.delta < 0.0 {
        return Err(Error::Config("learning rate and loss weights must be non-negative".into()));
    }
    let weights = config.weights();
    let mut model = ToyVq::new(width, config)?;
    let mut trace = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..config.epochs {
        let (report, grads) = model.gradients(corpus, weights).map_err(|e| match e {
            Error::ZeroVector => Error::Diverged(format!("latent or code vanished at epoch {epoch}")),
            other => other,
        })?;
        if !report.total.is_finite() || grads.flatten().iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged(format!(
                "non-finite loss or gradient at epoch {epoch} (lr {})",
                config.learning_rate
            )));
        }
        trace.push(report);
        model.step(&grads, config.learning_rate);
        if model.codebook.entries().chunks_exact(model.codebook.dim()).any(|r| r.iter().all(|&v| v == 0.0)) {
            return Err(Error::Diverged(format!("codebook entry collapsed to zero at epoch {epoch}")));
        }
    }
    let last = model.objective(corpus, weights)?;
    if !last.total.is_finite() {
        return Err(Error::Diverged("non-finite final loss".into()));
    }
    trace.push(last);
    Ok(TrainedVq { model, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_continuous_corpus, ContinuousConfig};

    fn corpus() -> Vec<ContinuousSequence> {
        synth_continuous_corpus(4, &ContinuousConfig::default()).unwrap()
    }

    #[test]
    fn surrogate_matches_objective_at_frozen_point() {
        let data = corpus();
        let cfg = ToyVqConfig {
            delta: 0.3,
            ..ToyVqConfig::default()
        };
        let model = ToyVq::new(data[0].width(), &cfg).unwrap();
        let obj = model.objective(&data, cfg.weights()).unwrap();
        let sur = model.surrogate_objective(&model, &data, cfg.weights()).unwrap();
        assert!((obj.total - sur).abs() < 1e-10 * obj.total.abs().max(1.0));
        let (grad_report, _) = model.gradients(&data, cfg.weights()).unwrap();
        assert!((grad_report.total - obj.total).abs() < 1e-10);
    }

    #[test]
    fn single_code_moves_to_feature_mean() {
        let data = corpus();
        let cfg = ToyVqConfig {
            codes: 1,
            epochs: 4000,
            learning_rate: 0.05,
            ..ToyVqConfig::default()
        };
        let trained = train_toy_vq(&data, &cfg).unwrap();
        let model = &trained.model;
        assert!(model.assignments(&data).unwrap().iter().flatten().all(|&k| k == 0));
        let mut mean = vec![0.0; cfg.latent_dim];
        let mut n = 0.0;
        for seq in &data {
            for b in model.encode(seq).unwrap().iter_frames() {
                for (m, v) in mean.iter_mut().zip(b) {
                    *m += v;
                }
                n += 1.0;
            }
        }
        for (m, z) in mean.iter().zip(model.codebook.entry(0)) {
            assert!((m / n - z).abs() < 1e-3, "{} vs {z}", m / n);
        }
    }

    #[test]
    fn zero_epochs_keeps_initialisation() {
        let data = corpus();
        let cfg = ToyVqConfig {
            epochs: 0,
            ..ToyVqConfig::default()
        };
        let trained = train_toy_vq(&data, &cfg).unwrap();
        assert_eq!(trained.model, ToyVq::new(data[0].width(), &cfg).unwrap());
        assert_eq!(trained.trace.len(), 1);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let data = corpus();
        let cfg = ToyVqConfig {
            learning_rate: 1e6,
            epochs: 200,
            ..ToyVqConfig::default()
        };
        let r = train_toy_vq(&data, &cfg);
        assert!(matches!(r, Err(Error::Diverged(_))), "{:?}", r.map(|t| t.trace.last().cloned()));
    }
}
