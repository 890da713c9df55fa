//! Brute-force reference computations used to check the fast paths.
//!
//! Everything here is deliberately slow and written from first principles:
//! explicit matrices, enumerated trajectories, exhaustive searches.

use rand::Rng;

use crate::corpus::TokenSequence;
use crate::denoiser::Denoiser;
use crate::schedule::{ScheduleRow, ScheduleTable};
use crate::{Error, Result};

/// `Q[i][j] = q(x_t = i | x_{t−1} = j)` as `αI + β𝟙𝟙ᵀ + γ e_M 𝟙ᵀ` on real columns, `e_M` on the MASK column.
pub fn explicit_matrix(alpha: f64, gamma: f64, categories: usize) -> Vec<Vec<f64>> {
    let n = categories + 1;
    let beta = (1.0 - alpha - gamma) / categories as f64;
    let mut q = vec![vec![0.0; n]; n];
    for j in 0..n {
        if j == categories {
            q[categories][j] = 1.0;
            continue;
        }
        q[j][j] += alpha;
        for row in q.iter_mut().take(categories) {
            row[j] += beta;
        }
        q[categories][j] += gamma;
    }
    q
}

fn mat_vec(q: &[Vec<f64>], p: &[f64]) -> Vec<f64> {
    q.iter().map(|r| r.iter().zip(p).map(|(a, b)| a * b).sum()).collect()
}

/// `Q_t ⋯ Q_1 e_{x_0}`.
pub fn marginal_by_products(x0: usize, row: &ScheduleRow, t: usize, categories: usize) -> Vec<f64> {
    let mut p = vec![0.0; categories + 1];
    p[x0] = 1.0;
    for s in 1..=t {
        p = mat_vec(&explicit_matrix(row.alpha[s], row.gamma[s], categories), &p);
    }
    p
}

/// Probability of the single-position path `path[0] = x_0, …, path[T]`.
fn path_probability(path: &[usize], mats: &[Vec<Vec<f64>>]) -> f64 {
    path.windows(2)
        .zip(mats)
        .map(|(w, q)| q[w[1]][w[0]])
        .product()
}

fn step_matrices(row: &ScheduleRow, categories: usize) -> Vec<Vec<Vec<f64>>> {
    (1..=row.steps())
        .map(|s| explicit_matrix(row.alpha[s], row.gamma[s], categories))
        .collect()
}

/// Calls `visit` for every single-position path starting at `x0`.
fn for_each_path(x0: usize, steps: usize, states: usize, mut visit: impl FnMut(&[usize])) {
    let mut path = vec![x0; steps + 1];
    let total = states.pow(steps as u32);
    for code in 0..total {
        let mut c = code;
        for slot in path.iter_mut().skip(1) {
            *slot = c % states;
            c /= states;
        }
        visit(&path);
    }
}

/// `q(x_{t−1} | x_t, x_0)` by summing over whole forward trajectories.
pub fn posterior_by_trajectories(x_t: usize, x0: usize, row: &ScheduleRow, t: usize, categories: usize) -> Result<Vec<f64>> {
    let states = categories + 1;
    let mats = step_matrices(row, categories);
    let mut joint = vec![0.0; states];
    for_each_path(x0, row.steps(), states, |path| {
        if path[t] == x_t {
            joint[path[t - 1]] += path_probability(path, &mats);
        }
    });
    let z: f64 = joint.iter().sum();
    if z <= 0.0 {
        return Err(Error::InconsistentEvidence(format!("x_t={x_t} unreachable from x_0={x0}")));
    }
    Ok(joint.into_iter().map(|j| j / z).collect())
}

/// The model reverse kernel rebuilt from trajectory-enumerated posteriors.
fn model_kernel(x_t: usize, x0_probs: &[f64], row: &ScheduleRow, t: usize, categories: usize) -> Result<Vec<f64>> {
    let mut mix = vec![0.0; categories + 1];
    let mut mass = 0.0;
    for (x0, &w) in x0_probs.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        if let Ok(post) = posterior_by_trajectories(x_t, x0, row, t, categories) {
            mass += w;
            for (m, p) in mix.iter_mut().zip(post) {
                *m += w * p;
            }
        }
    }
    if mass <= 0.0 {
        return Err(Error::InconsistentEvidence("no consistent x_0".into()));
    }
    Ok(mix.into_iter().map(|m| m / mass).collect())
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b.max(1e-12)).ln())
        .sum()
}

/// `E_{q(x_{1:T} | x_0)}` of the bound integrand, by enumerating joint trajectories.
pub fn vlb_by_trajectories<D: Denoiser + ?Sized>(x0: &TokenSequence, denoiser: &D, table: &ScheduleTable) -> Result<f64> {
    let k = x0.vocab().categories();
    let states = k + 1;
    let steps = table.steps();
    let n = x0.len();
    let mats: Vec<_> = (0..n).map(|i| step_matrices(table.row(i), k)).collect();
    let joint_states = states.pow(n as u32);
    let decode = |code: usize| -> Vec<usize> {
        let mut c = code;
        (0..n)
            .map(|_| {
                let s = c % states;
                c /= states;
                s
            })
            .collect()
    };
    let mut total = 0.0;
    // odometer over (x_1, …, x_T), each a joint state of all positions
    let mut codes = vec![0usize; steps];
    loop {
        let xs: Vec<Vec<usize>> = std::iter::once(x0.active().to_vec())
            .chain(codes.iter().map(|&c| decode(c)))
            .collect();
        let mut prob = 1.0;
        for i in 0..n {
            let path: Vec<usize> = xs.iter().map(|x| x[i]).collect();
            prob *= path_probability(&path, &mats[i]);
        }
        if prob > 0.0 {
            let mut value = 0.0;
            for i in 0..n {
                let row = table.row(i);
                let q_t = marginal_by_products(x0.active()[i], row, steps, k);
                let mut prior = vec![row.beta_bar[steps]; states];
                prior[k] = row.gamma_bar[steps];
                let z: f64 = prior.iter().sum();
                prior.iter_mut().for_each(|p| *p /= z);
                value += kl(&q_t, &prior);
            }
            for t in 1..=steps {
                let xt = x0.with_active(xs[t].clone())?;
                let out = denoiser.predict(&xt, t)?;
                for i in 0..n {
                    let p = model_kernel(xs[t][i], out.row(i), table.row(i), t, k)?;
                    if t == 1 {
                        value -= p[x0.active()[i]].max(1e-12).ln();
                    } else {
                        let q = posterior_by_trajectories(xs[t][i], x0.active()[i], table.row(i), t, k)?;
                        value += kl(&q, &p);
                    }
                }
            }
            total += prob * value;
        }
        let mut d = 0;
        loop {
            if d == steps {
                return Ok(total);
            }
            codes[d] += 1;
            if codes[d] < joint_states {
                break;
            }
            codes[d] = 0;
            d += 1;
        }
    }
}

/// Index of the codebook row with the largest cosine similarity to `latent`.
pub fn exhaustive_nearest(entries: &[Vec<f64>], latent: &[f64]) -> usize {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let zl = norm(latent);
    let mut best = 0;
    let mut best_cos = f64::NEG_INFINITY;
    for (k, e) in entries.iter().enumerate() {
        let cos = e.iter().zip(latent).map(|(a, b)| a * b).sum::<f64>() / (norm(e) * zl);
        if cos > best_cos {
            best_cos = cos;
            best = k;
        }
    }
    best
}

/// `‖N Nᵀ − I‖_F²` with the Gram matrix formed explicitly.
pub fn orth_reg_dense(entries: &[Vec<f64>]) -> f64 {
    let rows: Vec<Vec<f64>> = entries
        .iter()
        .map(|e| {
            let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            e.iter().map(|x| x / n).collect()
        })
        .collect();
    let k = rows.len();
    let mut gram = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            gram[i][j] = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
        }
    }
    let mut total = 0.0;
    for (i, g) in gram.iter().enumerate() {
        for (j, v) in g.iter().enumerate() {
            let d = v - if i == j { 1.0 } else { 0.0 };
            total += d * d;
        }
    }
    total
}

/// Central differences `(f(θ + h e_i) − f(θ − h e_i)) / 2h`.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, params: &[f64], h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            p[i] = params[i] + h;
            let up = f(&p);
            p[i] = params[i] - h;
            let down = f(&p);
            p[i] = params[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Category counts over active positions, MASK excluded.
pub fn recount(corpus: &[TokenSequence], categories: usize) -> Vec<u64> {
    let mut counts = vec![0; categories];
    for seq in corpus {
        for &t in seq.tokens() {
            if t < categories {
                counts[t] += 1;
            }
        }
    }
    counts
}

/// Mean first `t` with `x_t ≠ x_0`, simulated directly from the per-step parameters.
/// Trajectories that never change count as `T + 1`.
pub fn mean_first_corruption<R: Rng + ?Sized>(row: &ScheduleRow, categories: usize, x0: usize, trajectories: usize, rng: &mut R) -> f64 {
    let steps = row.steps();
    let mut total = 0usize;
    for _ in 0..trajectories {
        let mut x = x0;
        let mut first = steps + 1;
        for t in 1..=steps {
            if x != categories {
                let u: f64 = rng.random();
                if u < row.gamma[t] {
                    x = categories;
                } else if u >= row.gamma[t] + row.alpha[t] {
                    x = rng.random_range(0..categories);
                }
            }
            if x != x0 {
                first = t;
                break;
            }
        }
        total += first;
    }
    total as f64 / trajectories as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explicit_matrix_columns_are_stochastic() {
        let q = explicit_matrix(0.6, 0.3, 3);
        for j in 0..4 {
            let s: f64 = q.iter().map(|r| r[j]).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn central_difference_of_quadratic() {
        let g = central_difference(|p| p[0] * p[0] + 3.0 * p[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn exhaustive_nearest_prefers_first_on_ties() {
        let e = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(exhaustive_nearest(&e, &[2.0, 0.1]), 0);
    }
}
