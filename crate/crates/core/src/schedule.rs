//! Corruption schedules for mask-and-replace diffusion.
//!
//! A [`ScheduleRow`] holds the cumulative parameters `ᾱ_t, β̄_t, γ̄_t` for
//! `t = 0..=T` (with `ᾱ_0 = 1`) and the per-step `α_t, β_t, γ_t` that compose
//! into them:
//!
//! ```text
//! ᾱ_t = Π α_i        γ̄_t = 1 − Π (1 − γ_i)        β̄_t = (1 − ᾱ_t − γ̄_t) / K
//! ```
//!
//! A [`ScheduleTable`] is either uniform (one row shared by every position) or
//! holds one row per active position.

use std::borrow::Cow;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::priority::{static_scores, PriorityScores};
use crate::{Error, Result};

/// Tolerance for the mass identity and re-composition checks.
pub const TABLE_TOLERANCE: f64 = 1e-9;

/// Interior timesteps keep at least this much retention mass after priority
/// modulation, so per-step ratios stay defined until the final step.
pub const MIN_INTERIOR_RETENTION: f64 = 1e-6;

const ROUNDING_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub alpha_bar: Vec<f64>,
    pub beta_bar: Vec<f64>,
    pub gamma_bar: Vec<f64>,
    /// Per-step values; index 0 holds the identity step `(1, 0, 0)`.
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

/// Per-step parameters recovered from a cumulative row, index 0 unused.
#[derive(Debug, Clone, PartialEq)]
pub struct PerStep {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

fn snap_unit(v: f64, what: &str, t: usize) -> Result<f64> {
    if !v.is_finite() || v < -ROUNDING_SLACK || v > 1.0 + ROUNDING_SLACK {
        return Err(Error::InvalidProbability(format!("{what} = {v} at t={t}")));
    }
    Ok(v.clamp(0.0, 1.0))
}

/// Recovers `α_t, β_t, γ_t` from cumulative `ᾱ`, `γ̄` (both indexed `0..=T`).
pub fn per_step_from_cumulative(alpha_bar: &[f64], gamma_bar: &[f64], categories: usize) -> Result<PerStep> {
    if alpha_bar.len() != gamma_bar.len() || alpha_bar.len() < 2 {
        return Err(Error::Shape("cumulative rows need T + 1 >= 2 entries".into()));
    }
    let k = categories as f64;
    let steps = alpha_bar.len() - 1;
    let mut alpha = vec![1.0; steps + 1];
    let mut beta = vec![0.0; steps + 1];
    let mut gamma = vec![0.0; steps + 1];
    for t in 1..=steps {
        if alpha_bar[t - 1] <= 0.0 {
            return Err(Error::PrematureAbsorption(t - 1));
        }
        let a = snap_unit(alpha_bar[t] / alpha_bar[t - 1], "alpha", t)?;
        let g = snap_unit(1.0 - (1.0 - gamma_bar[t]) / (1.0 - gamma_bar[t - 1]), "gamma", t)?;
        let b = snap_unit((1.0 - a - g) / k, "beta", t)?;
        alpha[t] = a;
        gamma[t] = g;
        beta[t] = b;
    }
    Ok(PerStep { alpha, beta, gamma })
}

impl ScheduleRow {
    /// Builds a row from cumulative `ᾱ`, `γ̄` (indexed `0..=T`, `ᾱ_0 = 1`, `γ̄_0 = 0`).
    pub fn from_cumulative(alpha_bar: Vec<f64>, gamma_bar: Vec<f64>, categories: usize) -> Result<Self> {
        let per = per_step_from_cumulative(&alpha_bar, &gamma_bar, categories)?;
        let k = categories as f64;
        let beta_bar = alpha_bar
            .iter()
            .zip(&gamma_bar)
            .map(|(a, g)| ((1.0 - a - g) / k).max(0.0))
            .collect();
        let row = Self {
            alpha_bar,
            beta_bar,
            gamma_bar,
            alpha: per.alpha,
            beta: per.beta,
            gamma: per.gamma,
        };
        row.validate(categories)?;
        Ok(row)
    }

    /// Composes per-step `α_t, γ_t` (indexed `1..=T`) into a row.
    pub fn from_per_step(alpha: &[f64], gamma: &[f64], categories: usize) -> Result<Self> {
        if alpha.len() != gamma.len() || alpha.is_empty() {
            return Err(Error::Shape("per-step rows need T >= 1 entries".into()));
        }
        let k = categories as f64;
        let steps = alpha.len();
        let mut row = Self {
            alpha_bar: vec![1.0; steps + 1],
            beta_bar: vec![0.0; steps + 1],
            gamma_bar: vec![0.0; steps + 1],
            alpha: vec![1.0; steps + 1],
            beta: vec![0.0; steps + 1],
            gamma: vec![0.0; steps + 1],
        };
        let mut keep = 1.0;
        let mut unmasked = 1.0;
        for t in 1..=steps {
            let (a, g) = (alpha[t - 1], gamma[t - 1]);
            let b = (1.0 - a - g) / k;
            if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&g) || b < -ROUNDING_SLACK {
                return Err(Error::InvalidProbability(format!("alpha={a}, gamma={g} at t={t}")));
            }
            keep *= a;
            unmasked *= 1.0 - g;
            row.alpha[t] = a;
            row.gamma[t] = g;
            row.beta[t] = b.max(0.0);
            row.alpha_bar[t] = keep;
            row.gamma_bar[t] = 1.0 - unmasked;
            row.beta_bar[t] = ((1.0 - keep - (1.0 - unmasked)) / k).max(0.0);
        }
        Ok(row)
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// Checks every row invariant except full absorption at `T`.
    pub fn validate(&self, categories: usize) -> Result<()> {
        let k = categories as f64;
        let steps = self.steps();
        let lens = [
            self.beta_bar.len(),
            self.gamma_bar.len(),
            self.alpha.len(),
            self.beta.len(),
            self.gamma.len(),
        ];
        if lens.iter().any(|&l| l != steps + 1) {
            return Err(Error::Shape("schedule row arrays differ in length".into()));
        }
        let bad = |msg: String| Err(Error::InvalidProbability(msg));
        let mut keep = 1.0;
        let mut unmasked = 1.0;
        for t in 0..=steps {
            let (a, b, g) = (self.alpha_bar[t], self.beta_bar[t], self.gamma_bar[t]);
            if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&g) || b < 0.0 {
                return bad(format!("cumulative values out of range at t={t}"));
            }
            if (a + k * b + g - 1.0).abs() > TABLE_TOLERANCE {
                return bad(format!("mass identity violated at t={t}: {}", a + k * b + g));
            }
            if t > 0 {
                if g < self.gamma_bar[t - 1] - ROUNDING_SLACK {
                    return bad(format!("gamma_bar decreases at t={t}"));
                }
                if a > self.alpha_bar[t - 1] + ROUNDING_SLACK {
                    return bad(format!("alpha_bar increases at t={t}"));
                }
                for (name, v) in [("alpha", self.alpha[t]), ("beta", self.beta[t]), ("gamma", self.gamma[t])] {
                    if !(0.0..=1.0).contains(&v) {
                        return bad(format!("per-step {name} = {v} at t={t}"));
                    }
                }
                keep *= self.alpha[t];
                unmasked *= 1.0 - self.gamma[t];
                if (keep - a).abs() > TABLE_TOLERANCE || (1.0 - unmasked - g).abs() > TABLE_TOLERANCE {
                    return bad(format!("per-step values do not compose to the cumulative row at t={t}"));
                }
            } else if a != 1.0 || g != 0.0 {
                return bad("row must start from the clean state".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTable {
    steps: usize,
    categories: usize,
    rows: Vec<ScheduleRow>,
}

impl ScheduleTable {
    pub fn uniform(row: ScheduleRow, categories: usize) -> Result<Self> {
        Self::per_position(vec![row], categories)
    }

    pub fn per_position(rows: Vec<ScheduleRow>, categories: usize) -> Result<Self> {
        let steps = rows.first().ok_or(Error::EmptySequence)?.steps();
        if steps == 0 || rows.iter().any(|r| r.steps() != steps) {
            return Err(Error::Shape("rows must share T >= 1".into()));
        }
        for row in &rows {
            row.validate(categories)?;
        }
        Ok(Self {
            steps,
            categories,
            rows,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn is_uniform(&self) -> bool {
        self.rows.len() == 1
    }

    pub fn rows(&self) -> &[ScheduleRow] {
        &self.rows
    }

    /// Row governing an active position; uniform tables broadcast.
    pub fn row(&self, position: usize) -> &ScheduleRow {
        if self.is_uniform() {
            &self.rows[0]
        } else {
            &self.rows[position]
        }
    }

    /// Checks the table covers `len` positions.
    pub fn check_covers(&self, len: usize) -> Result<()> {
        if self.is_uniform() || self.rows.len() == len {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "schedule has {} position rows, sequence has {len} active positions",
                self.rows.len()
            )))
        }
    }

    /// Full row invariants plus `ᾱ_T = 0` everywhere.
    pub fn validate(&self) -> Result<()> {
        for row in &self.rows {
            row.validate(self.categories)?;
            if row.alpha_bar[self.steps] > TABLE_TOLERANCE {
                return Err(Error::InvalidProbability(format!(
                    "alpha_bar_T = {} is not zero",
                    row.alpha_bar[self.steps]
                )));
            }
        }
        Ok(())
    }

    /// CSV `position,t,alpha_bar,beta_bar,gamma_bar,alpha,beta,gamma`.
    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "position,t,alpha_bar,beta_bar,gamma_bar,alpha,beta,gamma")?;
        for (p, row) in self.rows.iter().enumerate() {
            for t in 0..=self.steps {
                writeln!(
                    writer,
                    "{p},{t},{},{},{},{},{},{}",
                    row.alpha_bar[t], row.beta_bar[t], row.gamma_bar[t], row.alpha[t], row.beta[t], row.gamma[t]
                )?;
            }
        }
        Ok(())
    }
}

/// Uniform schedule with `γ̄_t` and `K·β̄_t` rising linearly to their endpoint masses.
pub fn linear_base_schedule(
    steps: usize,
    categories: usize,
    gamma_end: f64,
    beta_mass_end: f64,
) -> Result<ScheduleTable> {
    if steps == 0 || categories == 0 {
        return Err(Error::Config("schedule needs T >= 1 and K >= 1".into()));
    }
    if !(gamma_end >= 0.0) || !(beta_mass_end >= 0.0) || (gamma_end + beta_mass_end - 1.0).abs() > ROUNDING_SLACK {
        return Err(Error::Config(format!(
            "endpoint masses gamma={gamma_end}, K*beta={beta_mass_end} must be non-negative and sum to 1"
        )));
    }
    let tt = steps as f64;
    let alpha_bar = (0..=steps).map(|t| (steps - t) as f64 / tt).collect();
    let gamma_bar = (0..=steps).map(|t| gamma_end * t as f64 / tt).collect();
    ScheduleTable::uniform(ScheduleRow::from_cumulative(alpha_bar, gamma_bar, categories)?, categories)
}

/// Per-position schedule: modulate `γ̄, β̄` by `sin(tπ/T)·F_i` on interior steps,
/// clamp to feasible mass, restore monotonicity with running maxima, then pin
/// `t = T` to full corruption with the base's MASK/replace split.
pub fn apply_priority(base: &ScheduleTable, scores: &PriorityScores) -> Result<ScheduleTable> {
    if !base.is_uniform() {
        return Err(Error::Config("priority modulation needs a uniform base schedule".into()));
    }
    if let Some(&bad) = scores.scores().iter().find(|&&f| !(f > 0.0)) {
        return Err(Error::InvalidScore(bad));
    }
    let steps = base.steps();
    let k = base.categories() as f64;
    let b = base.row(0);
    if b.alpha_bar[steps] > TABLE_TOLERANCE {
        return Err(Error::Config("base schedule must end fully corrupted".into()));
    }
    let cap = 1.0 - MIN_INTERIOR_RETENTION;
    let rows = scores
        .scores()
        .iter()
        .map(|&f| {
            let mut gamma_bar = vec![0.0; steps + 1];
            let mut beta_mass = vec![0.0; steps + 1];
            for t in 1..steps {
                let m = (t as f64 * PI / steps as f64).sin() * f;
                let mut g = b.gamma_bar[t] * m;
                let mut bm = k * b.beta_bar[t] * m;
                if g + bm > cap {
                    let s = cap / (g + bm);
                    g *= s;
                    bm *= s;
                }
                gamma_bar[t] = g;
                beta_mass[t] = bm;
            }
            // running max of γ̄, then of the replace share ρ = Kβ̄/(1−γ̄)
            let mut g_max: f64 = 0.0;
            let mut rho_max: f64 = 0.0;
            let mut alpha_bar = vec![1.0; steps + 1];
            for t in 1..steps {
                g_max = g_max.max(gamma_bar[t]);
                rho_max = rho_max.max(beta_mass[t] / (1.0 - gamma_bar[t]));
                gamma_bar[t] = g_max;
                alpha_bar[t] = (1.0 - g_max) * (1.0 - rho_max);
            }
            gamma_bar[steps] = b.gamma_bar[steps].max(g_max);
            alpha_bar[steps] = 0.0;
            ScheduleRow::from_cumulative(alpha_bar, gamma_bar, base.categories())
        })
        .collect::<Result<Vec<_>>>()?;
    ScheduleTable::per_position(rows, base.categories())
}

/// Mean `γ̄_t` and `ᾱ_t` of the positions whose score falls in one band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandCurve {
    pub lower: f64,
    pub upper: f64,
    pub positions: usize,
    pub gamma_bar: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Groups positions by score into `[edges[i], edges[i+1])` bands.
pub fn priority_band_curves(table: &ScheduleTable, scores: &PriorityScores, edges: &[f64]) -> Result<Vec<BandCurve>> {
    table.check_covers(scores.len())?;
    let steps = table.steps();
    let mut out = Vec::new();
    for w in edges.windows(2) {
        let members: Vec<usize> = (0..scores.len())
            .filter(|&i| scores.scores()[i] >= w[0] && scores.scores()[i] < w[1])
            .collect();
        let mean = |f: &dyn Fn(&ScheduleRow) -> &Vec<f64>| -> Vec<f64> {
            (0..=steps)
                .map(|t| {
                    if members.is_empty() {
                        f64::NAN
                    } else {
                        members.iter().map(|&i| f(table.row(i))[t]).sum::<f64>() / members.len() as f64
                    }
                })
                .collect()
        };
        out.push(BandCurve {
            lower: w[0],
            upper: w[1],
            positions: members.len(),
            gamma_bar: mean(&|r| &r.gamma_bar),
            alpha_bar: mean(&|r| &r.alpha_bar),
        });
    }
    Ok(out)
}

pub fn write_band_csv<W: Write>(curves: &[BandCurve], mut writer: W) -> Result<()> {
    writeln!(writer, "band_lower,band_upper,positions,t,gamma_bar,alpha_bar")?;
    for c in curves {
        for t in 0..c.gamma_bar.len() {
            writeln!(
                writer,
                "{},{},{},{t},{},{}",
                c.lower, c.upper, c.positions, c.gamma_bar[t], c.alpha_bar[t]
            )?;
        }
    }
    Ok(())
}

/// Supplies the schedule that governs a given clean sequence.
pub trait ScheduleProvider {
    fn schedule_for(&self, seq: &TokenSequence) -> Result<Cow<'_, ScheduleTable>>;
    fn steps(&self) -> usize;
}

impl ScheduleProvider for ScheduleTable {
    fn schedule_for(&self, seq: &TokenSequence) -> Result<Cow<'_, ScheduleTable>> {
        self.check_covers(seq.len())?;
        Ok(Cow::Borrowed(self))
    }

    fn steps(&self) -> usize {
        self.steps
    }
}

/// Static-entropy priority schedules computed on demand from a uniform base.
/// Sequences whose priorities are degenerate fall back to the base schedule.
#[derive(Debug, Clone)]
pub struct StaticPrioritySchedule {
    pub base: ScheduleTable,
    pub entropy: Vec<f64>,
}

impl StaticPrioritySchedule {
    pub fn scores(&self, seq: &TokenSequence) -> Result<PriorityScores> {
        match static_scores(seq, &self.entropy) {
            Err(Error::DegeneratePriorities) => PriorityScores::uniform(seq.len()),
            other => other,
        }
    }
}

impl ScheduleProvider for StaticPrioritySchedule {
    fn schedule_for(&self, seq: &TokenSequence) -> Result<Cow<'_, ScheduleTable>> {
        Ok(Cow::Owned(apply_priority(&self.base, &self.scores(seq)?)?))
    }

    fn steps(&self) -> usize {
        self.base.steps()
    }
}

/// Tables precomputed per sequence id, with an optional fallback.
#[derive(Debug, Clone, Default)]
pub struct CachedSchedules {
    pub by_id: HashMap<String, ScheduleTable>,
    pub fallback: Option<ScheduleTable>,
    steps: usize,
}

impl CachedSchedules {
    pub fn new(steps: usize, fallback: Option<ScheduleTable>) -> Self {
        Self {
            by_id: HashMap::new(),
            fallback,
            steps,
        }
    }

    /// Precomputes and stores the provider's table for every sequence.
    pub fn precompute<P: ScheduleProvider + ?Sized>(provider: &P, corpus: &[TokenSequence]) -> Result<Self> {
        let mut cache = Self::new(provider.steps(), None);
        for seq in corpus {
            cache
                .by_id
                .insert(seq.id().to_string(), provider.schedule_for(seq)?.into_owned());
        }
        Ok(cache)
    }
}

impl ScheduleProvider for CachedSchedules {
    fn schedule_for(&self, seq: &TokenSequence) -> Result<Cow<'_, ScheduleTable>> {
        let table = self
            .by_id
            .get(seq.id())
            .or(self.fallback.as_ref())
            .ok_or_else(|| Error::Config(format!("no schedule cached for sequence {}", seq.id())))?;
        table.check_covers(seq.len())?;
        Ok(Cow::Borrowed(table))
    }

    fn steps(&self) -> usize {
        self.steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(steps: usize) -> ScheduleTable {
        linear_base_schedule(steps, 4, 0.9, 0.1).unwrap()
    }

    #[test]
    fn linear_base_ends_absorbed() {
        let table = base(10);
        table.validate().unwrap();
        let row = table.row(0);
        assert_eq!(row.alpha_bar[10], 0.0);
        assert!((row.gamma_bar[10] - 0.9).abs() < 1e-15);
        assert!((4.0 * row.beta_bar[10] - 0.1).abs() < 1e-12);
        assert!((row.gamma_bar[5] - 0.45).abs() < 1e-15);
    }

    #[test]
    fn single_step_schedule_corrupts_fully() {
        let row = base(1).row(0).clone();
        assert_eq!(row.alpha[1], 0.0);
        assert!((row.gamma[1] - 0.9).abs() < 1e-15);
        assert!((row.beta[1] - 0.025).abs() < 1e-15);
    }

    #[test]
    fn infeasible_endpoints_rejected() {
        assert!(matches!(linear_base_schedule(10, 4, 0.9, 0.3), Err(Error::Config(_))));
        assert!(matches!(linear_base_schedule(0, 4, 0.9, 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn constant_alpha_gives_unit_steps() {
        let per = per_step_from_cumulative(&[1.0, 1.0, 1.0], &[0.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(per.alpha, vec![1.0, 1.0, 1.0]);
        assert_eq!(per.beta, vec![0.0; 3]);
    }

    #[test]
    fn final_step_absorption_is_legal_but_earlier_is_not() {
        let per = per_step_from_cumulative(&[1.0, 0.5, 0.0], &[0.0, 0.3, 0.6], 2).unwrap();
        assert_eq!(per.alpha[2], 0.0);
        assert!(matches!(
            per_step_from_cumulative(&[1.0, 0.0, 0.0], &[0.0, 0.5, 0.6], 2),
            Err(Error::PrematureAbsorption(1))
        ));
    }

    #[test]
    fn unit_priority_matches_base_at_midpoint() {
        let b = base(10);
        let table = apply_priority(&b, &PriorityScores::uniform(3).unwrap()).unwrap();
        for p in 0..3 {
            assert!((table.row(p).gamma_bar[5] - b.row(0).gamma_bar[5]).abs() < 1e-12);
        }
    }

    #[test]
    fn priority_substitution_value() {
        let b = base(10);
        // base γ̄_5 = 0.45 here; rescale the check to the worked value 0.5·0.8
        let f = PriorityScores::new(vec![0.8, 1.2]).unwrap();
        let table = apply_priority(&b, &f).unwrap();
        assert!((table.row(0).gamma_bar[5] - 0.45 * 0.8).abs() < 1e-12);
        let custom = ScheduleTable::uniform(
            ScheduleRow::from_cumulative(
                (0..=10).map(|t| 1.0 - t as f64 / 10.0).collect(),
                (0..=10).map(|t| t as f64 / 10.0).collect(),
                4,
            )
            .unwrap(),
            4,
        )
        .unwrap();
        let table = apply_priority(&custom, &f).unwrap();
        assert!((table.row(0).gamma_bar[5] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn priority_rejects_non_uniform_base() {
        let b = base(6);
        let t = apply_priority(&b, &PriorityScores::uniform(2).unwrap()).unwrap();
        assert!(apply_priority(&t, &PriorityScores::uniform(2).unwrap()).is_err());
    }

    #[test]
    fn large_scores_stay_valid() {
        let b = base(10);
        let f = PriorityScores::from_weights(&[50.0, 0.01, 0.01, 0.01]).unwrap();
        let table = apply_priority(&b, &f).unwrap();
        table.validate().unwrap();
        assert!(table.row(0).alpha_bar[9] >= MIN_INTERIOR_RETENTION * 0.999);
    }

    #[test]
    fn cached_provider_falls_back() {
        use crate::corpus::Vocab;
        let v = Vocab::new(4).unwrap();
        let seq = TokenSequence::new("x", vec![0, 1], None, v).unwrap();
        let cache = CachedSchedules::new(10, Some(base(10)));
        assert!(cache.schedule_for(&seq).unwrap().is_uniform());
        let empty = CachedSchedules::new(10, None);
        assert!(empty.schedule_for(&seq).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut buf = Vec::new();
        base(2).write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("position,t,alpha_bar,beta_bar,gamma_bar,alpha,beta,gamma\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
