//! Noise schedules shared by every variable of the joint state.
//!
//! [`GaussianSchedule`] holds the per-step variances of the Gaussian chain
//! and their cumulative signal products. [`DiscreteSchedule`] holds the
//! uniform transition matrices of the categorical chain together with their
//! cached cumulative products.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Offset of the squared-cosine keep-probability curve.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip for categorical corruption rates.
pub const MAX_DISCRETE_BETA: f64 = 0.999;

/// Serializable description of a Gaussian schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianScheduleSpec {
    pub kind: GaussianKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GaussianKind {
    Linear,
}

impl Default for GaussianScheduleSpec {
    fn default() -> Self {
        Self {
            kind: GaussianKind::Linear,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl GaussianScheduleSpec {
    pub fn build(&self) -> Result<GaussianSchedule> {
        match self.kind {
            GaussianKind::Linear => linear_beta_schedule(self.steps, self.beta_start, self.beta_end),
        }
    }
}

/// Serializable description of a categorical schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscreteScheduleSpec {
    pub steps: usize,
    pub categories: usize,
    pub cosine_offset: f64,
}

impl Default for DiscreteScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 1000,
            categories: 2,
            cosine_offset: COSINE_OFFSET,
        }
    }
}

impl DiscreteScheduleSpec {
    pub fn build(&self) -> Result<DiscreteSchedule> {
        cosine_discrete_schedule_with_offset(self.steps, self.categories, self.cosine_offset)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl GaussianSchedule {
    /// Builds a schedule from explicit per-step variances `betas[0..T]`
    /// (step `t` uses `betas[t - 1]`).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(invalid("gaussian schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
            return Err(invalid(format!("beta {b} outside (0, 1]")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative products, `alpha_bars()[0] == 1`, length `T + 1`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t, 1)?;
        Ok(self.betas[t - 1])
    }

    /// `alpha_bar_t` for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t, 0)?;
        Ok(self.alpha_bars[t])
    }

    pub(crate) fn check_step(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                lo,
                hi: self.steps(),
            });
        }
        Ok(())
    }
}

/// Linearly spaced variances from `beta_start` (step 1) to `beta_end` (step T).
pub fn linear_beta_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<GaussianSchedule> {
    if steps == 0 {
        return Err(invalid("step count must be positive"));
    }
    if !(beta_start > 0.0 && beta_start <= 1.0) || !(beta_end > 0.0 && beta_end <= 1.0) {
        return Err(invalid(format!(
            "beta endpoints ({beta_start}, {beta_end}) must lie in (0, 1]"
        )));
    }
    if beta_start > beta_end {
        return Err(invalid("beta_start must not exceed beta_end"));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let span = (steps - 1) as f64;
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
            .collect()
    };
    GaussianSchedule::from_betas(betas)
}

/// Dense row-major square matrix; only what the categorical chain needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self { n, data }
    }

    /// `(1 - beta) I + (beta / K) 11^T`
    pub fn uniform_transition(n: usize, beta: f64) -> Self {
        let off = beta / n as f64;
        let mut data = vec![off; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0 - beta + off;
        }
        Self { n, data }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.n..(row + 1) * self.n]
    }

    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                for j in 0..n {
                    data[i * n + j] += a * rhs.data[k * n + j];
                }
            }
        }
        Matrix { n, data }
    }

    /// Row vector times matrix.
    pub fn left_apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n];
        for (i, vi) in v.iter().enumerate() {
            for j in 0..n {
                out[j] += vi * self.data[i * n + j];
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSchedule {
    categories: usize,
    betas: Vec<f64>,
    transitions: Vec<Matrix>,
    cumulative: Vec<Matrix>,
}

impl DiscreteSchedule {
    /// Builds the chain from explicit corruption rates (`betas[t - 1]` at step t).
    pub fn from_betas(categories: usize, betas: Vec<f64>) -> Result<Self> {
        if categories < 2 {
            return Err(invalid("categorical schedule needs K >= 2"));
        }
        if betas.is_empty() {
            return Err(invalid("categorical schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b >= 0.0 && **b <= 1.0)) {
            return Err(invalid(format!("categorical beta {b} outside [0, 1]")));
        }
        let transitions: Vec<Matrix> = betas
            .iter()
            .map(|&b| Matrix::uniform_transition(categories, b))
            .collect();
        let mut cumulative = Vec::with_capacity(betas.len() + 1);
        cumulative.push(Matrix::identity(categories));
        for q in &transitions {
            let next = cumulative.last().unwrap().matmul(q);
            cumulative.push(next);
        }
        Ok(Self {
            categories,
            betas,
            transitions,
            cumulative,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Single-step matrix `Q_t`, `1 <= t <= T`.
    pub fn transition(&self, t: usize) -> Result<&Matrix> {
        self.check_step(t, 1)?;
        Ok(&self.transitions[t - 1])
    }

    /// Cumulative kernel `Q_1 ... Q_t`; identity at `t = 0`.
    pub fn cumulative_transition(&self, t: usize) -> Result<&Matrix> {
        self.check_step(t, 0)?;
        Ok(&self.cumulative[t])
    }

    /// Kernel of the jump `from -> to`, i.e. `Q_{from+1} ... Q_to`.
    pub fn transition_between(&self, from: usize, to: usize) -> Result<Matrix> {
        self.check_step(to, 0)?;
        if from > to {
            return Err(invalid(format!("jump {from} -> {to} runs backwards")));
        }
        let mut acc = Matrix::identity(self.categories);
        for q in &self.transitions[from..to] {
            acc = acc.matmul(q);
        }
        Ok(acc)
    }

    pub(crate) fn check_step(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                lo,
                hi: self.steps(),
            });
        }
        Ok(())
    }
}

/// Cumulative keep probability of the squared-cosine curve, normalised to 1 at t = 0.
pub fn cosine_keep_probability(t: usize, steps: usize, offset: f64) -> f64 {
    let f = |t: f64| {
        let x = (t / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    f(t as f64) / f(0.0)
}

pub fn cosine_discrete_schedule(steps: usize, categories: usize) -> Result<DiscreteSchedule> {
    cosine_discrete_schedule_with_offset(steps, categories, COSINE_OFFSET)
}

pub fn cosine_discrete_schedule_with_offset(
    steps: usize,
    categories: usize,
    offset: f64,
) -> Result<DiscreteSchedule> {
    if steps == 0 {
        return Err(invalid("step count must be positive"));
    }
    if categories < 2 {
        return Err(invalid("categorical schedule needs K >= 2"));
    }
    if !(offset > 0.0) {
        return Err(invalid("cosine offset must be positive"));
    }
    let betas = (1..=steps)
        .map(|t| {
            let prev = cosine_keep_probability(t - 1, steps, offset);
            let cur = cosine_keep_probability(t, steps, offset);
            (1.0 - cur / prev).clamp(0.0, MAX_DISCRETE_BETA)
        })
        .collect();
    DiscreteSchedule::from_betas(categories, betas)
}
