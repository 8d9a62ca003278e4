//! Discrete noise schedules and reduced timestep grids.
//!
//! `alpha_bars` carries a sentinel entry at index 0 (`alpha_bar(0) == 1`), so
//! timestep 0 means clean data everywhere in the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Immutable beta / alpha / cumulative alpha tables for `T` diffusion steps.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    log_alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::domain("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::domain(format!(
                "beta bounds must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| beta_start + span * (i as f64 / (steps - 1) as f64))
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Builds a schedule from explicit betas, each in (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::domain("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::domain(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * a);
        }
        if *alpha_bars.last().unwrap() <= 0.0 {
            return Err(Error::domain("cumulative alpha underflows to zero"));
        }
        let log_alpha_bars = alpha_bars.iter().map(|a| a.ln()).collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            log_alpha_bars,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// Length `T + 1`, starting with the sentinel 1.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_timestep(t)?;
        Ok(self.alpha_bars[t])
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::domain(format!(
                "timestep {t} outside [0, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Cumulative alpha at a continuous timestep, interpolating `ln alpha_bar`
    /// linearly between integer steps. Agrees with [`alpha_bar`](Self::alpha_bar)
    /// at integers.
    pub fn alpha_bar_at(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.steps() as f64);
        let lo = t.floor() as usize;
        let frac = t - lo as f64;
        if frac == 0.0 {
            return self.alpha_bars[lo];
        }
        let la = self.log_alpha_bars[lo];
        let lb = self.log_alpha_bars[lo + 1];
        (la + (lb - la) * frac).exp()
    }

    /// Half log signal-to-noise ratio, `0.5 * ln(alpha_bar / (1 - alpha_bar))`.
    /// Infinite at `t = 0`.
    pub fn log_snr(&self, t: f64) -> f64 {
        log_snr_of(self.alpha_bar_at(t))
    }

    /// Inverse of [`log_snr`](Self::log_snr) on `[0, T]`.
    pub fn timestep_for_log_snr(&self, lambda: f64) -> f64 {
        let target_ab = 1.0 / (1.0 + (-2.0 * lambda).exp());
        let target = target_ab.ln();
        let logs = &self.log_alpha_bars;
        if target >= logs[0] {
            return 0.0;
        }
        if target <= logs[self.steps()] {
            return self.steps() as f64;
        }
        // log alpha_bar is strictly decreasing: find the bracketing segment
        let hi = logs.partition_point(|&l| l > target);
        let lo = hi - 1;
        let frac = (target - logs[lo]) / (logs[hi] - logs[lo]);
        lo as f64 + frac
    }
}

pub(crate) fn log_snr_of(alpha_bar: f64) -> f64 {
    0.5 * (alpha_bar.ln() - (-alpha_bar).ln_1p())
}

/// Spacing rule for reduced timestep grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridStrategy {
    #[default]
    Uniform,
}

/// Strictly decreasing timesteps visited by a reverse process, followed by an
/// implicit terminal hop to `t = 0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepGrid {
    steps: Vec<usize>,
}

impl TimestepGrid {
    /// `steps` must be non-empty, strictly decreasing and positive.
    pub fn from_steps(steps: Vec<usize>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::domain("timestep grid is empty"));
        }
        if steps.contains(&0) {
            return Err(Error::domain("grid timesteps must be >= 1"));
        }
        if steps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::domain("grid timesteps must strictly decrease"));
        }
        Ok(Self { steps })
    }

    pub fn origin(&self) -> usize {
        self.steps[0]
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Consecutive `(t, t_prev)` hops including the terminal hop to 0.
    pub fn hops(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.steps.get(i + 1).copied().unwrap_or(0)))
    }
}

/// Builds a grid of `budget` timesteps from `origin` down to 1.
pub fn make_timestep_grid(
    origin: usize,
    budget: usize,
    total_steps: usize,
    strategy: GridStrategy,
) -> Result<TimestepGrid> {
    if budget == 0 {
        return Err(Error::domain("step budget must be at least 1"));
    }
    if origin > total_steps {
        return Err(Error::domain(format!(
            "grid origin {origin} exceeds schedule length {total_steps}"
        )));
    }
    if budget > origin {
        return Err(Error::domain(format!(
            "step budget {budget} exceeds origin {origin}"
        )));
    }
    let steps = match strategy {
        GridStrategy::Uniform => uniform_steps(origin, budget),
    };
    TimestepGrid::from_steps(steps)
}

fn uniform_steps(origin: usize, budget: usize) -> Vec<usize> {
    if budget == 1 {
        return vec![origin];
    }
    let spacing = (origin - 1) as f64 / (budget - 1) as f64;
    let mut steps: Vec<usize> = (0..budget)
        .map(|i| (origin as f64 - i as f64 * spacing).round() as usize)
        .collect();
    // rounding collisions: shift duplicates downward
    for i in 1..steps.len() {
        if steps[i] >= steps[i - 1] {
            steps[i] = steps[i - 1] - 1;
        }
    }
    steps
}
