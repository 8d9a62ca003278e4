//! Reverse-process solvers sharing one step interface.
//!
//! All solvers convert between the noise prediction `eps_hat` and the data
//! prediction `x0_hat` through [`predict_x0`]. Exponential-integrator solvers
//! work in the half log-SNR `lambda_t = 0.5 * ln(ab_t / (1 - ab_t))`, computed
//! from `alpha_bar` lookups. Every trajectory ends with a terminal hop to
//! `t = 0` that returns `x0_hat` without noise.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{EpsilonPredictor, NoiseLevel};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::schedule::{log_snr_of, NoiseSchedule, TimestepGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Ancestral sampling with the posterior variance.
    Ddpm,
    Ddim,
    /// DPM-Solver, first order.
    Dpm1,
    /// DPM-Solver, single-step second order (midpoint in log-SNR).
    Dpm2,
    /// DPM-Solver++(2M): multistep second order on the data prediction.
    #[serde(rename = "dpmpp")]
    DpmPp2M,
    /// UniPC at order 2, `B(h) = h`.
    #[serde(rename = "unipc")]
    UniPc2,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 6] = [
        SamplerKind::Ddpm,
        SamplerKind::Ddim,
        SamplerKind::Dpm1,
        SamplerKind::Dpm2,
        SamplerKind::DpmPp2M,
        SamplerKind::UniPc2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
            SamplerKind::Dpm1 => "dpm1",
            SamplerKind::Dpm2 => "dpm2",
            SamplerKind::DpmPp2M => "dpmpp",
            SamplerKind::UniPc2 => "unipc",
        }
    }

    /// Whether the sampler draws fresh noise at intermediate steps.
    pub fn is_stochastic(self, eta: f64) -> bool {
        match self {
            SamplerKind::Ddpm => true,
            SamplerKind::Ddim => eta > 0.0,
            _ => false,
        }
    }

    /// Predictor evaluations for a grid of `grid_len` timesteps. The terminal
    /// hop costs one evaluation for every kind; second-order single-step
    /// solvers and the predictor-corrector evaluate twice on every other hop.
    pub fn evaluations(self, grid_len: usize) -> usize {
        match self {
            SamplerKind::Dpm2 | SamplerKind::UniPc2 => 2 * grid_len - 1,
            _ => grid_len,
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SamplerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sampler '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    /// DDIM stochasticity; 0 is deterministic. Ignored by other kinds.
    pub eta: f64,
    pub grid: TimestepGrid,
}

impl SamplerSpec {
    pub fn new(kind: SamplerKind, grid: TimestepGrid) -> Self {
        Self {
            kind,
            eta: 0.0,
            grid,
        }
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }
}

/// Optional per-step snapshots and step wall times.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryRecord {
    /// `(t_prev, x_{t_prev})` after each hop, when recording was requested.
    pub snapshots: Vec<(usize, ImageBuffer)>,
    pub step_times: Vec<f64>,
}

/// Previous `(lambda, x0_hat)` carried by the multistep solvers.
#[derive(Debug, Clone, Default)]
pub struct MultistepState {
    prev: Option<(f64, ImageBuffer)>,
}

impl MultistepState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.prev.is_none()
    }
}

/// `(x_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)`.
pub fn predict_x0(
    x_t: &ImageBuffer,
    t: usize,
    eps_hat: &ImageBuffer,
    sched: &NoiseSchedule,
) -> Result<ImageBuffer> {
    if t == 0 {
        return Err(Error::domain("predict_x0 needs t >= 1"));
    }
    x0_from_eps(x_t, sched.alpha_bar(t)?, eps_hat)
}

fn x0_from_eps(x_t: &ImageBuffer, ab: f64, eps_hat: &ImageBuffer) -> Result<ImageBuffer> {
    let inv = 1.0 / ab.sqrt();
    let s = (1.0 - ab).sqrt();
    x_t.zip_map(eps_hat, |x, e| (x - s * e) * inv)
}

fn eps_at(
    pred: &dyn EpsilonPredictor,
    x: &ImageBuffer,
    level: NoiseLevel,
    cond: Option<&ImageBuffer>,
) -> Result<ImageBuffer> {
    if pred.requires_condition() && cond.is_none() {
        return Err(Error::MissingCondition);
    }
    let eps = pred.predict(x, level, cond)?;
    x.ensure_same_shape(&eps)?;
    Ok(eps)
}

fn check_hop(t: usize, t_prev: usize, sched: &NoiseSchedule) -> Result<()> {
    sched.check_timestep(t)?;
    if t_prev >= t {
        return Err(Error::domain(format!(
            "reverse step needs t_prev < t, got t = {t}, t_prev = {t_prev}"
        )));
    }
    Ok(())
}

/// Ancestral step from `t` to `t_prev` using the posterior
/// `q(x_{t_prev} | x_t, x0_hat)`. No noise is added when `t_prev = 0`.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_step<R: Rng + ?Sized>(
    x_t: &ImageBuffer,
    t: usize,
    t_prev: usize,
    pred: &dyn EpsilonPredictor,
    cond: Option<&ImageBuffer>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<ImageBuffer> {
    check_hop(t, t_prev, sched)?;
    let eps = eps_at(pred, x_t, NoiseLevel::at_step(sched, t)?, cond)?;
    let x0 = predict_x0(x_t, t, &eps, sched)?;
    if t_prev == 0 {
        return Ok(x0);
    }
    let ab_t = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    let ratio = ab_t / ab_prev;
    let beta_tilde = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ratio);
    let c0 = ab_prev.sqrt() * (1.0 - ratio) / (1.0 - ab_t);
    let ct = ratio.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let mean = x0.lincomb(c0, x_t, ct)?;
    let z = ImageBuffer::gaussian(x_t.width(), x_t.height(), rng);
    mean.lincomb(1.0, &z, beta_tilde.sqrt())
}

/// DDIM step. `eta = 0` gives the deterministic trajectory; `eta = 1`
/// matches the ancestral sampler's marginals.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<R: Rng + ?Sized>(
    x_t: &ImageBuffer,
    t: usize,
    t_prev: usize,
    pred: &dyn EpsilonPredictor,
    cond: Option<&ImageBuffer>,
    sched: &NoiseSchedule,
    eta: f64,
    rng: &mut R,
) -> Result<ImageBuffer> {
    check_hop(t, t_prev, sched)?;
    if eta < 0.0 {
        return Err(Error::domain(format!("eta must be >= 0, got {eta}")));
    }
    let ab_t = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt();
    let dir2 = 1.0 - ab_prev - sigma * sigma;
    // tolerate rounding at eta = 1, where dir2 is exactly zero in theory only at t_prev = 0
    if dir2 < -1e-12 {
        return Err(Error::domain(format!(
            "sigma^2 = {} exceeds 1 - alpha_bar(t_prev) = {}",
            sigma * sigma,
            1.0 - ab_prev
        )));
    }
    let eps = eps_at(pred, x_t, NoiseLevel::at_step(sched, t)?, cond)?;
    let x0 = x0_from_eps(x_t, ab_t, &eps)?;
    let out = x0.lincomb(ab_prev.sqrt(), &eps, dir2.max(0.0).sqrt())?;
    if sigma > 0.0 {
        let z = ImageBuffer::gaussian(x_t.width(), x_t.height(), rng);
        out.lincomb(1.0, &z, sigma)
    } else {
        Ok(out)
    }
}

fn solver_coefficients(sched: &NoiseSchedule, t: f64) -> (f64, f64, f64) {
    let ab = sched.alpha_bar_at(t);
    (ab.sqrt(), (1.0 - ab).sqrt(), log_snr_of(ab))
}

fn check_ode_hop(t: usize, t_prev: usize, sched: &NoiseSchedule) -> Result<()> {
    check_hop(t, t_prev, sched)?;
    if t_prev == 0 {
        return Err(Error::domain(
            "log-SNR solvers need t_prev >= 1; the terminal hop uses predict_x0",
        ));
    }
    Ok(())
}

/// First-order DPM-Solver:
/// `x_s = (a_s / a_t) x_t - sigma_s (e^h - 1) eps_hat`, `h = lambda_s - lambda_t`.
pub fn dpm_solver_1_step(
    x_t: &ImageBuffer,
    t: usize,
    t_prev: usize,
    pred: &dyn EpsilonPredictor,
    cond: Option<&ImageBuffer>,
    sched: &NoiseSchedule,
) -> Result<ImageBuffer> {
    check_ode_hop(t, t_prev, sched)?;
    let eps = eps_at(pred, x_t, NoiseLevel::at_step(sched, t)?, cond)?;
    let (a_t, _, l_t) = solver_coefficients(sched, t as f64);
    let (a_s, s_s, l_s) = solver_coefficients(sched, t_prev as f64);
    let h = l_s - l_t;
    x_t.lincomb(a_s / a_t, &eps, -s_s * h.exp_m1())
}

/// Single-step second-order DPM-Solver (midpoint). Evaluates the predictor
/// at `t` and at the log-SNR midpoint, a fractional timestep.
pub fn dpm_solver_2_step(
    x_t: &ImageBuffer,
    t: usize,
    t_prev: usize,
    pred: &dyn EpsilonPredictor,
    cond: Option<&ImageBuffer>,
    sched: &NoiseSchedule,
) -> Result<ImageBuffer> {
    check_ode_hop(t, t_prev, sched)?;
    let (a_t, _, l_t) = solver_coefficients(sched, t as f64);
    let (a_s, s_s, l_s) = solver_coefficients(sched, t_prev as f64);
    let h = l_s - l_t;
    let mid = sched.timestep_for_log_snr(l_t + 0.5 * h);
    let mid_level = NoiseLevel::at(sched, mid);
    let (a_m, s_m) = (
        mid_level.alpha_bar.sqrt(),
        (1.0 - mid_level.alpha_bar).sqrt(),
    );
    // the midpoint's own lambda, so the half step is consistent with the level passed on
    let h_mid = log_snr_of(mid_level.alpha_bar) - l_t;

    let eps_t = eps_at(pred, x_t, NoiseLevel::at_step(sched, t)?, cond)?;
    let x_mid = x_t.lincomb(a_m / a_t, &eps_t, -s_m * h_mid.exp_m1())?;
    let eps_mid = eps_at(pred, &x_mid, mid_level, cond)?;
    x_t.lincomb(a_s / a_t, &eps_mid, -s_s * h.exp_m1())
}

/// One data-prediction step with a given (possibly extrapolated) `D`:
/// `x_s = (sigma_s / sigma_t) x_t + a_s (1 - e^{-h}) D`.
fn data_prediction_update(
    x_t: &ImageBuffer,
    s_t: f64,
    a_s: f64,
    s_s: f64,
    h: f64,
    d: &ImageBuffer,
) -> Result<ImageBuffer> {
    x_t.lincomb(s_s / s_t, d, -a_s * (-h).exp_m1())
}

/// `x0 + (x0 - x0_prev) * h / (2 h_prev)`: linear extrapolation of the data
/// prediction from the previous step.
fn extrapolated_data(
    x0: &ImageBuffer,
    state: &MultistepState,
    l_t: f64,
    h: f64,
) -> Result<ImageBuffer> {
    match &state.prev {
        None => Ok(x0.clone()),
        Some((l_prev, x0_prev)) => {
            let r = (l_t - l_prev) / h;
            x0.lincomb(1.0 + 0.5 / r, x0_prev, -0.5 / r)
        }
    }
}

/// DPM-Solver++(2M) step. Falls back to the first-order data-prediction
/// update when `state` has no history; records `(lambda_t, x0_hat)`.
#[allow(clippy::too_many_arguments)]
pub fn dpm_solver_pp_2m_step(
    state: &mut MultistepState,
    x_t: &ImageBuffer,
    t: usize,
    t_prev: usize,
    pred: &dyn EpsilonPredictor,
    cond: Option<&ImageBuffer>,
    sched: &NoiseSchedule,
) -> Result<ImageBuffer> {
    check_ode_hop(t, t_prev, sched)?;
    let (a_t, s_t, l_t) = solver_coefficients(sched, t as f64);
    let (a_s, s_s, l_s) = solver_coefficients(sched, t_prev as f64);
    let h = l_s - l_t;
    let eps = eps_at(pred, x_t, NoiseLevel::at_step(sched, t)?, cond)?;
    let x0 = x0_from_eps(x_t, a_t * a_t, &eps)?;
    let d = extrapolated_data(&x0, state, l_t, h)?;
    let out = data_prediction_update(x_t, s_t, a_s, s_s, h, &d)?;
    state.prev = Some((l_t, x0));
    Ok(out)
}

/// UniPC order-2 step with `B(h) = h`: a DPM-Solver++(2M)-style predictor,
/// then a corrector that re-solves the hop using a fresh evaluation at the
/// predicted point.
#[allow(clippy::too_many_arguments)]
pub fn unipc_step(
    state: &mut MultistepState,
    x_t: &ImageBuffer,
    t: usize,
    t_prev: usize,
    pred: &dyn EpsilonPredictor,
    cond: Option<&ImageBuffer>,
    sched: &NoiseSchedule,
) -> Result<ImageBuffer> {
    check_ode_hop(t, t_prev, sched)?;
    let (a_t, s_t, l_t) = solver_coefficients(sched, t as f64);
    let (a_s, s_s, l_s) = solver_coefficients(sched, t_prev as f64);
    let h = l_s - l_t;
    let eps = eps_at(pred, x_t, NoiseLevel::at_step(sched, t)?, cond)?;
    let m0 = x0_from_eps(x_t, a_t * a_t, &eps)?;

    let d = extrapolated_data(&m0, state, l_t, h)?;
    let x_pred = data_prediction_update(x_t, s_t, a_s, s_s, h, &d)?;

    let eps_s = eps_at(pred, &x_pred, NoiseLevel::at_step(sched, t_prev)?, cond)?;
    let m_s = x0_from_eps(&x_pred, a_s * a_s, &eps_s)?;

    let coeffs = UniCorrector::new(h, state.prev.as_ref().map(|(l, _)| (l - l_t) / h));
    // base first-order term, then the weighted differences
    let base = data_prediction_update(x_t, s_t, a_s, s_s, h, &m0)?;
    let diff_s = m_s.lincomb(1.0, &m0, -1.0)?;
    let mut corr = diff_s.scale(coeffs.rho_new);
    if let (Some((_, m_prev)), Some(r)) = (&state.prev, coeffs.r_prev) {
        let d1 = m_prev.lincomb(1.0 / r, &m0, -1.0 / r)?;
        corr = corr.lincomb(1.0, &d1, coeffs.rho_prev)?;
    }
    let out = base.lincomb(1.0, &corr, -a_s * coeffs.b_h)?;
    state.prev = Some((l_t, m0));
    Ok(out)
}

/// Corrector weights for the `B(h) = h` variant in data-prediction form
/// (`hh = -h`).
struct UniCorrector {
    b_h: f64,
    r_prev: Option<f64>,
    rho_prev: f64,
    rho_new: f64,
}

impl UniCorrector {
    fn new(h: f64, r_prev: Option<f64>) -> Self {
        let hh = -h;
        let b_h = hh;
        let phi1 = hh.exp_m1();
        // phi_2 and phi_3 style terms, as in the UniPC recursion
        let mut h_phi_k = phi1 / hh - 1.0;
        let mut factorial = 1.0;
        let mut b = [0.0; 2];
        for (i, slot) in b.iter_mut().enumerate() {
            *slot = h_phi_k * factorial / b_h;
            factorial *= (i + 2) as f64;
            h_phi_k = h_phi_k / hh - 1.0 / factorial;
        }
        match r_prev {
            None => Self {
                b_h,
                r_prev: None,
                rho_prev: 0.0,
                rho_new: 0.5,
            },
            Some(r) => {
                // solve [[1, 1], [r, 1]] rho = b
                let rho_prev = (b[0] - b[1]) / (1.0 - r);
                let rho_new = b[0] - rho_prev;
                Self {
                    b_h,
                    r_prev: Some(r),
                    rho_prev,
                    rho_new,
                }
            }
        }
    }
}

/// Runs `spec` from `x_init` (the latent at the grid origin) down to `t = 0`.
/// Deterministic kinds are bit-reproducible; stochastic kinds are
/// reproducible for a fixed `rng` state.
pub fn run_sampler<R: Rng + ?Sized>(
    spec: &SamplerSpec,
    x_init: &ImageBuffer,
    pred: &dyn EpsilonPredictor,
    cond: Option<&ImageBuffer>,
    sched: &NoiseSchedule,
    rng: &mut R,
    record: bool,
) -> Result<(ImageBuffer, TrajectoryRecord)> {
    sched.check_timestep(spec.grid.origin())?;
    if pred.requires_condition() && cond.is_none() {
        return Err(Error::MissingCondition);
    }
    let mut trajectory = TrajectoryRecord::default();
    let mut state = MultistepState::new();
    let mut x = x_init.clone();
    for (t, t_prev) in spec.grid.hops() {
        let start = Instant::now();
        x = if t_prev == 0 {
            let eps = eps_at(pred, &x, NoiseLevel::at_step(sched, t)?, cond)?;
            predict_x0(&x, t, &eps, sched)?
        } else {
            match spec.kind {
                SamplerKind::Ddpm => ddpm_step(&x, t, t_prev, pred, cond, sched, rng)?,
                SamplerKind::Ddim => ddim_step(&x, t, t_prev, pred, cond, sched, spec.eta, rng)?,
                SamplerKind::Dpm1 => dpm_solver_1_step(&x, t, t_prev, pred, cond, sched)?,
                SamplerKind::Dpm2 => dpm_solver_2_step(&x, t, t_prev, pred, cond, sched)?,
                SamplerKind::DpmPp2M => {
                    dpm_solver_pp_2m_step(&mut state, &x, t, t_prev, pred, cond, sched)?
                }
                SamplerKind::UniPc2 => unipc_step(&mut state, &x, t, t_prev, pred, cond, sched)?,
            }
        };
        if !x.is_finite() {
            return Err(Error::NonFinite { t });
        }
        if record {
            trajectory.step_times.push(start.elapsed().as_secs_f64());
            trajectory.snapshots.push((t_prev, x.clone()));
        }
    }
    Ok((x, trajectory))
}
