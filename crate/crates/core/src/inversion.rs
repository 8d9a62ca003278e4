//! Deterministic DDIM inversion: walk the eta = 0 update upward in `t` to map
//! an image onto an approximate latent, then optionally sample back down.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{EpsilonPredictor, NoiseLevel};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::samplers::{predict_x0, run_sampler, SamplerSpec};
use crate::schedule::{NoiseSchedule, TimestepGrid};

/// Which clean-image estimate drives each upward hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionMode {
    /// The input image is the clean estimate at every hop. The predictor is
    /// never consulted and the latent is `sqrt(ab_origin) * x_start`.
    LiteralX0,
    /// The clean estimate is re-predicted from the current state each hop.
    #[default]
    PredictedX0,
}

impl InversionMode {
    pub fn name(self) -> &'static str {
        match self {
            InversionMode::LiteralX0 => "literal_x0",
            InversionMode::PredictedX0 => "predicted_x0",
        }
    }
}

impl fmt::Display for InversionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InversionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal_x0" => Ok(InversionMode::LiteralX0),
            "predicted_x0" => Ok(InversionMode::PredictedX0),
            other => Err(Error::Config(format!("unknown inversion mode `{other}`"))),
        }
    }
}

/// Maps `x_start` (a clean image at `t = 0`) to the latent at `grid.origin()`
/// by visiting `0, g[n-1], ..., g[0]`, i.e. the sampling grid in reverse.
///
/// Each hop `s -> t` sets `x_t = sqrt(ab_t) x0_hat + sqrt(1 - ab_t) eps_hat`
/// with `sigma = 0`. From `s = 0` in predicted mode there is no noise level
/// to evaluate at, so the predictor sees `x_start` at level `t`.
pub fn ddim_invert(
    x_start: &ImageBuffer,
    pred: &dyn EpsilonPredictor,
    cond: Option<&ImageBuffer>,
    sched: &NoiseSchedule,
    grid: &TimestepGrid,
    mode: InversionMode,
) -> Result<ImageBuffer> {
    sched.check_timestep(grid.origin())?;
    if mode == InversionMode::PredictedX0 && pred.requires_condition() && cond.is_none() {
        return Err(Error::MissingCondition);
    }
    let mut x = x_start.clone();
    let mut s = 0usize;
    for &t in grid.steps().iter().rev() {
        let ab_t = sched.alpha_bar(t)?;
        let (x0_hat, eps_hat) = match mode {
            InversionMode::LiteralX0 => {
                let dir = if s == 0 {
                    ImageBuffer::zeros(x.width(), x.height())
                } else {
                    let ab_s = sched.alpha_bar(s)?;
                    x.lincomb(1.0, x_start, -ab_s.sqrt())?
                        .scale(1.0 / (1.0 - ab_s).sqrt())
                };
                (x_start.clone(), dir)
            }
            InversionMode::PredictedX0 => {
                let level_step = if s == 0 { t } else { s };
                let eps = pred.predict(&x, NoiseLevel::at_step(sched, level_step)?, cond)?;
                x.ensure_same_shape(&eps)?;
                let x0 = if s == 0 {
                    x.clone()
                } else {
                    predict_x0(&x, s, &eps, sched)?
                };
                (x0, eps)
            }
        };
        x = x0_hat.lincomb(ab_t.sqrt(), &eps_hat, (1.0 - ab_t).sqrt())?;
        if !x.is_finite() {
            return Err(Error::NonFinite { t });
        }
        s = t;
    }
    Ok(x)
}

/// Inverts on `invert_grid` and samples back with `sample_spec`.
#[allow(clippy::too_many_arguments)]
pub fn invert_then_reconstruct<R: Rng + ?Sized>(
    x_start: &ImageBuffer,
    pred: &dyn EpsilonPredictor,
    cond: Option<&ImageBuffer>,
    sched: &NoiseSchedule,
    invert_grid: &TimestepGrid,
    mode: InversionMode,
    sample_spec: &SamplerSpec,
    rng: &mut R,
) -> Result<ImageBuffer> {
    if invert_grid.origin() != sample_spec.grid.origin() {
        return Err(Error::Config(format!(
            "inversion ends at t = {} but sampling starts at t = {}",
            invert_grid.origin(),
            sample_spec.grid.origin()
        )));
    }
    let latent = ddim_invert(x_start, pred, cond, sched, invert_grid, mode)?;
    let (out, _) = run_sampler(sample_spec, &latent, pred, cond, sched, rng, false)?;
    Ok(out)
}
