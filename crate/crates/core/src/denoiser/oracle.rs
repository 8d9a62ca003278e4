use rand::Rng;

use super::{EpsilonPredictor, NoiseLevel};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::schedule::NoiseSchedule;

/// Toy data `x_0 ~ N(mean, var * I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDataModel {
    mean: ImageBuffer,
    var: f64,
}

impl GaussianDataModel {
    pub fn new(mean: ImageBuffer, var: f64) -> Result<Self> {
        if !(var >= 0.0 && var.is_finite()) {
            return Err(Error::domain(format!(
                "data variance must be >= 0, got {var}"
            )));
        }
        Ok(Self { mean, var })
    }

    pub fn mean(&self) -> &ImageBuffer {
        &self.mean
    }

    pub fn var(&self) -> f64 {
        self.var
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ImageBuffer {
        let z = ImageBuffer::gaussian(self.mean.width(), self.mean.height(), rng);
        let sd = self.var.sqrt();
        self.mean.lincomb(1.0, &z, sd).expect("same shape")
    }
}

/// `E[eps | x_t]` when `x_0 ~ N(m, s^2)` pixelwise:
/// `sqrt(1-ab) * (x_t - sqrt(ab) m) / (ab s^2 + 1 - ab)`.
fn posterior_epsilon(
    x_t: &ImageBuffer,
    mean: &ImageBuffer,
    var: f64,
    alpha_bar: f64,
) -> Result<ImageBuffer> {
    let denom = alpha_bar * var + 1.0 - alpha_bar;
    if denom == 0.0 {
        return Ok(ImageBuffer::zeros(x_t.width(), x_t.height()));
    }
    let gain = (1.0 - alpha_bar).sqrt() / denom;
    let shift = alpha_bar.sqrt();
    x_t.zip_map(mean, |x, m| gain * (x - shift * m))
}

/// Bayes-optimal noise estimate for Gaussian data at integer timestep `t`.
pub fn analytic_gaussian_epsilon(
    model: &GaussianDataModel,
    x_t: &ImageBuffer,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ImageBuffer> {
    if t == 0 {
        return Err(Error::domain("noise prediction needs t >= 1"));
    }
    posterior_epsilon(x_t, &model.mean, model.var, sched.alpha_bar(t)?)
}

/// Unconditional oracle predictor for [`GaussianDataModel`] data. With zero
/// variance it recovers exactly the noise that produced `x_t` from the mean.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    model: GaussianDataModel,
}

impl GaussianOracle {
    pub fn new(model: GaussianDataModel) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &GaussianDataModel {
        &self.model
    }
}

impl EpsilonPredictor for GaussianOracle {
    fn predict(
        &self,
        x_t: &ImageBuffer,
        level: NoiseLevel,
        _: Option<&ImageBuffer>,
    ) -> Result<ImageBuffer> {
        posterior_epsilon(x_t, &self.model.mean, self.model.var, level.alpha_bar)
    }
}

/// Oracle for data observed through a noisy condition `c = x_0 + eta`,
/// `eta ~ N(0, noise_level^2)`: the prior is first updated with `c`, then the
/// Gaussian posterior of `x_0` feeds the usual closed form.
#[derive(Debug, Clone)]
pub struct ConditionedOracle {
    prior: GaussianDataModel,
    noise_level: f64,
}

impl ConditionedOracle {
    pub fn prior(&self) -> &GaussianDataModel {
        &self.prior
    }

    pub fn noise_level(&self) -> f64 {
        self.noise_level
    }

    /// Pixelwise posterior mean and scalar variance of `x_0` given `c`.
    pub fn posterior(&self, cond: &ImageBuffer) -> Result<(ImageBuffer, f64)> {
        let s2 = self.prior.var;
        if self.noise_level.is_infinite() {
            cond.ensure_same_shape(&self.prior.mean)?;
            return Ok((self.prior.mean.clone(), s2));
        }
        let n2 = self.noise_level * self.noise_level;
        if s2 + n2 == 0.0 {
            cond.ensure_same_shape(&self.prior.mean)?;
            return Ok((cond.clone(), 0.0));
        }
        let total = s2 + n2;
        let mean = self
            .prior
            .mean
            .zip_map(cond, |m, c| (n2 * m + s2 * c) / total)?;
        Ok((mean, s2 * n2 / total))
    }
}

pub fn conditioned_oracle(prior: GaussianDataModel, noise_level: f64) -> ConditionedOracle {
    assert!(noise_level >= 0.0, "noise level must be non-negative");
    ConditionedOracle { prior, noise_level }
}

impl EpsilonPredictor for ConditionedOracle {
    fn predict(
        &self,
        x_t: &ImageBuffer,
        level: NoiseLevel,
        cond: Option<&ImageBuffer>,
    ) -> Result<ImageBuffer> {
        let cond = cond.ok_or(Error::MissingCondition)?;
        let (mean, var) = self.posterior(cond)?;
        posterior_epsilon(x_t, &mean, var, level.alpha_bar)
    }

    fn requires_condition(&self) -> bool {
        true
    }
}
