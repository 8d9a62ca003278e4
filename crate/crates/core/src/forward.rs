//! Closed-form forward diffusion and the noise-prediction objective.

use rand::Rng;

use crate::denoiser::{EpsilonPredictor, NoiseLevel};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::schedule::NoiseSchedule;

/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn q_sample(
    x0: &ImageBuffer,
    t: usize,
    eps: &ImageBuffer,
    sched: &NoiseSchedule,
) -> Result<ImageBuffer> {
    let ab = sched.alpha_bar(t)?;
    x0.lincomb(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Mean image and isotropic variance of `q(x_t | x_0)`.
pub fn marginal_moments(
    x0: &ImageBuffer,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(ImageBuffer, f64)> {
    let ab = sched.alpha_bar(t)?;
    Ok((x0.scale(ab.sqrt()), 1.0 - ab))
}

/// Monte Carlo estimate of the expected squared noise-prediction error,
/// averaged over batch items and pixels. One timestep `t ~ U[1, T]` and one
/// noise draw per item.
pub fn training_loss<R: Rng + ?Sized>(
    pred: &dyn EpsilonPredictor,
    x0_batch: &[ImageBuffer],
    cond_batch: Option<&[ImageBuffer]>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    if x0_batch.is_empty() {
        return Err(Error::domain("training batch is empty"));
    }
    if let Some(c) = cond_batch {
        if c.len() != x0_batch.len() {
            return Err(Error::domain(format!(
                "condition batch length {} does not match data batch length {}",
                c.len(),
                x0_batch.len()
            )));
        }
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, x0) in x0_batch.iter().enumerate() {
        let t = rng.random_range(1..=sched.steps());
        let eps = ImageBuffer::gaussian(x0.width(), x0.height(), rng);
        let cond = cond_batch.map(|c| &c[i]);
        total += squared_error_sum(pred, x0, cond, t, &eps, sched)?;
        count += x0.len();
    }
    Ok(total / count as f64)
}

/// Sum over pixels of `(eps_hat - eps)^2` for one fixed `(t, eps)` draw.
pub fn squared_error_sum(
    pred: &dyn EpsilonPredictor,
    x0: &ImageBuffer,
    cond: Option<&ImageBuffer>,
    t: usize,
    eps: &ImageBuffer,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let x_t = q_sample(x0, t, eps, sched)?;
    let eps_hat = pred.predict(&x_t, NoiseLevel::at_step(sched, t)?, cond)?;
    eps.ensure_same_shape(&eps_hat)?;
    Ok(eps_hat
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}
