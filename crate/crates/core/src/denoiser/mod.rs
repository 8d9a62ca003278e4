//! Conditioned noise estimators `eps(x_t, t, c)`.
//!
//! Desk-scale stand-ins for a trained network: a Bayes-optimal oracle for
//! Gaussian data, its conditioned variant, a trainable per-timestep affine
//! model and a few trivial stubs.

mod affine;
mod oracle;

use std::sync::atomic::{AtomicUsize, Ordering};

pub use affine::{
    train_affine_predictor, AffinePredictor, AffineTraining, CondMode, SgdConfig, TrainingData,
};
pub use oracle::{
    analytic_gaussian_epsilon, conditioned_oracle, ConditionedOracle, GaussianDataModel,
    GaussianOracle,
};

use crate::error::Result;
use crate::image::ImageBuffer;
use crate::schedule::NoiseSchedule;

/// Noise level handed to a predictor: a (possibly fractional) timestep and
/// its cumulative alpha. Solvers that evaluate between grid points pass the
/// interpolated `alpha_bar` so oracle and solver agree on the level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub t: f64,
    pub alpha_bar: f64,
}

impl NoiseLevel {
    pub fn at_step(sched: &NoiseSchedule, t: usize) -> Result<Self> {
        Ok(Self {
            t: t as f64,
            alpha_bar: sched.alpha_bar(t)?,
        })
    }

    pub fn at(sched: &NoiseSchedule, t: f64) -> Self {
        Self {
            t,
            alpha_bar: sched.alpha_bar_at(t),
        }
    }
}

pub trait EpsilonPredictor: Send + Sync {
    /// Predicts the noise in `x_t`. Output has the shape of `x_t`.
    fn predict(
        &self,
        x_t: &ImageBuffer,
        level: NoiseLevel,
        cond: Option<&ImageBuffer>,
    ) -> Result<ImageBuffer>;

    /// Whether `predict` must be called with a condition.
    fn requires_condition(&self) -> bool {
        false
    }
}

impl<P: EpsilonPredictor + ?Sized> EpsilonPredictor for &P {
    fn predict(
        &self,
        x_t: &ImageBuffer,
        level: NoiseLevel,
        cond: Option<&ImageBuffer>,
    ) -> Result<ImageBuffer> {
        (**self).predict(x_t, level, cond)
    }

    fn requires_condition(&self) -> bool {
        (**self).requires_condition()
    }
}

impl<P: EpsilonPredictor + ?Sized> EpsilonPredictor for Box<P> {
    fn predict(
        &self,
        x_t: &ImageBuffer,
        level: NoiseLevel,
        cond: Option<&ImageBuffer>,
    ) -> Result<ImageBuffer> {
        (**self).predict(x_t, level, cond)
    }

    fn requires_condition(&self) -> bool {
        (**self).requires_condition()
    }
}

/// Always predicts zero noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPredictor;

impl EpsilonPredictor for ZeroPredictor {
    fn predict(
        &self,
        x_t: &ImageBuffer,
        _: NoiseLevel,
        _: Option<&ImageBuffer>,
    ) -> Result<ImageBuffer> {
        Ok(ImageBuffer::zeros(x_t.width(), x_t.height()))
    }
}

/// Predicts the input itself as the noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityPredictor;

impl EpsilonPredictor for IdentityPredictor {
    fn predict(
        &self,
        x_t: &ImageBuffer,
        _: NoiseLevel,
        _: Option<&ImageBuffer>,
    ) -> Result<ImageBuffer> {
        Ok(x_t.clone())
    }
}

/// Returns a fixed noise image regardless of input and level.
#[derive(Debug, Clone)]
pub struct ConstantPredictor {
    eps: ImageBuffer,
}

impl ConstantPredictor {
    pub fn new(eps: ImageBuffer) -> Self {
        Self { eps }
    }
}

impl EpsilonPredictor for ConstantPredictor {
    fn predict(
        &self,
        x_t: &ImageBuffer,
        _: NoiseLevel,
        _: Option<&ImageBuffer>,
    ) -> Result<ImageBuffer> {
        x_t.ensure_same_shape(&self.eps)?;
        Ok(self.eps.clone())
    }
}

/// Wraps a predictor and counts `predict` calls.
#[derive(Debug)]
pub struct CountingPredictor<P> {
    inner: P,
    calls: AtomicUsize,
}

impl<P> CountingPredictor<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }
}

impl<P: EpsilonPredictor> EpsilonPredictor for CountingPredictor<P> {
    fn predict(
        &self,
        x_t: &ImageBuffer,
        level: NoiseLevel,
        cond: Option<&ImageBuffer>,
    ) -> Result<ImageBuffer> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict(x_t, level, cond)
    }

    fn requires_condition(&self) -> bool {
        self.inner.requires_condition()
    }
}
