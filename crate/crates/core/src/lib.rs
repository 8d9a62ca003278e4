//! Diffusion sampling toolkit for accelerated restoration experiments.
//!
//! The reverse process can start from pure noise, from an analytically
//! noised copy of the conditioning image (AST-n), or from a DDIM-inverted
//! latent, and can be run by any of six solvers. Denoisers are desk-scale
//! stand-ins (closed-form Gaussian oracles and a trainable affine model), so
//! every numerical claim can be checked against an exact answer.

// `!(x > 0.0)` is how range checks here reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod astn;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod image;
pub mod inversion;
pub mod metrics;
pub mod noise;
pub mod samplers;
pub mod schedule;

pub use error::{Error, FormatError, Result};
pub use image::ImageBuffer;
