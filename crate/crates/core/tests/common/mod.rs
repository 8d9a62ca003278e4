#![allow(dead_code)]

use astn_diffusion::denoiser::GaussianDataModel;
use astn_diffusion::schedule::{make_timestep_grid, GridStrategy, NoiseSchedule, TimestepGrid};
use astn_diffusion::ImageBuffer;

pub fn ddpm_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

pub fn uniform_grid(origin: usize, n: usize) -> TimestepGrid {
    make_timestep_grid(origin, n, 1000, GridStrategy::Uniform).unwrap()
}

/// Exact probability-flow ODE endpoint for `N(m, s^2 I)` data, started at
/// `x_t`: in the scaled variable `x / sqrt(ab)` the flow is an affine
/// contraction, `x0 = m + (x_t / sqrt(ab) - m) * s / sqrt(s^2 + sigma^2)`
/// with `sigma^2 = (1 - ab) / ab`.
pub fn exact_flow_endpoint(model: &GaussianDataModel, x_t: &ImageBuffer, ab: f64) -> ImageBuffer {
    let s2 = model.var();
    let sigma2 = (1.0 - ab) / ab;
    let k = (s2 / (s2 + sigma2)).sqrt();
    model
        .mean()
        .zip_map(x_t, |m, x| m + (x / ab.sqrt() - m) * k)
        .unwrap()
}

/// Least-squares slope of `ln(err)` against `ln(n)`.
pub fn log_log_slope(ns: &[usize], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

pub fn max_abs_diff(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn scalar_mse(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let mut s = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            let d = a.get(x, y) - b.get(x, y);
            s += d * d;
        }
    }
    s / (a.width() * a.height()) as f64
}

/// SSIM by direct windowed sums over every valid 11x11 position with the 2D
/// Gaussian window built from scratch (sigma 1.5, K1 0.01, K2 0.03, range 1).
pub fn direct_ssim(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let (k, sigma) = (11usize, 1.5f64);
    let mut win = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            win[i * k + j] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = win.iter().sum();
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let mut count = 0.0;
    for y0 in 0..=a.height() - k {
        for x0 in 0..=a.width() - k {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let w = win[i * k + j] / total;
                    let (p, q) = (a.get(x0 + j, y0 + i), b.get(x0 + j, y0 + i));
                    ma += w * p;
                    mb += w * q;
                    saa += w * p * p;
                    sbb += w * q * q;
                    sab += w * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    acc / count
}
