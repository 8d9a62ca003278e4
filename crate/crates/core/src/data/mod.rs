//! Synthetic stand-in for a low-dose CT dataset: ellipse phantoms in
//! HU-like raw units, image-domain Poisson dose simulation, fixed-window
//! normalisation and on-disk dataset plumbing.

mod format;

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::noise::stream_rng;

pub use format::{
    decode_image, encode_image, encode_pgm, read_image, write_image, write_pgm, HEADER_LEN, MAGIC,
};

/// Raw-unit window mapped onto `[0, 1]`.
pub const RAW_WINDOW: (f64, f64) = (-1024.0, 3072.0);

/// Default photon budget at full dose.
pub const DEFAULT_PHOTON_BUDGET: f64 = 4096.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    /// Pixels per side.
    pub size: usize,
    pub n_ellipses: usize,
    /// Raw value outside every ellipse.
    pub background: f64,
    /// Additive raw intensity of each ellipse is drawn from this range.
    pub intensity: (f64, f64),
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 64,
            n_ellipses: 6,
            background: 0.0,
            intensity: (-300.0, 600.0),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::Config(format!(
                "phantom size must be >= 32, got {}",
                self.size
            )));
        }
        let (lo, hi) = self.intensity;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi && self.background.is_finite()) {
            return Err(Error::Config(format!(
                "bad phantom intensity range ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

/// Sum of random rotated ellipses on a constant background, clamped to the
/// raw window and normalised to `[0, 1]`. Deterministic in `spec.seed`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<ImageBuffer> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, 0);
    let n = spec.size as f64;
    let ellipses: Vec<[f64; 6]> = (0..spec.n_ellipses)
        .map(|_| {
            let cx = rng.random_range(0.2..0.8) * n;
            let cy = rng.random_range(0.2..0.8) * n;
            let a = rng.random_range(0.08..0.35) * n;
            let b = rng.random_range(0.08..0.35) * n;
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let value = if spec.intensity.0 == spec.intensity.1 {
                spec.intensity.0
            } else {
                rng.random_range(spec.intensity.0..spec.intensity.1)
            };
            [cx, cy, a, b, theta, value]
        })
        .collect();
    let raw: Vec<f64> = (0..spec.size * spec.size)
        .map(|i| {
            let (px, py) = ((i % spec.size) as f64 + 0.5, (i / spec.size) as f64 + 0.5);
            ellipses
                .iter()
                .fold(spec.background, |acc, &[cx, cy, a, b, th, v]| {
                    let (dx, dy) = (px - cx, py - cy);
                    let u = dx * th.cos() + dy * th.sin();
                    let w = -dx * th.sin() + dy * th.cos();
                    if (u / a).powi(2) + (w / b).powi(2) <= 1.0 {
                        acc + v
                    } else {
                        acc
                    }
                })
        })
        .collect();
    normalize_intensity(&raw, spec.size, spec.size, RAW_WINDOW.0, RAW_WINDOW.1)
}

/// `(v - lo) / (hi - lo)` clamped to `[0, 1]`.
pub fn normalize_intensity(
    raw: &[f64],
    width: usize,
    height: usize,
    lo: f64,
    hi: f64,
) -> Result<ImageBuffer> {
    if !(hi > lo) {
        return Err(Error::domain(format!(
            "normalisation needs hi > lo, got [{lo}, {hi}]"
        )));
    }
    let data = raw
        .iter()
        .map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
        .collect();
    ImageBuffer::new(width, height, data)
}

/// Image-domain dose surrogate: each pixel's expected photon count is
/// `dose_fraction * photon_budget * x0`, the count is Poisson, and the result
/// is rescaled back (unbiased before the final clamp to `[0, 1]`).
/// An infinite budget is the noiseless limit and returns `x0`.
pub fn simulate_low_dose<R: Rng + ?Sized>(
    x0: &ImageBuffer,
    dose_fraction: f64,
    photon_budget: f64,
    rng: &mut R,
) -> Result<ImageBuffer> {
    if !(dose_fraction > 0.0 && dose_fraction <= 1.0) {
        return Err(Error::domain(format!(
            "dose fraction must be in (0, 1], got {dose_fraction}"
        )));
    }
    if !(photon_budget > 0.0) {
        return Err(Error::domain(format!(
            "photon budget must be positive, got {photon_budget}"
        )));
    }
    if photon_budget.is_infinite() {
        return Ok(x0.clone());
    }
    let scale = dose_fraction * photon_budget;
    let data = x0
        .as_slice()
        .iter()
        .map(|&v| {
            let lambda = scale * v.max(0.0);
            let count = if lambda == 0.0 {
                0.0
            } else if lambda > 1e12 {
                // Poisson sampler range limit; the normal limit is exact to many digits here
                let z: f64 = rng.sample(StandardNormal);
                lambda + lambda.sqrt() * z
            } else {
                Poisson::new(lambda)
                    .expect("finite positive rate")
                    .sample(rng)
            };
            (count / scale).clamp(0.0, 1.0)
        })
        .collect();
    ImageBuffer::new(x0.width(), x0.height(), data)
}

/// A clean target paired with its simulated low-dose acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct DosePair {
    pub full_dose: ImageBuffer,
    pub low_dose: ImageBuffer,
    pub dose_fraction: f64,
}

impl DosePair {
    pub fn new(full_dose: ImageBuffer, low_dose: ImageBuffer, dose_fraction: f64) -> Result<Self> {
        full_dose.ensure_same_shape(&low_dose)?;
        let in_unit = |img: &ImageBuffer| img.min() >= 0.0 && img.max() <= 1.0;
        if !in_unit(&full_dose) || !in_unit(&low_dose) {
            return Err(Error::domain("dose pair images must lie in [0, 1]"));
        }
        if !(dose_fraction > 0.0 && dose_fraction <= 1.0) {
            return Err(Error::domain(format!(
                "dose fraction must be in (0, 1], got {dose_fraction}"
            )));
        }
        Ok(Self {
            full_dose,
            low_dose,
            dose_fraction,
        })
    }

    /// Phantom from `spec` plus a low-dose draw seeded by `noise_seed`.
    pub fn synthesize(
        spec: &PhantomSpec,
        dose_fraction: f64,
        photon_budget: f64,
        noise_seed: u64,
    ) -> Result<Self> {
        let full = generate_phantom(spec)?;
        let low = simulate_low_dose(
            &full,
            dose_fraction,
            photon_budget,
            &mut stream_rng(noise_seed, 1),
        )?;
        Self::new(full, low, dose_fraction)
    }
}

/// One dataset row; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub full_path: String,
    pub low_path: String,
    pub dose_fraction: f64,
    pub seed: u64,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(["pair_id", "full_path", "low_path", "dose_fraction", "seed"])?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    })?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Loads every pair listed in `dir/manifest.csv`.
pub fn load_dataset(dir: &Path) -> Result<Vec<(ManifestEntry, DosePair)>> {
    let entries = read_manifest(&dir.join(MANIFEST_FILE))?;
    entries
        .into_iter()
        .map(|e| {
            let full = read_image(&resolve(dir, &e.full_path))?;
            let low = read_image(&resolve(dir, &e.low_path))?;
            let pair = DosePair::new(full, low, e.dose_fraction)?;
            Ok((e, pair))
        })
        .collect()
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}
