//! Image quality metrics (PSNR, RMSE, SSIM), wall-clock timing and the
//! tabular report written by sweeps.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::image::ImageBuffer;

/// PSNR reported for identical images, keeping CSVs finite.
pub const PSNR_CAP_DB: f64 = 300.0;

fn mse(reference: &ImageBuffer, test: &ImageBuffer) -> Result<f64> {
    reference.ensure_same_shape(test)?;
    let sum: f64 = reference
        .as_slice()
        .iter()
        .zip(test.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / reference.len() as f64)
}

pub fn rmse(reference: &ImageBuffer, test: &ImageBuffer) -> Result<f64> {
    Ok(mse(reference, test)?.sqrt())
}

/// `10 log10(range^2 / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(reference: &ImageBuffer, test: &ImageBuffer, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::domain(format!(
            "data range must be positive, got {data_range}"
        )));
    }
    let m = mse(reference, test)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / m).log10()).min(PSNR_CAP_DB))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

/// Normalised 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

// valid-mode separable filter; output is (w - k + 1) x (h - k + 1)
fn filter_valid(data: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let line = &data[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(j, t)| t * rows[(y + j) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained Gaussian windows.
pub fn ssim(reference: &ImageBuffer, test: &ImageBuffer, params: &SsimParams) -> Result<f64> {
    reference.ensure_same_shape(test)?;
    let (w, h) = reference.shape();
    if params.window == 0 || w < params.window || h < params.window {
        return Err(Error::domain(format!(
            "image {w}x{h} is smaller than the {0}x{0} SSIM window",
            params.window
        )));
    }
    if !(params.sigma > 0.0 && params.data_range > 0.0) {
        return Err(Error::domain("SSIM sigma and data range must be positive"));
    }
    let taps = gaussian_taps(params.window, params.sigma);
    let a = reference.as_slice();
    let b = test.as_slice();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_a = filter_valid(a, w, h, &taps);
    let mu_b = filter_valid(b, w, h, &taps);
    let aa = filter_valid(&prod(&|x, _| x * x), w, h, &taps);
    let bb = filter_valid(&prod(&|_, y| y * y), w, h, &taps);
    let ab = filter_valid(&prod(&|x, y| x * y), w, h, &taps);
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok((total / n as f64).clamp(-1.0, 1.0))
}

/// Runs `op` and returns its result with the elapsed monotonic wall time in seconds.
pub fn timed<T>(op: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = op();
    (out, start.elapsed().as_secs_f64())
}

/// One sweep cell: mean metrics over a dataset for a (regime, sampler, steps) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub regime: String,
    pub sampler: String,
    pub steps: usize,
    pub psnr_db: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub time_s: f64,
    pub seed: u64,
}

impl MetricsRow {
    fn check(&self) -> std::result::Result<(), String> {
        if !(-1.0..=1.0).contains(&self.ssim) {
            return Err(format!("ssim {} outside [-1, 1]", self.ssim));
        }
        if !(self.rmse >= 0.0) {
            return Err(format!("rmse {} is negative", self.rmse));
        }
        if !(self.time_s >= 0.0) {
            return Err(format!("time_s {} is negative", self.time_s));
        }
        Ok(())
    }
}

pub const REPORT_HEADER: [&str; 8] = [
    "regime", "sampler", "steps", "psnr_db", "rmse", "ssim", "time_s", "seed",
];

const TIME_NOTE: &str = "# time_s: mean wall-clock seconds per image";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn find(&self, regime: &str, sampler: &str, steps: usize) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.regime == regime && r.sampler == sampler && r.steps == steps)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{TIME_NOTE}").map_err(|e| Error::io("<csv>", e))?;
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(out);
        w.write_record(REPORT_HEADER)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Parses a report. Lines starting with `#` are comments. Malformed rows
    /// are reported with their 1-based line number.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .has_headers(false)
            .from_reader(input);
        let mut report = MetricsReport::new();
        let mut seen_header = false;
        for record in reader.records() {
            let record = record.map_err(|e| malformed_csv(&e))?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            if !seen_header {
                if record.iter().ne(REPORT_HEADER.iter().copied()) {
                    return Err(FormatError::Malformed {
                        line,
                        message: format!("expected header {}", REPORT_HEADER.join(",")),
                    }
                    .into());
                }
                seen_header = true;
                continue;
            }
            let row: MetricsRow = record
                .deserialize(None)
                .map_err(|e| FormatError::Malformed {
                    line,
                    message: deserialize_message(&e),
                })?;
            row.check()
                .map_err(|message| FormatError::Malformed { line, message })?;
            report.push(row);
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

fn malformed_csv(e: &csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    FormatError::Malformed {
        line,
        message: e.to_string(),
    }
    .into()
}

fn deserialize_message(e: &csv::Error) -> String {
    match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => match err.field() {
            Some(i) => format!(
                "column {}: {}",
                REPORT_HEADER.get(i as usize).unwrap_or(&"?"),
                err.kind()
            ),
            None => err.kind().to_string(),
        },
        _ => e.to_string(),
    }
}
