//! PSNR, RMSE and SSIM under increasing corruption, and the metrics CSV
//! round trip.

use astn_diffusion::data::{generate_phantom, PhantomSpec};
use astn_diffusion::metrics::{psnr, rmse, ssim, MetricsReport, MetricsRow, SsimParams};
use astn_diffusion::noise::stream_rng;
use astn_diffusion::ImageBuffer;

fn main() -> astn_diffusion::Result<()> {
    let clean = generate_phantom(&PhantomSpec::default())?;
    let noise = ImageBuffer::gaussian(clean.width(), clean.height(), &mut stream_rng(5, 0));
    let params = SsimParams::default();

    let mut report = MetricsReport::new();
    println!(
        "{:>6}  {:>8}  {:>7}  {:>6}",
        "sigma", "psnr_db", "rmse", "ssim"
    );
    for (i, sigma) in [0.005, 0.01, 0.02, 0.05, 0.1].into_iter().enumerate() {
        let noisy = clean.lincomb(1.0, &noise, sigma)?.clamp(0.0, 1.0);
        let row = MetricsRow {
            regime: "noise".into(),
            sampler: "none".into(),
            steps: i,
            psnr_db: psnr(&clean, &noisy, 1.0)?,
            rmse: rmse(&clean, &noisy)?,
            ssim: ssim(&clean, &noisy, &params)?,
            time_s: 0.0,
            seed: 5,
        };
        println!(
            "{sigma:>6}  {:>8.3}  {:>7.4}  {:>6.4}",
            row.psnr_db, row.rmse, row.ssim
        );
        report.push(row);
    }

    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    let back = MetricsReport::read_csv(csv.as_slice())?;
    println!(
        "csv round trip: {} rows, identical = {}",
        back.len(),
        back.rows == report.rows
    );
    Ok(())
}
