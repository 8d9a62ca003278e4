//! Restoring a simulated low-dose phantom by starting the reverse process at
//! an intermediate step `n` (AST-n) instead of from pure noise.

use astn_diffusion::astn::{reconstruct, RegimeSpec};
use astn_diffusion::data::{DosePair, PhantomSpec, DEFAULT_PHOTON_BUDGET};
use astn_diffusion::denoiser::conditioned_oracle;
use astn_diffusion::experiment::fit_prior;
use astn_diffusion::metrics::{psnr, ssim, timed, SsimParams};
use astn_diffusion::noise::stream_rng;
use astn_diffusion::samplers::SamplerKind;
use astn_diffusion::schedule::{GridStrategy, NoiseSchedule};

fn main() -> astn_diffusion::Result<()> {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let pairs = (0..8u64)
        .map(|i| {
            let spec = PhantomSpec {
                seed: i,
                ..PhantomSpec::default()
            };
            DosePair::synthesize(&spec, 0.25, DEFAULT_PHOTON_BUDGET, 100 + i)
        })
        .collect::<astn_diffusion::Result<Vec<_>>>()?;
    let (prior, noise) = fit_prior(&pairs)?;
    let pred = conditioned_oracle(prior, noise);
    let pair = &pairs[0];
    let params = SsimParams::default();
    println!(
        "low-dose input: PSNR {:.2} dB, SSIM {:.4}",
        psnr(&pair.full_dose, &pair.low_dose, 1.0)?,
        ssim(&pair.full_dose, &pair.low_dose, &params)?
    );

    let mut specs = vec![RegimeSpec::full_noise(
        SamplerKind::Ddim,
        1000,
        &sched,
        GridStrategy::Uniform,
    )?];
    for n in [10usize, 50, 150, 500] {
        specs.push(RegimeSpec::ast_n(
            SamplerKind::Ddim,
            n,
            n,
            &sched,
            GridStrategy::Uniform,
        )?);
    }
    for spec in &specs {
        let (out, secs) = timed(|| {
            reconstruct(
                spec,
                &pair.low_dose,
                &pred,
                &sched,
                &mut stream_rng(1, 0),
                false,
            )
        });
        let out = out?.0.clamp(0.0, 1.0);
        println!(
            "{:<5} {:>4} steps: PSNR {:.2} dB, SSIM {:.4}, {:.1} ms",
            spec.label(&sched),
            spec.steps(),
            psnr(&pair.full_dose, &out, 1.0)?,
            ssim(&pair.full_dose, &out, &params)?,
            1e3 * secs
        );
    }
    Ok(())
}
