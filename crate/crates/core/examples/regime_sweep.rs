//! A small in-memory sweep over regimes and samplers, rendered as the
//! report table.

use astn_diffusion::astn::{plan_cells, regime_sweep, RegimeName};
use astn_diffusion::data::{DosePair, PhantomSpec, DEFAULT_PHOTON_BUDGET};
use astn_diffusion::denoiser::conditioned_oracle;
use astn_diffusion::experiment::{fit_prior, render_report};
use astn_diffusion::inversion::InversionMode;
use astn_diffusion::samplers::SamplerKind;
use astn_diffusion::schedule::{GridStrategy, NoiseSchedule};

fn main() -> astn_diffusion::Result<()> {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let pairs = (0..4u64)
        .map(|i| {
            let spec = PhantomSpec {
                seed: i,
                ..PhantomSpec::default()
            };
            DosePair::synthesize(&spec, 0.1, DEFAULT_PHOTON_BUDGET, 50 + i)
        })
        .collect::<astn_diffusion::Result<Vec<_>>>()?;
    let (prior, noise) = fit_prior(&pairs)?;
    let pred = conditioned_oracle(prior, noise);

    let cells = plan_cells(
        &RegimeName::ALL,
        &[SamplerKind::Ddim, SamplerKind::DpmPp2M, SamplerKind::UniPc2],
        &[25, 150, 1000],
        &sched,
        0.0,
        GridStrategy::Uniform,
        InversionMode::PredictedX0,
    )?;
    let outcome = regime_sweep(&cells, &pairs, &pred, &sched, 0)?;
    print!("{}", render_report(&outcome.report, sched.steps()));
    for f in &outcome.failures {
        eprintln!("cell {} failed: {}", f.cell, f.message);
    }
    Ok(())
}
