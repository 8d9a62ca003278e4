//! DDIM inversion followed by DDIM sampling. With the exact predictor of a
//! point-mass data model the round trip is exact on any grid; with a trained
//! affine model the error shrinks as the grid gets finer.

use astn_diffusion::denoiser::{
    train_affine_predictor, CondMode, GaussianDataModel, GaussianOracle, SgdConfig, TrainingData,
};
use astn_diffusion::inversion::{ddim_invert, invert_then_reconstruct, InversionMode};
use astn_diffusion::metrics::rmse;
use astn_diffusion::noise::stream_rng;
use astn_diffusion::samplers::{SamplerKind, SamplerSpec};
use astn_diffusion::schedule::{make_timestep_grid, GridStrategy, NoiseSchedule};
use astn_diffusion::ImageBuffer;

fn main() -> astn_diffusion::Result<()> {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let mut rng = stream_rng(7, 0);
    let model = GaussianDataModel::new(ImageBuffer::filled(8, 8, 0.3), 0.5)?;
    let x = model.sample(&mut rng);

    let exact = GaussianOracle::new(GaussianDataModel::new(x.clone(), 0.0)?);
    let trained = train_affine_predictor(
        &TrainingData::Gaussian(model),
        CondMode::None,
        &sched,
        SgdConfig {
            iterations: 40_000,
            ..SgdConfig::default()
        },
        &mut rng,
    )?
    .predictor;

    for n in [10usize, 50, 150, 1000] {
        let grid = make_timestep_grid(1000, n, 1000, GridStrategy::Uniform)?;
        let spec = SamplerSpec::new(SamplerKind::Ddim, grid.clone());
        let mode = InversionMode::PredictedX0;
        let e_exact = rmse(
            &invert_then_reconstruct(&x, &exact, None, &sched, &grid, mode, &spec, &mut rng)?,
            &x,
        )?;
        let e_trained = rmse(
            &invert_then_reconstruct(&x, &trained, None, &sched, &grid, mode, &spec, &mut rng)?,
            &x,
        )?;
        println!("{n:>5} steps: exact predictor {e_exact:.2e}, trained affine {e_trained:.2e}");
    }

    // literal mode never calls the predictor: the latent is a rescaled input
    let grid = make_timestep_grid(1000, 50, 1000, GridStrategy::Uniform)?;
    let latent = ddim_invert(&x, &trained, None, &sched, &grid, InversionMode::LiteralX0)?;
    println!(
        "literal latent / input = {:.5} (sqrt ab_T = {:.5})",
        latent.l2_norm() / x.l2_norm(),
        sched.alpha_bar(1000)?.sqrt()
    );
    Ok(())
}
