//! Empirical order of each deterministic solver against a 1000-step run of
//! itself, with a Gaussian data model whose exact noise predictor is known.

use astn_diffusion::denoiser::{GaussianDataModel, GaussianOracle};
use astn_diffusion::metrics::rmse;
use astn_diffusion::noise::stream_rng;
use astn_diffusion::samplers::{run_sampler, SamplerKind, SamplerSpec};
use astn_diffusion::schedule::{make_timestep_grid, GridStrategy, NoiseSchedule};
use astn_diffusion::ImageBuffer;

fn main() -> astn_diffusion::Result<()> {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let pred = GaussianOracle::new(GaussianDataModel::new(
        ImageBuffer::filled(16, 16, 0.3),
        1.0,
    )?);
    let x_t = ImageBuffer::gaussian(16, 16, &mut stream_rng(3, 0));
    let ns = [25usize, 50, 100, 200];

    let solve = |kind, n| -> astn_diffusion::Result<ImageBuffer> {
        let grid = make_timestep_grid(1000, n, 1000, GridStrategy::Uniform)?;
        Ok(run_sampler(
            &SamplerSpec::new(kind, grid),
            &x_t,
            &pred,
            None,
            &sched,
            &mut stream_rng(0, 0),
            false,
        )?
        .0)
    };

    println!(
        "{:<6} {:>10} {:>10} {:>10} {:>10}  slope",
        "solver", 25, 50, 100, 200
    );
    for kind in SamplerKind::ALL {
        if kind == SamplerKind::Ddpm {
            continue; // stochastic: no pathwise limit to converge to
        }
        let reference = solve(kind, 1000)?;
        let mut errs = Vec::new();
        for &n in &ns {
            errs.push(rmse(&solve(kind, n)?, &reference)?);
        }
        let slope = (errs[3].ln() - errs[0].ln()) / ((ns[3] as f64).ln() - (ns[0] as f64).ln());
        let cols: Vec<String> = errs.iter().map(|e| format!("{e:>10.2e}")).collect();
        println!("{:<6} {}  {slope:.2}", kind.name(), cols.join(" "));
    }
    Ok(())
}
