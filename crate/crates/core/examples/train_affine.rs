//! Fit the affine noise predictor by SGD and compare it with the closed-form
//! optimum for Gaussian data.

use astn_diffusion::denoiser::{
    train_affine_predictor, CondMode, GaussianDataModel, SgdConfig, TrainingData,
};
use astn_diffusion::noise::stream_rng;
use astn_diffusion::schedule::NoiseSchedule;
use astn_diffusion::ImageBuffer;

fn main() -> astn_diffusion::Result<()> {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let (m, var) = (0.3, 0.5);
    let model = GaussianDataModel::new(ImageBuffer::filled(8, 8, m), var)?;
    let fit = train_affine_predictor(
        &TrainingData::Gaussian(model),
        CondMode::None,
        &sched,
        SgdConfig::default(),
        &mut stream_rng(11, 0),
    )?;
    println!(
        "loss {:.4} -> {:.4}",
        fit.initial_loss,
        fit.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    println!("{:>5}  {:>9} {:>9}  {:>9} {:>9}", "t", "a", "a*", "b", "b*");
    for t in [1usize, 10, 100, 300, 600, 1000] {
        let ab = sched.alpha_bar(t)?;
        let a_star = (1.0 - ab).sqrt() / (ab * var + 1.0 - ab);
        let b = fit.predictor.offsets(t).iter().sum::<f64>() / 64.0;
        println!(
            "{t:>5}  {:>9.4} {a_star:>9.4}  {b:>9.4} {:>9.4}",
            fit.predictor.gain(t),
            -a_star * ab.sqrt() * m
        );
    }
    Ok(())
}
