//! The linear schedule, its log-SNR, and the forward marginal checked by
//! Monte Carlo.

use astn_diffusion::forward::{marginal_moments, q_sample};
use astn_diffusion::noise::stream_rng;
use astn_diffusion::schedule::NoiseSchedule;
use astn_diffusion::ImageBuffer;

fn main() -> astn_diffusion::Result<()> {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    println!("{:>5}  {:>10}  {:>8}  {:>9}", "t", "beta", "ab", "log-snr");
    for t in [1usize, 10, 50, 150, 500, 1000] {
        println!(
            "{t:>5}  {:>10.6}  {:>8.5}  {:>9.3}",
            sched.betas()[t - 1],
            sched.alpha_bar(t)?,
            sched.log_snr(t as f64)
        );
    }

    // a constant image makes every pixel an independent draw of the same law
    let x0 = ImageBuffer::filled(64, 64, 0.5);
    let mut rng = stream_rng(0, 0);
    for t in [150usize, 500] {
        let x_t = q_sample(&x0, t, &ImageBuffer::gaussian(64, 64, &mut rng), &sched)?;
        let (mean, var) = marginal_moments(&x0, t, &sched)?;
        println!(
            "t={t}: empirical mean {:.4} var {:.4}; closed form {:.4} {:.4}",
            x_t.mean(),
            x_t.variance(),
            mean.mean(),
            var
        );
    }
    Ok(())
}
