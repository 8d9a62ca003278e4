//! Synthesise a phantom pair, store it in the binary image format, and
//! write greyscale previews.
//!
//! Usage: `cargo run --example phantom_data -- [OUT_DIR]`

use std::path::PathBuf;

use astn_diffusion::data::{
    read_image, write_image, write_pgm, DosePair, PhantomSpec, DEFAULT_PHOTON_BUDGET,
};
use astn_diffusion::metrics::{psnr, rmse};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("astn-phantom"));
    std::fs::create_dir_all(&dir)?;

    let spec = PhantomSpec {
        size: 128,
        n_ellipses: 8,
        seed: 42,
        ..PhantomSpec::default()
    };
    for dose in [0.5, 0.25, 0.1] {
        let pair = DosePair::synthesize(&spec, dose, DEFAULT_PHOTON_BUDGET, 7)?;
        let path = dir.join(format!("low_{dose}.astimg"));
        write_image(&path, &pair.low_dose)?;
        write_pgm(&dir.join(format!("low_{dose}.pgm")), &pair.low_dose)?;
        let back = read_image(&path)?;
        println!(
            "dose {dose:>4}: PSNR {:.2} dB vs full dose; stored copy differs by {:.1e}",
            psnr(&pair.full_dose, &pair.low_dose, 1.0)?,
            rmse(&pair.low_dose, &back)?
        );
        if dose == 0.5 {
            write_image(&dir.join("full.astimg"), &pair.full_dose)?;
            write_pgm(&dir.join("full.pgm"), &pair.full_dose)?;
        }
    }
    println!("wrote images to {}", dir.display());
    Ok(())
}
