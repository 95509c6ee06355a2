//! Denoises a synthetic salt-and-pepper image and prints the energy curve.
//!
//!     cargo run --example tv_denoise -- [out.pgm]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mugshot_kit::imageio;
use mugshot_kit::tv::{denoise_traced, total_variation, DenoiseParams, GrayImage};

fn main() -> mugshot_kit::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "tv_denoised.pgm".into());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noisy = GrayImage::from_fn(64, 64, |x, y| {
        let clean = if (x / 16 + y / 16) % 2 == 0 { 0.25 } else { 0.75 };
        match rng.random::<f64>() {
            p if p < 0.05 => 0.0,
            p if p < 0.10 => 1.0,
            _ => clean,
        }
    })?;

    let params = DenoiseParams::default();
    let trace = denoise_traced(&noisy, &params)?;
    for (i, e) in trace.energy.iter().enumerate().step_by(25) {
        println!("iteration {i:>3}: E = {e:.4}");
    }
    println!(
        "V(input) = {:.2}, V(output) = {:.2}, stalled iterations: {}",
        total_variation(&noisy),
        total_variation(&trace.image),
        trace.stalled_iterations
    );
    imageio::write_gray("tv_noisy.pgm", &noisy)?;
    imageio::write_gray(&out, &trace.image)?;
    println!("wrote tv_noisy.pgm and {out}");
    Ok(())
}
