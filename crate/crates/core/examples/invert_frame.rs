//! Fits low-rank prompt factors to a single frame and prints the loss curve.
//!
//!     cargo run --example invert_frame -- [rank] [iterations]

use promptlab::fixtures::translating_square;
use promptlab::inversion::{compose_embedding, fit_distance, fit_first_frame, mix_noise, FitConfig};
use promptlab::toygen::{generate, init_weights, sample_noise, GeneratorConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>());
    let rank = args.next().transpose()?.unwrap_or(8);
    let iterations = args.next().transpose()?.unwrap_or(1500);

    let gen = GeneratorConfig::compact();
    let weights = init_weights(&gen)?;
    let noise0 = sample_noise(&gen, 1);
    let target = translating_square(gen.image_h(), gen.image_w(), 1, 4, 1).remove(0);
    let cfg = FitConfig {
        rank,
        iterations_first: iterations,
        ..FitConfig::default()
    };

    let (factors, init, report) = fit_first_frame(&weights, &noise0, &target, &cfg)?;
    for (i, t) in report.terms.iter().enumerate().step_by((iterations / 10).max(1)) {
        println!("iter {i:5}  L={:.6}  D={:.6}  lambda={:.4}", t.total, t.fit, t.regularization);
    }
    let noise = mix_noise(&init.z0, &noise0, cfg.gamma)?;
    let (x, _) = generate(&weights, &noise, &compose_embedding(&factors)?)?;
    println!(
        "rank {rank}: {} factor entries, final D of the 8-bit factors {:.6}",
        (factors.m() + factors.n()) * rank,
        fit_distance(&x, &target, cfg.alpha)?
    );
    Ok(())
}
