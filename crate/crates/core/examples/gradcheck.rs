//! Checks reverse-mode gradients of the fitting objective against central
//! differences on a few small seeded configurations.
//!
//!     cargo run --example gradcheck

use promptlab::fixtures::{random_factors, translating_square};
use promptlab::inversion::{loss_gradient_check, mix_noise, FitConfig};
use promptlab::toygen::{encode, init_weights, sample_noise, GeneratorConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for seed in 0..5u64 {
        let gen = GeneratorConfig {
            seed,
            m: 8,
            n: 4,
            h: 4,
            w: 4,
            c_lat: 2,
            c_hid: 3,
            upsample: 2,
        };
        let weights = init_weights(&gen)?;
        let target = translating_square(8, 8, 1, 3, 1).remove(0);
        let noise = mix_noise(&encode(&weights, &target)?, &sample_noise(&gen, seed), 0.95)?;
        let factors = random_factors(gen.m, gen.n, 2, 0.3, seed + 100);
        let err = loss_gradient_check(&weights, &target, &noise, &factors, &FitConfig::default(), 1e-3)?;
        println!("seed {seed}: max relative error {err:.2e}");
    }
    Ok(())
}
