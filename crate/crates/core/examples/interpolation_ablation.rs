//! Compares interpolating between keyframes in prompt space against fitting
//! keyframe latents directly and interpolating those, on moving and static
//! scenes.
//!
//!     cargo run --release --example interpolation_ablation

use promptlab::eval::ablate_interpolation;
use promptlab::fixtures::{static_scene, translating_square};
use promptlab::inversion::FitConfig;
use promptlab::sender::SenderConfig;
use promptlab::toygen::GeneratorConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let gen = GeneratorConfig::compact();
    let (h, w) = (gen.image_h(), gen.image_w());
    let cfg = SenderConfig {
        fit: FitConfig {
            iterations_first: 2000,
            iterations_subsequent: 400,
            ..FitConfig::default()
        },
        ..SenderConfig::default()
    };
    for (name, frames) in [
        ("moving", translating_square(h, w, 9, 4, 1)),
        ("static", static_scene(h, w, 9, 4)),
    ] {
        let r = ablate_interpolation(&frames, &gen, 8, 8, &cfg)?;
        println!(
            "{name}: {} intermediate frames, mean D prompt-space {:.6} vs latent-space {:.6}",
            r.intermediate_frames, r.prompt_loss, r.latent_loss
        );
    }
    Ok(())
}
