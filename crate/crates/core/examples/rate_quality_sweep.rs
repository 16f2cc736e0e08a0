//! Rate–quality sweep over ranks and keyframe intervals on a moving square,
//! written as CSV to stdout.
//!
//!     cargo run --release --example rate_quality_sweep > sweep.csv

use promptlab::eval::{sweep, write_sweep_csv};
use promptlab::fixtures::translating_square;
use promptlab::inversion::FitConfig;
use promptlab::sender::SenderConfig;
use promptlab::toygen::GeneratorConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let gen = GeneratorConfig::compact();
    let frames = translating_square(gen.image_h(), gen.image_w(), 9, 4, 1);
    let cfg = SenderConfig {
        fit: FitConfig {
            iterations_first: 800,
            iterations_subsequent: 200,
            ..FitConfig::default()
        },
        ..SenderConfig::default()
    };
    let rows = sweep(&frames, &gen, &[2, 4, 8, 16], &[1, 2, 4, 8], &cfg)?;
    write_sweep_csv(std::io::stdout().lock(), &rows)?;
    Ok(())
}
