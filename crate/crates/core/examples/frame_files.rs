//! Renders frames from the toy generator, writes them as PPM and raw f32,
//! reads them back and scores the PPM copies against the originals.
//!
//!     cargo run --example frame_files -- [out_dir]

use promptlab::eval::{read_frames, write_frames, FrameFormat, MetricReport};
use promptlab::fixtures::planted_video;
use promptlab::toygen::{init_weights, sample_noise, GeneratorConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("promptlab_frames"));
    let gen = GeneratorConfig::default();
    let weights = init_weights(&gen)?;
    let frames = planted_video(&weights, &sample_noise(&gen, 1), &sample_noise(&gen, 2), 0.95, 8, 4, 8, 3)?;

    write_frames(&out.join("ppm"), &frames, FrameFormat::Ppm)?;
    write_frames(&out.join("raw"), &frames, FrameFormat::RawF32)?;
    let raw = read_frames(&out.join("raw"))?;
    assert!(raw.iter().zip(&frames).all(|(a, b)| a.pixels.bitwise_eq(&b.pixels)));
    let ppm = read_frames(&out.join("ppm"))?;
    let report = MetricReport::compute(&frames, &ppm)?;
    println!("wrote {} frames to {}", frames.len(), out.display());
    println!("raw copies are bit-exact; 8-bit PPM copies average {:.2} dB PSNR", report.mean_psnr());
    Ok(())
}
