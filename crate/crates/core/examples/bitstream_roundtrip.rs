//! Builds a stream by hand, serializes it, parses it back and prints the
//! record layout and payload bitrates.
//!
//!     cargo run --example bitstream_roundtrip

use promptlab::bitstream::{
    payload_bitrate, record_spans, KeyframeRecord, Record, SceneInitRecord, Stream, StreamHeader, HEADER_LEN,
};
use promptlab::fixtures::random_factors;
use promptlab::inversion::{quantize_u8, FitConfig};
use promptlab::toygen::{sample_noise, GeneratorConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let gen = GeneratorConfig::default();
    let fit = FitConfig::default();
    let header = StreamHeader::new(&gen, &fit, 30, 1)?;
    let key = |i: u32| Record::Keyframe(KeyframeRecord::from_factors(i, &random_factors(gen.m, gen.n, 8, 0.2, i as u64).quantized()));
    let records = vec![
        Record::SceneInit(SceneInitRecord {
            frame_index: 0,
            z0: quantize_u8(&sample_noise(&gen, 7).z),
        }),
        key(0),
        key(4),
        key(8),
    ];
    let stream = Stream { header, records };
    let bytes = stream.to_bytes()?;
    let back = Stream::from_bytes(&bytes)?;
    assert_eq!(back, stream);
    assert_eq!(back.to_bytes()?, bytes);

    println!("header: {HEADER_LEN} bytes, total {} bytes", bytes.len());
    for (r, (start, end)) in stream.records.iter().zip(record_spans(&stream.records)) {
        let len = end - start;
        let kind = match r {
            Record::SceneInit(_) => "scene-init",
            Record::Keyframe(_) => "keyframe",
        };
        println!("  {kind:10} frame {:2}  offset {start:6}  {len:5} bytes", r.frame_index());
    }
    for (m, n, r, k) in [(64, 16, 8, 4), (1024, 77, 8, 4), (1024, 77, 4, 8), (1024, 77, 32, 1)] {
        println!(
            "m={m:4} n={n:2} rank={r:2} K={k}: {:>9.0} bps",
            payload_bitrate(m, n, r, k, 30, 8)?
        );
    }
    Ok(())
}
