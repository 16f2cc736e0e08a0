//! Encodes a rank ladder, streams it over an emulated link with adaptive
//! rank selection at keyframes, and decodes what arrives.
//!
//!     cargo run --release --example abr_streaming -- [interval_ms]
//!
//! `interval_ms` spaces the trace's 1500-byte delivery opportunities
//! (default 40, about 300 kbps).

use promptlab::eval::MetricReport;
use promptlab::fixtures::translating_square;
use promptlab::inversion::FitConfig;
use promptlab::netsim::{LinkConfig, NetworkTrace};
use promptlab::receiver::decode_session;
use promptlab::sender::{encode_ladder, stream_session, SenderConfig};
use promptlab::toygen::GeneratorConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let interval_ms: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(40);
    let gen = GeneratorConfig::compact();
    let frames = translating_square(gen.image_h(), gen.image_w(), 60, 4, 1);
    let cfg = SenderConfig {
        ranks: vec![2, 4, 8, 16],
        interval: 4,
        fit: FitConfig {
            iterations_first: 600,
            iterations_subsequent: 120,
            ..FitConfig::default()
        },
        ..SenderConfig::default()
    };
    let (plan, ladder) = encode_ladder(&gen, &frames, &cfg)?;
    println!("{} keyframes", plan.keyframes.len());
    for v in &ladder {
        let q = MetricReport::compute(&frames, &v.reconstruction)?;
        println!(
            "  rank {:2}: {:>8.0} bps  sender-side PSNR {:.2} dB",
            v.rank,
            v.stream_bitrate(frames.len()),
            q.mean_psnr()
        );
    }

    let trace = NetworkTrace::periodic(interval_ms, 1000)?;
    let streams: Vec<_> = ladder.iter().map(|v| v.stream.clone()).collect();
    let log = stream_session(&streams, &trace, LinkConfig::default(), cfg.mtu)?;
    for (idx, rank, est) in &log.choices {
        match est {
            Some(e) => println!("  keyframe {idx:2}: rank {rank:2} (estimate {e:.0} bps)"),
            None => println!("  keyframe {idx:2}: rank {rank:2} (no estimate yet)"),
        }
    }
    let out = decode_session(&log.link.arrivals, log.num_frames)?;
    let q = MetricReport::compute(&frames, &out.frames)?;
    println!(
        "link {:.0} bps: {} packets, {} dropped; {}/{} frames decoded, mean PSNR {:.2} dB",
        trace.capacity_bps(1500),
        log.link.sent,
        log.link.drops.len(),
        out.decoded_count(),
        log.num_frames,
        q.mean_psnr()
    );
    if let Some(last) = out.ready_ms.iter().flatten().last() {
        println!("last frame ready at {last} ms");
    }
    Ok(())
}
