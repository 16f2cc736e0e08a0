//! Replays a bursty sender over a constant-rate trace and reports delivered
//! throughput, queueing delay and drop-tail losses.
//!
//!     cargo run --example trace_replay -- [trace.txt]

use promptlab::netsim::{load_trace, measure_throughput, run_link, LinkConfig, NetworkTrace, Packet};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // 1 Mbps: one 1500-byte opportunity every 12 ms.
    let trace = match std::env::args().nth(1) {
        Some(path) => load_trace(path)?,
        None => NetworkTrace::periodic(12, 1000)?,
    };
    let cfg = LinkConfig::default();
    println!("trace capacity {:.0} bps, period {} ms", trace.capacity_bps(cfg.mtu), trace.period_ms());

    // 100 packets every 500 ms: 2.4 Mbps offered in bursts.
    let schedule: Vec<(u64, Packet)> = (0..2000u64)
        .map(|i| {
            let t = (i / 100) * 500;
            (t, Packet { seq: i, offset: i * 1500, payload: vec![0; 1500] })
        })
        .collect();
    let horizon = 10_000;
    let report = run_link(&schedule, &trace, cfg, Some(horizon))?;
    let rates = measure_throughput(&report.arrivals, 1000, horizon);
    let delay: Vec<u64> = report.arrivals.iter().map(|d| d.arrival_ms - d.sent_ms).collect();

    println!(
        "sent {}  delivered {}  dropped {}  still queued {}",
        report.sent,
        report.arrivals.len(),
        report.drops.len(),
        report.in_queue.len()
    );
    println!("per-second delivered bps: {:?}", rates.iter().map(|r| r.round()).collect::<Vec<_>>());
    println!(
        "one-way delay ms: min {} max {}",
        delay.iter().min().unwrap_or(&0),
        delay.iter().max().unwrap_or(&0)
    );
    Ok(())
}
