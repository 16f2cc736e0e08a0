//! Trace-replay link emulation.
//!
//! A trace is a list of millisecond timestamps; each grants one delivery
//! opportunity for one packet of up to `mtu` bytes. The trace repeats with a
//! period equal to its last timestamp. Packets wait in a drop-tail FIFO of
//! `queue_capacity` packets and arrive `delay_ms` after the opportunity that
//! serves them. Everything is integer milliseconds and fully deterministic.

use std::collections::VecDeque;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

pub const DEFAULT_MTU: usize = 1500;
pub const DEFAULT_QUEUE_CAPACITY: usize = 60;

#[derive(Debug, Error)]
pub enum NetsimError {
    #[error("reading trace: {0}")]
    Io(#[from] io::Error),
    #[error("trace is empty")]
    EmptyTrace,
    #[error("trace line {line}: {text:?} is not an unsigned integer")]
    NotInteger { line: usize, text: String },
    #[error("trace line {line}: timestamp {found} after {previous}")]
    NonMonotone { line: usize, previous: u64, found: u64 },
    #[error("trace has zero period (last timestamp is 0)")]
    ZeroPeriod,
    #[error("invalid link config: {0}")]
    InvalidConfig(String),
    #[error("packet {seq} is {size} bytes, larger than the {mtu}-byte MTU")]
    Oversize { seq: u64, size: usize, mtu: usize },
    #[error("send at {time} ms is earlier than the previous send at {previous} ms")]
    OutOfOrder { time: u64, previous: u64 },
}

/// Delivery-opportunity timestamps in milliseconds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkTrace {
    timestamps: Vec<u64>,
}

impl NetworkTrace {
    pub fn new(timestamps: Vec<u64>) -> Result<Self, NetsimError> {
        let last = *timestamps.last().ok_or(NetsimError::EmptyTrace)?;
        if let Some(i) = timestamps.windows(2).position(|w| w[1] < w[0]) {
            return Err(NetsimError::NonMonotone {
                line: i + 2,
                previous: timestamps[i],
                found: timestamps[i + 1],
            });
        }
        if last == 0 {
            return Err(NetsimError::ZeroPeriod);
        }
        Ok(Self { timestamps })
    }

    /// One opportunity every `interval_ms`, `count` times.
    pub fn periodic(interval_ms: u64, count: usize) -> Result<Self, NetsimError> {
        Self::new((1..=count as u64).map(|k| k * interval_ms).collect())
    }

    /// Parses one unsigned integer per line. Blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self, NetsimError> {
        let mut ts: Vec<u64> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let v: u64 = line.parse().map_err(|_| NetsimError::NotInteger {
                line: i + 1,
                text: line.to_string(),
            })?;
            if let Some(&prev) = ts.last() {
                if v < prev {
                    return Err(NetsimError::NonMonotone {
                        line: i + 1,
                        previous: prev,
                        found: v,
                    });
                }
            }
            ts.push(v);
        }
        Self::new(ts)
    }

    pub fn to_text(&self) -> String {
        self.timestamps.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn timestamps(&self) -> &[u64] {
        &self.timestamps
    }

    pub fn period_ms(&self) -> u64 {
        *self.timestamps.last().expect("non-empty")
    }

    /// Long-run capacity for `mtu`-byte packets.
    pub fn capacity_bps(&self, mtu: usize) -> f64 {
        self.timestamps.len() as f64 * mtu as f64 * 8.0 * 1000.0 / self.period_ms() as f64
    }

    /// Time of the `j`-th opportunity, counting across loops.
    pub fn opportunity(&self, j: u64) -> u64 {
        let len = self.timestamps.len() as u64;
        (j / len) * self.period_ms() + self.timestamps[(j % len) as usize]
    }

    /// Index of the first opportunity at or after `t`.
    pub fn first_at_or_after(&self, t: u64) -> u64 {
        let (p, len) = (self.period_ms(), self.timestamps.len() as u64);
        // Cycle c covers times in (c·p, (c+1)·p], ending on the last timestamp.
        let cycle = t.saturating_sub(1) / p;
        let base = cycle * p;
        let pos = self.timestamps.partition_point(|&x| base + x < t) as u64;
        cycle * len + pos
    }
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<NetworkTrace, NetsimError> {
    NetworkTrace::parse(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkConfig {
    pub delay_ms: u64,
    pub queue_capacity: usize,
    pub mtu: usize,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            delay_ms: 50,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            mtu: DEFAULT_MTU,
        }
    }
}

/// A slice of a byte stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub seq: u64,
    /// Position of the payload in the stream it was cut from.
    pub offset: u64,
    pub payload: Vec<u8>,
}

impl Packet {
    pub fn size(&self) -> usize {
        self.payload.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub sent_ms: u64,
    pub arrival_ms: u64,
    pub packet: Packet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropEvent {
    pub time_ms: u64,
    pub seq: u64,
    pub size: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LinkReport {
    pub sent: usize,
    pub arrivals: Vec<Delivery>,
    pub drops: Vec<DropEvent>,
    pub in_queue: Vec<Packet>,
}

impl LinkReport {
    pub fn delivered_bytes(&self) -> usize {
        self.arrivals.iter().map(|d| d.packet.size()).sum()
    }
}

/// An emulated one-way link that is fed incrementally.
#[derive(Debug, Clone)]
pub struct Link {
    trace: NetworkTrace,
    cfg: LinkConfig,
    queue: VecDeque<(u64, Packet)>,
    next_opportunity: u64,
    last_send: u64,
    report: LinkReport,
}

impl Link {
    pub fn new(trace: NetworkTrace, cfg: LinkConfig) -> Result<Self, NetsimError> {
        if cfg.queue_capacity == 0 {
            return Err(NetsimError::InvalidConfig("queue capacity must be >= 1".into()));
        }
        if cfg.mtu == 0 {
            return Err(NetsimError::InvalidConfig("MTU must be >= 1".into()));
        }
        Ok(Self {
            trace,
            cfg,
            queue: VecDeque::new(),
            next_opportunity: 0,
            last_send: 0,
            report: LinkReport::default(),
        })
    }

    pub fn config(&self) -> &LinkConfig {
        &self.cfg
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// Serves every opportunity strictly before `t`.
    pub fn advance(&mut self, t: u64) {
        loop {
            let at = self.trace.opportunity(self.next_opportunity);
            if at >= t {
                return;
            }
            let Some((sent_ms, packet)) = self.queue.pop_front() else {
                // Idle opportunities are lost.
                self.next_opportunity = self.next_opportunity.max(self.trace.first_at_or_after(t));
                return;
            };
            self.report.arrivals.push(Delivery {
                sent_ms,
                arrival_ms: at + self.cfg.delay_ms,
                packet,
            });
            self.next_opportunity += 1;
        }
    }

    /// Offers a packet at time `t`. It may use an opportunity at `t` itself.
    /// Returns whether it was queued.
    pub fn send(&mut self, t: u64, packet: Packet) -> Result<bool, NetsimError> {
        if packet.size() > self.cfg.mtu {
            return Err(NetsimError::Oversize {
                seq: packet.seq,
                size: packet.size(),
                mtu: self.cfg.mtu,
            });
        }
        if t < self.last_send {
            return Err(NetsimError::OutOfOrder {
                time: t,
                previous: self.last_send,
            });
        }
        self.last_send = t;
        self.advance(t);
        self.report.sent += 1;
        if self.queue.len() >= self.cfg.queue_capacity {
            self.report.drops.push(DropEvent {
                time_ms: t,
                seq: packet.seq,
                size: packet.size(),
            });
            return Ok(false);
        }
        if self.queue.is_empty() {
            self.next_opportunity = self.next_opportunity.max(self.trace.first_at_or_after(t));
        }
        self.queue.push_back((t, packet));
        Ok(true)
    }

    /// Deliveries recorded so far.
    pub fn arrivals(&self) -> &[Delivery] {
        &self.report.arrivals
    }

    /// Stops at `horizon` (serving opportunities strictly before it), or
    /// drains the queue when `horizon` is `None`.
    pub fn finish(mut self, horizon: Option<u64>) -> LinkReport {
        match horizon {
            Some(t) => self.advance(t),
            None => {
                while !self.queue.is_empty() {
                    let at = self.trace.opportunity(self.next_opportunity);
                    self.advance(at + 1);
                }
            }
        }
        self.report.in_queue = self.queue.into_iter().map(|(_, p)| p).collect();
        self.report
    }
}

/// Replays a time-sorted send schedule through a link.
pub fn run_link(
    schedule: &[(u64, Packet)],
    trace: &NetworkTrace,
    link: LinkConfig,
    horizon: Option<u64>,
) -> Result<LinkReport, NetsimError> {
    let mut l = Link::new(trace.clone(), link)?;
    for (t, p) in schedule {
        l.send(*t, p.clone())?;
    }
    Ok(l.finish(horizon))
}

/// Delivered bits per second in consecutive windows covering
/// `[0, horizon_ms)`.
pub fn measure_throughput(arrivals: &[Delivery], window_ms: u64, horizon_ms: u64) -> Vec<f64> {
    assert!(window_ms > 0, "window must be positive");
    let bins = horizon_ms.div_ceil(window_ms) as usize;
    let mut bytes = vec![0u64; bins];
    for d in arrivals {
        let b = (d.arrival_ms / window_ms) as usize;
        if b < bins {
            bytes[b] += d.packet.size() as u64;
        }
    }
    let secs = window_ms as f64 / 1000.0;
    bytes.into_iter().map(|b| b as f64 * 8.0 / secs).collect()
}

/// `seq,sent_ms,arrival_ms,size_bytes`
pub fn write_arrivals_csv(mut w: impl Write, arrivals: &[Delivery]) -> io::Result<()> {
    writeln!(w, "seq,sent_ms,arrival_ms,size_bytes")?;
    for d in arrivals {
        writeln!(w, "{},{},{},{}", d.packet.seq, d.sent_ms, d.arrival_ms, d.packet.size())?;
    }
    Ok(())
}

/// `seq,time_ms,size_bytes`
pub fn write_drops_csv(mut w: impl Write, drops: &[DropEvent]) -> io::Result<()> {
    writeln!(w, "seq,time_ms,size_bytes")?;
    for d in drops {
        writeln!(w, "{},{},{}", d.seq, d.time_ms, d.size)?;
    }
    Ok(())
}
