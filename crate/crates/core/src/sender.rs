//! Keyframe planning, rank-ladder encoding, bandwidth estimation, variant
//! selection and packetization.

use std::io::{self, Write};

use log::info;
use rayon::prelude::*;
use thiserror::Error;

use crate::bitstream::{self, BitstreamError, KeyframeRecord, Record, SceneInitRecord, Stream, StreamHeader};
use crate::inversion::{fit_first_frame, fit_gop, FitConfig, FitReport, InversionError, PromptFactors};
use crate::netsim::{Link, LinkConfig, LinkReport, NetsimError, NetworkTrace, Packet, DEFAULT_MTU};
use crate::receiver::{Decoder, KeyframeState, ReceiverError};
use crate::tensor::TensorError;
use crate::toygen::{self, GenError, GeneratorConfig, ImageFrame, LatentFrame};

pub const MIN_MTU: usize = 64;
/// Trailing window of the bandwidth estimator.
pub const ESTIMATOR_WINDOW_S: f64 = 5.0;

#[derive(Debug, Error)]
pub enum SenderError {
    #[error("invalid sender config: {0}")]
    InvalidConfig(String),
    #[error("no frames")]
    NoFrames,
    #[error("frame {position} carries index {found}")]
    FrameIndex { position: usize, found: u32 },
    #[error("no delivery samples in the estimator window")]
    EmptyWindow,
    #[error("empty ladder")]
    EmptyLadder,
    #[error("ladder bitrates must be strictly increasing")]
    UnsortedLadder,
    #[error("ladder variants disagree: {0}")]
    LadderMismatch(String),
    #[error("fitting keyframe {frame} at rank {rank}: {source}")]
    Fit {
        frame: u32,
        rank: usize,
        #[source]
        source: InversionError,
    },
    #[error(transparent)]
    Bitstream(#[from] BitstreamError),
    #[error(transparent)]
    Receiver(#[from] ReceiverError),
    #[error(transparent)]
    Netsim(#[from] NetsimError),
    #[error(transparent)]
    Generator(#[from] GenError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SenderConfig {
    /// Keyframe interval `K`.
    pub interval: usize,
    /// Scene-change threshold `τ` on the mean squared latent distance.
    pub scene_threshold: f32,
    /// Ladder ranks, ascending.
    pub ranks: Vec<usize>,
    pub mtu: usize,
    pub fps: u8,
    pub noise_seed: u64,
    pub fit: FitConfig,
}

impl Default for SenderConfig {
    fn default() -> Self {
        Self {
            interval: 4,
            scene_threshold: 0.1,
            ranks: vec![4, 8, 16, 32],
            mtu: DEFAULT_MTU,
            fps: 30,
            noise_seed: 1,
            fit: FitConfig::default(),
        }
    }
}

impl SenderConfig {
    pub fn validate(&self) -> Result<(), SenderError> {
        let bad = |s: String| Err(SenderError::InvalidConfig(s));
        if self.interval == 0 {
            return bad("keyframe interval must be >= 1".into());
        }
        if !(self.scene_threshold > 0.0) {
            return bad(format!("scene threshold {} must be > 0", self.scene_threshold));
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return bad("ranks must be non-empty and >= 1".into());
        }
        if self.ranks.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("ranks {:?} are not strictly ascending", self.ranks));
        }
        if self.mtu < MIN_MTU {
            return bad(format!("MTU {} below {MIN_MTU}", self.mtu));
        }
        if self.fps == 0 {
            return bad("fps must be >= 1".into());
        }
        Ok(())
    }
}

/// `mean((Z_t - Z_prev)²) > τ`.
pub fn detect_scene_change(z_t: &LatentFrame, z_prev: &LatentFrame, tau: f32) -> Result<bool, SenderError> {
    Ok(latent_distance(z_t, z_prev)? > tau)
}

pub fn latent_distance(a: &LatentFrame, b: &LatentFrame) -> Result<f32, SenderError> {
    Ok(a.z.zip_map(&b.z, |x, y| (x - y) * (x - y))?.mean())
}

/// Scene-start flag per frame from encoder latents. Frame 0 always starts
/// a scene.
pub fn scene_flags(weights: &toygen::GeneratorWeights, frames: &[ImageFrame], tau: f32) -> Result<Vec<bool>, SenderError> {
    let latents = frames
        .iter()
        .map(|f| toygen::encode(weights, f))
        .collect::<Result<Vec<_>, _>>()?;
    let mut flags = vec![true; frames.len()];
    for i in 1..frames.len() {
        flags[i] = detect_scene_change(&latents[i], &latents[i - 1], tau)?;
    }
    Ok(flags)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KeyframeKind {
    SceneStart,
    Periodic,
    PreSceneFinal,
}

impl KeyframeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SceneStart => "scene_start",
            Self::Periodic => "periodic",
            Self::PreSceneFinal => "pre_scene_final",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyframePlan {
    pub num_frames: usize,
    pub keyframes: Vec<(u32, KeyframeKind)>,
}

impl KeyframePlan {
    pub fn indices(&self) -> Vec<u32> {
        self.keyframes.iter().map(|k| k.0).collect()
    }

    /// `(a, b)` for every GOP `(a, b]` within a scene.
    pub fn gops(&self) -> Vec<(u32, u32)> {
        self.keyframes
            .windows(2)
            .filter(|w| w[1].1 != KeyframeKind::SceneStart)
            .map(|w| (w[0].0, w[1].0))
            .collect()
    }
}

/// Keyframes at local indices `0, K, 2K, …` of each scene, plus each
/// scene's last frame.
pub fn plan_keyframes(num_frames: usize, k: usize, scene_flags: &[bool]) -> Result<KeyframePlan, SenderError> {
    if num_frames == 0 {
        return Err(SenderError::NoFrames);
    }
    if k == 0 {
        return Err(SenderError::InvalidConfig("keyframe interval must be >= 1".into()));
    }
    if scene_flags.len() != num_frames {
        return Err(SenderError::InvalidConfig(format!(
            "{} scene flags for {num_frames} frames",
            scene_flags.len()
        )));
    }
    let mut starts: Vec<usize> = (1..num_frames).filter(|&i| scene_flags[i]).collect();
    starts.insert(0, 0);
    let mut keyframes = Vec::new();
    for (s, &start) in starts.iter().enumerate() {
        let end = starts.get(s + 1).copied().unwrap_or(num_frames);
        keyframes.push((start as u32, KeyframeKind::SceneStart));
        let mut i = start + k;
        while i < end {
            keyframes.push((i as u32, KeyframeKind::Periodic));
            i += k;
        }
        if keyframes.last().expect("pushed").0 as usize != end - 1 {
            keyframes.push(((end - 1) as u32, KeyframeKind::PreSceneFinal));
        }
    }
    Ok(KeyframePlan { num_frames, keyframes })
}

/// Harmonic mean of the per-second delivery rates in `(now - 5 s, now]`.
/// Seconds are counted back from `now`; seconds without deliveries are not
/// samples.
pub fn estimate_bandwidth(delivery_log: &[(f64, usize)], now_s: f64) -> Result<f64, SenderError> {
    let bins = ESTIMATOR_WINDOW_S as usize;
    let mut bytes = vec![0usize; bins];
    let mut seen = vec![false; bins];
    for &(t, b) in delivery_log {
        let age = now_s - t;
        if (0.0..ESTIMATOR_WINDOW_S).contains(&age) {
            let i = age.floor() as usize;
            bytes[i] += b;
            seen[i] = true;
        }
    }
    let rates: Vec<f64> = (0..bins).filter(|&i| seen[i]).map(|i| bytes[i] as f64 * 8.0).collect();
    if rates.is_empty() || rates.contains(&0.0) {
        return Err(SenderError::EmptyWindow);
    }
    Ok(rates.len() as f64 / rates.iter().map(|r| 1.0 / r).sum::<f64>())
}

/// The rank whose bitrate is closest to `estimate`; ties go to the lower
/// bitrate.
pub fn select_variant(estimate: f64, ladder: &[(usize, f64)]) -> Result<usize, SenderError> {
    let first = ladder.first().ok_or(SenderError::EmptyLadder)?;
    if ladder.windows(2).any(|w| w[0].1 >= w[1].1) {
        return Err(SenderError::UnsortedLadder);
    }
    let mut best = *first;
    for &(rank, rate) in &ladder[1..] {
        if (rate - estimate).abs() < (best.1 - estimate).abs() {
            best = (rank, rate);
        }
    }
    Ok(best.0)
}

/// Cuts `bytes` into packets of at most `mtu` bytes, numbered from
/// `first_seq` and positioned from `first_offset`.
pub fn packetize_at(bytes: &[u8], mtu: usize, first_seq: u64, first_offset: u64) -> Result<Vec<Packet>, SenderError> {
    if mtu < MIN_MTU {
        return Err(SenderError::InvalidConfig(format!("MTU {mtu} below {MIN_MTU}")));
    }
    Ok(bytes
        .chunks(mtu)
        .enumerate()
        .map(|(i, c)| Packet {
            seq: first_seq + i as u64,
            offset: first_offset + (i * mtu) as u64,
            payload: c.to_vec(),
        })
        .collect())
}

pub fn packetize(bytes: &[u8], mtu: usize) -> Result<Vec<Packet>, SenderError> {
    packetize_at(bytes, mtu, 0, 0)
}

/// One rank of the ladder.
#[derive(Debug, Clone)]
pub struct Variant {
    pub rank: usize,
    pub stream: Stream,
    /// Frames the receiver will produce from `stream`, decoded on the sender.
    pub reconstruction: Vec<ImageFrame>,
    pub reports: Vec<(u32, FitReport)>,
}

impl Variant {
    /// Mean bitrate of the serialized stream over the video's duration.
    pub fn stream_bitrate(&self, num_frames: usize) -> f64 {
        stream_bitrate(&self.stream, num_frames)
    }
}

pub fn stream_bitrate(stream: &Stream, num_frames: usize) -> f64 {
    stream.encoded_len() as f64 * 8.0 * stream.header.fps as f64 / num_frames as f64
}

fn check_frames(frames: &[ImageFrame], gen: &GeneratorConfig) -> Result<(), SenderError> {
    if frames.is_empty() {
        return Err(SenderError::NoFrames);
    }
    for (i, f) in frames.iter().enumerate() {
        if f.frame_index as usize != i {
            return Err(SenderError::FrameIndex {
                position: i,
                found: f.frame_index,
            });
        }
        toygen::check_shape("frame", f.pixels.shape(), &gen.image_shape())?;
    }
    Ok(())
}

/// Fits and serializes one rank, reconstructing each GOP through the
/// receiver's decoder so the next GOP is fitted from exactly the latent the
/// receiver will have.
pub fn encode_variant(
    gen: &GeneratorConfig,
    frames: &[ImageFrame],
    plan: &KeyframePlan,
    cfg: &SenderConfig,
    rank: usize,
) -> Result<Variant, SenderError> {
    cfg.validate()?;
    check_frames(frames, gen)?;
    let fit = FitConfig {
        rank,
        ..cfg.fit
    };
    fit.validate(gen).map_err(|source| SenderError::Fit { frame: 0, rank, source })?;
    let header = StreamHeader::new(gen, &fit, cfg.fps, cfg.noise_seed)?;
    let dec = Decoder::new(&header)?;
    let mut records = Vec::new();
    let mut reconstruction = Vec::with_capacity(frames.len());
    let mut reports = Vec::new();
    let mut state: Option<(KeyframeState, PromptFactors)> = None;

    for &(index, kind) in &plan.keyframes {
        let fit_err = |source| SenderError::Fit { frame: index, rank, source };
        let key = if kind == KeyframeKind::SceneStart {
            let (factors, scene, report) =
                fit_first_frame(&dec.weights, &dec.noise0, &frames[index as usize], &fit).map_err(fit_err)?;
            let init = SceneInitRecord {
                frame_index: index,
                z0: scene.codes,
            };
            let key = KeyframeRecord::from_factors(index, &factors);
            let (x, st) = dec.scene_start(&init, &key)?;
            reconstruction.push(x);
            records.push(Record::SceneInit(init));
            reports.push((index, report));
            state = Some((st, key.factors().map_err(fit_err)?));
            key
        } else {
            let (st, prev) = state.as_ref().expect("plan opens with a scene start");
            let span = &frames[st.index as usize..=index as usize];
            let (factors, report) = fit_gop(&dec.weights, &dec.noise0, span, prev, &st.z, &fit).map_err(fit_err)?;
            let key = KeyframeRecord::from_factors(index, &factors);
            let (xs, next) = dec.gop(st, &key)?;
            reconstruction.extend(xs);
            reports.push((index, report));
            state = Some((next, key.factors().map_err(fit_err)?));
            key
        };
        info!("rank {rank}: keyframe {index} ({})", kind.as_str());
        records.push(Record::Keyframe(key));
    }
    let stream = Stream { header, records };
    // Serializing validates ordering and shapes.
    stream.to_bytes()?;
    Ok(Variant {
        rank,
        stream,
        reconstruction,
        reports,
    })
}

/// Plans keyframes from scene detection and encodes every ladder rank.
/// Ranks are fitted in parallel.
pub fn encode_ladder(
    gen: &GeneratorConfig,
    frames: &[ImageFrame],
    cfg: &SenderConfig,
) -> Result<(KeyframePlan, Vec<Variant>), SenderError> {
    cfg.validate()?;
    check_frames(frames, gen)?;
    let weights = toygen::init_weights(gen)?;
    let flags = scene_flags(&weights, frames, cfg.scene_threshold)?;
    let plan = plan_keyframes(frames.len(), cfg.interval, &flags)?;
    let variants = cfg
        .ranks
        .par_iter()
        .map(|&r| encode_variant(gen, frames, &plan, cfg, r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((plan, variants))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduledPacket {
    pub seq: u64,
    pub send_ms: u64,
    pub size: usize,
}

/// What the sender did during one streaming session.
#[derive(Debug, Clone)]
pub struct SessionLog {
    pub num_frames: usize,
    /// The composed stream: header plus each keyframe's records from the
    /// variant selected at that keyframe.
    pub stream: Stream,
    pub schedule: Vec<ScheduledPacket>,
    /// `(keyframe index, selected rank, estimate bps if any)`.
    pub choices: Vec<(u32, usize, Option<f64>)>,
    pub link: LinkReport,
}

/// Capture time of frame `i` in whole milliseconds.
pub fn frame_time_ms(i: u32, fps: u8) -> u64 {
    i as u64 * 1000 / fps as u64
}

/// Streams a ladder over an emulated link.
///
/// Each keyframe's records are sent in one burst at the keyframe's capture
/// time. Before each burst the sender estimates bandwidth from deliveries
/// seen so far and picks the variant with the closest mean bitrate; it
/// starts on the highest rank, since a delivery-based estimate can only
/// reveal capacity the sender is already using. The link is drained at
/// the end.
pub fn stream_session(
    variants: &[Stream],
    trace: &NetworkTrace,
    link_cfg: LinkConfig,
    mtu: usize,
) -> Result<SessionLog, SenderError> {
    let first = variants.first().ok_or(SenderError::EmptyLadder)?;
    let header = first.header;
    let keys: Vec<u32> = first
        .records
        .iter()
        .filter_map(|r| match r {
            Record::Keyframe(k) => Some(k.frame_index),
            _ => None,
        })
        .collect();
    let num_frames = keys.last().map(|&k| k as usize + 1).ok_or(SenderError::NoFrames)?;
    for v in variants {
        if v.header != header {
            return Err(SenderError::LadderMismatch("stream headers differ".into()));
        }
        let layout: Vec<(bool, u32)> = v.records.iter().map(|r| (matches!(r, Record::SceneInit(_)), r.frame_index())).collect();
        let want: Vec<(bool, u32)> = first.records.iter().map(|r| (matches!(r, Record::SceneInit(_)), r.frame_index())).collect();
        if layout != want {
            return Err(SenderError::LadderMismatch("keyframe layouts differ".into()));
        }
    }
    let mut ladder: Vec<(usize, f64, usize)> = variants
        .iter()
        .enumerate()
        .map(|(i, v)| (rank_of(v), stream_bitrate(v, num_frames), i))
        .collect();
    ladder.sort_by(|a, b| a.1.total_cmp(&b.1));
    let rates: Vec<(usize, f64)> = ladder.iter().map(|&(r, b, _)| (r, b)).collect();

    let mut link = Link::new(trace.clone(), link_cfg)?;
    let mut bytes = Vec::new();
    let mut schedule = Vec::new();
    let mut seq = 0u64;
    let mut send = |link: &mut Link, t: u64, chunk: &[u8], bytes: &mut Vec<u8>| -> Result<(), SenderError> {
        for p in packetize_at(chunk, mtu, seq, bytes.len() as u64)? {
            schedule.push(ScheduledPacket {
                seq: p.seq,
                send_ms: t,
                size: p.size(),
            });
            link.send(t, p)?;
            seq += 1;
        }
        bytes.extend_from_slice(chunk);
        Ok(())
    };

    send(&mut link, 0, &bitstream::serialize(&header, &[])?, &mut bytes)?;

    let mut choice = ladder[ladder.len() - 1].2;
    let mut choices = Vec::new();
    let mut records = Vec::new();
    let mut i = 0;
    while i < first.records.len() {
        let group = if matches!(first.records[i], Record::SceneInit(_)) { 2 } else { 1 };
        let index = first.records[i].frame_index();
        let t = frame_time_ms(index, header.fps);
        link.advance(t);
        let log: Vec<(f64, usize)> = link
            .arrivals()
            .iter()
            .filter(|d| d.arrival_ms <= t)
            .map(|d| (d.arrival_ms as f64 / 1000.0, d.packet.size()))
            .collect();
        let estimate = estimate_bandwidth(&log, t as f64 / 1000.0).ok();
        if let Some(e) = estimate {
            let rank = select_variant(e, &rates)?;
            choice = ladder.iter().find(|l| l.0 == rank).expect("rank from ladder").2;
        }
        choices.push((index, rank_of(&variants[choice]), estimate));
        let recs = &variants[choice].records[i..i + group];
        let chunk: Vec<u8> = recs.iter().flat_map(Record::to_bytes).collect();
        send(&mut link, t, &chunk, &mut bytes)?;
        records.extend_from_slice(recs);
        i += group;
    }
    let stream = Stream { header, records };
    debug_assert_eq!(stream.to_bytes().ok().as_deref(), Some(bytes.as_slice()));
    Ok(SessionLog {
        num_frames,
        stream,
        schedule,
        choices,
        link: link.finish(None),
    })
}

fn rank_of(s: &Stream) -> usize {
    s.records
        .iter()
        .find_map(|r| match r {
            Record::Keyframe(k) => Some(k.rank()),
            _ => None,
        })
        .unwrap_or(0)
}

/// `seq,send_time_ms,size_bytes`
pub fn write_schedule_csv(mut w: impl Write, schedule: &[ScheduledPacket]) -> io::Result<()> {
    writeln!(w, "seq,send_time_ms,size_bytes")?;
    for p in schedule {
        writeln!(w, "{},{},{}", p.seq, p.send_ms, p.size)?;
    }
    Ok(())
}
