//! Stream decoding: prompt interpolation between keyframes and sequential
//! generation, plus session decoding from timed packet arrivals.

use std::io::{self, Write};

use thiserror::Error;

use crate::bitstream::{
    self, BitstreamError, KeyframeRecord, Record, SceneInitRecord, StreamHeader, HEADER_LEN,
    KEYFRAME_FIXED_LEN, SCENE_INIT_FIXED_LEN, TAG_KEYFRAME, TAG_SCENE_INIT,
};
use crate::inversion::{compose_embedding, interpolation_weights, mix_noise, InversionError};
use crate::netsim::Delivery;
use crate::tensor::{Tensor, TensorError};
use crate::toygen::{generate, init_weights, sample_noise, Embedding, GenError, GeneratorWeights, ImageFrame, LatentFrame};

#[derive(Debug, Error)]
pub enum ReceiverError {
    #[error("interpolation position t = {t} outside [0, {k}]")]
    InterpolationRange { t: usize, k: usize },
    #[error("keyframe {b} does not follow keyframe {a}")]
    BadGop { a: u32, b: u32 },
    #[error("scene at frame {frame}: no scene-init record")]
    SceneInitMissing { frame: u32 },
    #[error("stream header not received")]
    HeaderLost,
    #[error(transparent)]
    Bitstream(#[from] BitstreamError),
    #[error(transparent)]
    Inversion(#[from] InversionError),
    #[error(transparent)]
    Generator(#[from] GenError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `(1 - t/K)·c_a + (t/K)·c_b`.
pub fn interpolate_prompt(c_a: &Embedding, c_b: &Embedding, t: usize, k: usize) -> Result<Embedding, ReceiverError> {
    if k == 0 || t > k {
        return Err(ReceiverError::InterpolationRange { t, k });
    }
    let (wa, wb) = interpolation_weights(t, k);
    Ok(Embedding(c_a.0.zip_map(&c_b.0, |a, b| wa * a + wb * b)?))
}

/// Decoder position after a keyframe: its prompt, index and generated latent.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeState {
    pub c: Embedding,
    pub index: u32,
    pub z: LatentFrame,
}

/// Everything needed to generate the frames `(index_a, index_b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GopState {
    pub c_a: Embedding,
    pub index_a: u32,
    pub c_b: Embedding,
    pub index_b: u32,
    /// Latent of frame `index_a`.
    pub z_entry: LatentFrame,
}

impl GopState {
    pub fn k(&self) -> usize {
        (self.index_b - self.index_a) as usize
    }
}

/// Generates frames `(i - K, i]` and returns them with the final latent.
pub fn generate_gop(
    state: &GopState,
    weights: &GeneratorWeights,
    gamma: f32,
    noise0: &LatentFrame,
) -> Result<(Vec<ImageFrame>, LatentFrame), ReceiverError> {
    if state.index_b <= state.index_a {
        return Err(ReceiverError::BadGop {
            a: state.index_a,
            b: state.index_b,
        });
    }
    let k = state.k();
    let mut z = state.z_entry.clone();
    let mut frames = Vec::with_capacity(k);
    for t in 1..=k {
        let c = interpolate_prompt(&state.c_a, &state.c_b, t, k)?;
        let noise = LatentFrame {
            frame_index: state.index_a + t as u32,
            ..mix_noise(&z, noise0, gamma)?
        };
        let (x, zt) = generate(weights, &noise, &c)?;
        frames.push(x);
        z = zt;
    }
    Ok((frames, z))
}

/// Generator, fixed noise and `γ` reconstructed from a stream header.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub weights: GeneratorWeights,
    pub noise0: LatentFrame,
    pub gamma: f32,
}

impl Decoder {
    pub fn new(header: &StreamHeader) -> Result<Self, ReceiverError> {
        let gen = header.generator_config();
        let weights = init_weights(&gen)?;
        Ok(Self {
            noise0: sample_noise(&gen, header.noise_seed),
            weights,
            gamma: header.gamma,
        })
    }

    /// Decodes a scene's opening frame from its scene-init and keyframe.
    pub fn scene_start(
        &self,
        init: &SceneInitRecord,
        key: &KeyframeRecord,
    ) -> Result<(ImageFrame, KeyframeState), ReceiverError> {
        let c = compose_embedding(&key.factors()?)?;
        let z0 = LatentFrame {
            z: init.z0.dequantize(),
            frame_index: init.frame_index,
        };
        let noise = LatentFrame {
            frame_index: key.frame_index,
            ..mix_noise(&z0, &self.noise0, self.gamma)?
        };
        let (x, z) = generate(&self.weights, &noise, &c)?;
        Ok((
            x,
            KeyframeState {
                c,
                index: key.frame_index,
                z,
            },
        ))
    }

    /// Decodes the GOP closed by `key`.
    pub fn gop(&self, prev: &KeyframeState, key: &KeyframeRecord) -> Result<(Vec<ImageFrame>, KeyframeState), ReceiverError> {
        let c_b = compose_embedding(&key.factors()?)?;
        let state = GopState {
            c_a: prev.c.clone(),
            index_a: prev.index,
            c_b,
            index_b: key.frame_index,
            z_entry: prev.z.clone(),
        };
        let (frames, z) = generate_gop(&state, &self.weights, self.gamma, &self.noise0)?;
        Ok((
            frames,
            KeyframeState {
                c: state.c_b,
                index: key.frame_index,
                z,
            },
        ))
    }

    /// Decodes a complete, valid record list into consecutive frames from
    /// the first record's index to the last.
    pub fn decode_records(&self, records: &[Record]) -> Result<Vec<ImageFrame>, ReceiverError> {
        let mut frames = Vec::new();
        let mut pending: Option<&SceneInitRecord> = None;
        let mut state: Option<KeyframeState> = None;
        for rec in records {
            match rec {
                Record::SceneInit(s) => {
                    pending = Some(s);
                    state = None;
                }
                Record::Keyframe(k) => {
                    if let Some(init) = pending.take() {
                        let (x, st) = self.scene_start(init, k)?;
                        frames.push(x);
                        state = Some(st);
                    } else if let Some(prev) = &state {
                        let (xs, st) = self.gop(prev, k)?;
                        frames.extend(xs);
                        state = Some(st);
                    } else {
                        return Err(ReceiverError::SceneInitMissing { frame: k.frame_index });
                    }
                }
            }
        }
        Ok(frames)
    }
}

/// Parses and decodes a whole `.prms` byte string.
pub fn decode_stream(bytes: &[u8]) -> Result<(StreamHeader, Vec<ImageFrame>), ReceiverError> {
    let (header, records) = bitstream::parse(bytes)?;
    let frames = Decoder::new(&header)?.decode_records(&records)?;
    Ok((header, frames))
}

/// A record as seen by the receiver after loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedRecord {
    pub tag: u8,
    pub frame_index: u32,
    /// `None` when any byte of the record was lost.
    pub record: Option<Record>,
    /// Arrival of the record's last byte, when complete.
    pub ready_ms: Option<u64>,
}

/// Byte buffer rebuilt from packet offsets with per-byte arrival times.
struct Assembly {
    data: Vec<u8>,
    arrival: Vec<Option<u64>>,
}

impl Assembly {
    fn new(arrivals: &[Delivery]) -> Self {
        let len = arrivals
            .iter()
            .map(|d| d.packet.offset as usize + d.packet.size())
            .max()
            .unwrap_or(0);
        let mut data = vec![0u8; len];
        let mut arrival = vec![None; len];
        for d in arrivals {
            let at = d.packet.offset as usize;
            data[at..at + d.packet.size()].copy_from_slice(&d.packet.payload);
            for slot in &mut arrival[at..at + d.packet.size()] {
                *slot = Some(slot.map_or(d.arrival_ms, |t: u64| t.min(d.arrival_ms)));
            }
        }
        Self { data, arrival }
    }

    /// Latest arrival over `[a, b)`, or `None` if any byte is missing.
    fn complete(&self, a: usize, b: usize) -> Option<u64> {
        if b > self.data.len() {
            return None;
        }
        self.arrival[a..b].iter().try_fold(0u64, |acc, t| t.map(|t| acc.max(t)))
    }
}

/// Walks the records of a partially received stream. Walking stops where a
/// record's fixed-size prefix is missing, since its length is then unknown.
pub fn received_records(arrivals: &[Delivery]) -> Result<(StreamHeader, Vec<ReceivedRecord>), ReceiverError> {
    let asm = Assembly::new(arrivals);
    if asm.complete(0, HEADER_LEN).is_none() {
        return Err(ReceiverError::HeaderLost);
    }
    let header = bitstream::parse_header(&asm.data)?;
    let mut out = Vec::new();
    let mut pos = HEADER_LEN;
    while pos < asm.data.len() {
        let Some(tag) = asm.complete(pos, pos + 1).map(|_| asm.data[pos]) else {
            break;
        };
        let fixed = match tag {
            TAG_SCENE_INIT => SCENE_INIT_FIXED_LEN,
            TAG_KEYFRAME => KEYFRAME_FIXED_LEN,
            _ => break,
        };
        if asm.complete(pos, pos + fixed).is_none() {
            break;
        }
        let prefix = &asm.data[pos..pos + fixed];
        let len = match bitstream::record_len_from_prefix(prefix, &header) {
            Some(Ok(len)) => len,
            _ => break,
        };
        let frame_index = u32::from_le_bytes(prefix[1..5].try_into().expect("4 bytes"));
        let ready_ms = asm.complete(pos, pos + len);
        let record = match ready_ms {
            Some(_) => Some(bitstream::parse_record(&asm.data[pos..pos + len], &header, out.len())?.0),
            None => None,
        };
        out.push(ReceivedRecord {
            tag,
            frame_index,
            record,
            ready_ms,
        });
        pos += len;
    }
    Ok((header, out))
}

/// One scene's decoding failure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneError {
    pub frame: u32,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct SessionOutput {
    pub header: StreamHeader,
    /// One frame per index; undecodable frames repeat the last decoded frame
    /// (black before any).
    pub frames: Vec<ImageFrame>,
    /// `None` for undecodable frames.
    pub ready_ms: Vec<Option<u64>>,
    pub scene_errors: Vec<SceneError>,
    pub records_received: usize,
    pub records_damaged: usize,
}

impl SessionOutput {
    pub fn decoded_count(&self) -> usize {
        self.ready_ms.iter().filter(|r| r.is_some()).count()
    }
}

/// Decodes `num_frames` frames from timed packet arrivals.
///
/// A GOP is ready when its closing keyframe has fully arrived. A damaged
/// keyframe breaks the latent chain, so the rest of its scene is
/// undecodable until the next scene-init.
pub fn decode_session(arrivals: &[Delivery], num_frames: usize) -> Result<SessionOutput, ReceiverError> {
    let (header, received) = received_records(arrivals)?;
    let dec = Decoder::new(&header)?;
    let mut slots: Vec<Option<(ImageFrame, u64)>> = vec![None; num_frames];
    let mut place = |x: ImageFrame, ready: u64| {
        if let Some(s) = slots.get_mut(x.frame_index as usize) {
            *s = Some((x, ready));
        }
    };
    let mut scene_errors = Vec::new();
    let mut pending: Option<(SceneInitRecord, u64)> = None;
    let mut state: Option<(KeyframeState, u64)> = None;
    // Whether the current scene already has a reported error.
    let mut reported = false;

    for r in &received {
        match (r.tag, &r.record, r.ready_ms) {
            (TAG_SCENE_INIT, Some(Record::SceneInit(s)), Some(t)) => {
                pending = Some((s.clone(), t));
                state = None;
                reported = false;
            }
            (TAG_SCENE_INIT, _, _) => {
                pending = None;
                state = None;
                reported = true;
                scene_errors.push(SceneError {
                    frame: r.frame_index,
                    message: ReceiverError::SceneInitMissing { frame: r.frame_index }.to_string(),
                });
            }
            (_, rec, ready) => {
                let key = match rec {
                    Some(Record::Keyframe(k)) => Some((k, ready.expect("complete record has a ready time"))),
                    _ => None,
                };
                if let Some((init, t_init)) = pending.take() {
                    if let Some((k, t)) = key {
                        let (x, st) = dec.scene_start(&init, k)?;
                        let ready = t.max(t_init);
                        place(x, ready);
                        state = Some((st, ready));
                    }
                } else if let Some((prev, t_prev)) = state.take() {
                    if let Some((k, t)) = key {
                        let (xs, st) = dec.gop(&prev, k)?;
                        let ready = t.max(t_prev);
                        for x in xs {
                            place(x, ready);
                        }
                        state = Some((st, ready));
                    }
                } else if !reported {
                    reported = true;
                    scene_errors.push(SceneError {
                        frame: r.frame_index,
                        message: ReceiverError::SceneInitMissing { frame: r.frame_index }.to_string(),
                    });
                }
            }
        }
    }

    let shape = header.generator_config().image_shape();
    let mut last = Tensor::zeros(&shape);
    let mut frames = Vec::with_capacity(num_frames);
    let mut ready_ms = Vec::with_capacity(num_frames);
    for (i, slot) in slots.into_iter().enumerate() {
        match slot {
            Some((x, t)) => {
                last = x.pixels.clone();
                frames.push(x);
                ready_ms.push(Some(t));
            }
            None => {
                frames.push(ImageFrame {
                    pixels: last.clone(),
                    frame_index: i as u32,
                });
                ready_ms.push(None);
            }
        }
    }
    Ok(SessionOutput {
        header,
        frames,
        ready_ms,
        scene_errors,
        records_received: received.len(),
        records_damaged: received.iter().filter(|r| r.record.is_none()).count(),
    })
}

/// `frame_index,ready_ms`; the time is empty for undecodable frames.
pub fn write_ready_csv(mut w: impl Write, ready: &[Option<u64>]) -> io::Result<()> {
    writeln!(w, "frame_index,ready_ms")?;
    for (i, r) in ready.iter().enumerate() {
        match r {
            Some(t) => writeln!(w, "{i},{t}")?,
            None => writeln!(w, "{i},")?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitstream::{serialize, KeyframeRecord};
    use crate::inversion::{quantize_u8, FitConfig, PromptFactors};
    use crate::netsim::Packet;
    use crate::rng::SplitMix64;
    use crate::toygen::GeneratorConfig;
    use proptest::prelude::*;

    fn emb(seed: u64, shape: [usize; 2]) -> Embedding {
        let mut rng = SplitMix64::new(seed);
        Embedding(Tensor::from_fn(&shape, |_| rng.uniform_f32(-1.0, 1.0)).unwrap())
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let (a, b) = (emb(1, [5, 3]), emb(2, [5, 3]));
        assert!(interpolate_prompt(&a, &b, 0, 4).unwrap().0.bitwise_eq(&a.0));
        assert!(interpolate_prompt(&a, &b, 4, 4).unwrap().0.bitwise_eq(&b.0));
        let mid = interpolate_prompt(&a, &b, 2, 4).unwrap();
        for ((m, x), y) in mid.0.data().iter().zip(a.0.data()).zip(b.0.data()) {
            assert!((m - (x + y) / 2.0).abs() < 1e-7);
        }
        assert!(matches!(
            interpolate_prompt(&a, &b, 5, 4),
            Err(ReceiverError::InterpolationRange { t: 5, k: 4 })
        ));
        assert!(interpolate_prompt(&a, &b, 0, 0).is_err());
    }

    #[test]
    fn interpolation_matches_scalar_loop() {
        let (a, b) = (emb(3, [7, 4]), emb(4, [7, 4]));
        for k in 1..6 {
            for t in 0..=k {
                let got = interpolate_prompt(&a, &b, t, k).unwrap();
                for i in 0..28 {
                    let s = t as f64 / k as f64;
                    let want = (1.0 - s) * a.0.data()[i] as f64 + s * b.0.data()[i] as f64;
                    assert!((got.0.data()[i] as f64 - want).abs() < 1e-7);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn interpolation_is_symmetric(k in 1usize..16, t in 0usize..16, sa in any::<u64>(), sb in any::<u64>()) {
            let t = t % (k + 1);
            let (a, b) = (emb(sa, [4, 3]), emb(sb, [4, 3]));
            let x = interpolate_prompt(&a, &b, t, k).unwrap();
            let y = interpolate_prompt(&b, &a, k - t, k).unwrap();
            prop_assert!(x.0.max_abs_diff(&y.0) <= 1e-6);
        }
    }

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            seed: 5,
            m: 8,
            n: 4,
            h: 4,
            w: 4,
            c_lat: 2,
            c_hid: 3,
            upsample: 2,
        }
    }

    fn key(f: u32, seed: u64) -> KeyframeRecord {
        let mut rng = SplitMix64::new(seed);
        let u = Tensor::from_fn(&[8, 2], |_| rng.uniform_f32(-1.0, 1.0)).unwrap();
        let v = Tensor::from_fn(&[2, 4], |_| rng.uniform_f32(-1.0, 1.0)).unwrap();
        KeyframeRecord::from_factors(f, &PromptFactors::new(u, v).unwrap())
    }

    fn scene(f: u32, seed: u64) -> SceneInitRecord {
        let mut rng = SplitMix64::new(seed);
        SceneInitRecord {
            frame_index: f,
            z0: quantize_u8(&Tensor::from_fn(&[4, 4, 2], |_| rng.uniform_f32(-1.0, 1.0)).unwrap()),
        }
    }

    fn fixture() -> (StreamHeader, Vec<Record>) {
        let header = StreamHeader::new(&small(), &FitConfig::default(), 30, 11).unwrap();
        let records = vec![
            Record::SceneInit(scene(0, 1)),
            Record::Keyframe(key(0, 2)),
            Record::Keyframe(key(3, 3)),
            Record::Keyframe(key(5, 4)),
            Record::SceneInit(scene(6, 5)),
            Record::Keyframe(key(6, 6)),
            Record::Keyframe(key(8, 7)),
        ];
        (header, records)
    }

    fn packets(bytes: &[u8], mtu: usize) -> Vec<Packet> {
        bytes
            .chunks(mtu)
            .enumerate()
            .map(|(i, c)| Packet {
                seq: i as u64,
                offset: (i * mtu) as u64,
                payload: c.to_vec(),
            })
            .collect()
    }

    fn at(t: u64, p: Packet) -> Delivery {
        Delivery {
            sent_ms: 0,
            arrival_ms: t,
            packet: p,
        }
    }

    #[test]
    fn gop_with_equal_endpoints_and_k1() {
        let dec = Decoder::new(&fixture().0).unwrap();
        let init = scene(0, 1);
        let k0 = key(0, 2);
        let (_, st) = dec.scene_start(&init, &k0).unwrap();
        let same = GopState {
            c_a: st.c.clone(),
            index_a: 0,
            c_b: st.c.clone(),
            index_b: 3,
            z_entry: st.z.clone(),
        };
        let (frames, _) = generate_gop(&same, &dec.weights, dec.gamma, &dec.noise0).unwrap();
        assert_eq!(frames.len(), 3);
        assert_eq!(frames.iter().map(|f| f.frame_index).collect::<Vec<_>>(), [1, 2, 3]);
        assert!(!frames[0].pixels.bitwise_eq(&frames[1].pixels));

        let k1 = key(1, 9);
        let (xs, st1) = dec.gop(&st, &k1).unwrap();
        let noise = LatentFrame {
            frame_index: 1,
            ..mix_noise(&st.z, &dec.noise0, dec.gamma).unwrap()
        };
        let (x, z) = generate(&dec.weights, &noise, &st1.c).unwrap();
        assert!(xs[0].pixels.bitwise_eq(&x.pixels));
        assert!(st1.z.z.bitwise_eq(&z.z));

        let bad = GopState { index_b: 0, ..same };
        assert!(matches!(
            generate_gop(&bad, &dec.weights, dec.gamma, &dec.noise0),
            Err(ReceiverError::BadGop { .. })
        ));
    }

    #[test]
    fn stream_decodes_every_frame() {
        let (h, recs) = fixture();
        let bytes = serialize(&h, &recs).unwrap();
        let (_, frames) = decode_stream(&bytes).unwrap();
        assert_eq!(frames.len(), 9);
        assert!(frames.iter().enumerate().all(|(i, f)| f.frame_index == i as u32));
        let (_, again) = decode_stream(&bytes).unwrap();
        assert!(frames.iter().zip(&again).all(|(a, b)| a.pixels.bitwise_eq(&b.pixels)));
    }

    #[test]
    fn all_packets_at_zero_are_ready_at_zero() {
        let (h, recs) = fixture();
        let bytes = serialize(&h, &recs).unwrap();
        let arrivals: Vec<_> = packets(&bytes, 100).into_iter().map(|p| at(0, p)).collect();
        let out = decode_session(&arrivals, 9).unwrap();
        assert_eq!(out.ready_ms, vec![Some(0); 9]);
        let (_, direct) = decode_stream(&bytes).unwrap();
        assert!(out.frames.iter().zip(&direct).all(|(a, b)| a.pixels.bitwise_eq(&b.pixels)));
        assert!(out.scene_errors.is_empty());
    }

    #[test]
    fn ready_time_is_closing_keyframe_arrival() {
        let (h, recs) = fixture();
        let bytes = serialize(&h, &recs).unwrap();
        let spans = bitstream::record_spans(&recs);
        // Deliver byte-sized packets; each byte arrives at its offset in ms.
        let arrivals: Vec<_> = packets(&bytes, 1)
            .into_iter()
            .map(|p| at(p.offset, p))
            .collect();
        let out = decode_session(&arrivals, 9).unwrap();
        let last = |i: usize| spans[i].1 as u64 - 1;
        assert_eq!(out.ready_ms[0], Some(last(1)));
        assert_eq!(out.ready_ms[1..=3], [Some(last(2)); 3]);
        assert_eq!(out.ready_ms[4..=5], [Some(last(3)); 2]);
        assert_eq!(out.ready_ms[6], Some(last(5)));
        assert_eq!(out.ready_ms[7..=8], [Some(last(6)); 2]);
    }

    #[test]
    fn lost_keyframe_freezes_rest_of_scene() {
        let (h, recs) = fixture();
        let bytes = serialize(&h, &recs).unwrap();
        let spans = bitstream::record_spans(&recs);
        let hole = spans[2].0 + 30;
        let arrivals: Vec<_> = packets(&bytes, 1)
            .into_iter()
            .filter(|p| p.offset as usize != hole)
            .map(|p| at(0, p))
            .collect();
        let out = decode_session(&arrivals, 9).unwrap();
        assert_eq!(out.records_damaged, 1);
        let decoded: Vec<bool> = out.ready_ms.iter().map(Option::is_some).collect();
        assert_eq!(decoded, [true, false, false, false, false, false, true, true, true]);
        for i in 1..=5 {
            assert!(out.frames[i].pixels.bitwise_eq(&out.frames[0].pixels));
            assert_eq!(out.frames[i].frame_index, i as u32);
        }
        let (_, direct) = decode_stream(&bytes).unwrap();
        for i in 6..9 {
            assert!(out.frames[i].pixels.bitwise_eq(&direct[i].pixels));
        }
    }

    #[test]
    fn lost_scene_init_is_a_scene_error() {
        let (h, recs) = fixture();
        let bytes = serialize(&h, &recs).unwrap();
        let spans = bitstream::record_spans(&recs);
        let hole = spans[4].0 + 20;
        let arrivals: Vec<_> = packets(&bytes, 1)
            .into_iter()
            .filter(|p| p.offset as usize != hole)
            .map(|p| at(0, p))
            .collect();
        let out = decode_session(&arrivals, 9).unwrap();
        assert_eq!(out.scene_errors.len(), 1);
        assert_eq!(out.scene_errors[0].frame, 6);
        assert_eq!(out.decoded_count(), 6);
    }

    #[test]
    fn lost_header_is_an_error() {
        let (h, recs) = fixture();
        let bytes = serialize(&h, &recs).unwrap();
        let arrivals: Vec<_> = packets(&bytes, 10).into_iter().skip(1).map(|p| at(0, p)).collect();
        assert!(matches!(decode_session(&arrivals, 9), Err(ReceiverError::HeaderLost)));
    }

    #[test]
    fn timing_does_not_change_pixels() {
        let (h, recs) = fixture();
        let bytes = serialize(&h, &recs).unwrap();
        let a: Vec<_> = packets(&bytes, 64).into_iter().map(|p| at(0, p)).collect();
        let b: Vec<_> = packets(&bytes, 64)
            .into_iter()
            .map(|p| at(1000 + 7 * p.seq, p))
            .collect();
        let (x, y) = (decode_session(&a, 9).unwrap(), decode_session(&b, 9).unwrap());
        assert!(x.frames.iter().zip(&y.frames).all(|(p, q)| p.pixels.bitwise_eq(&q.pixels)));
        assert_ne!(x.ready_ms, y.ready_ms);
    }

    #[test]
    fn ready_csv_format() {
        let mut buf = Vec::new();
        write_ready_csv(&mut buf, &[Some(0), None, Some(33)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "frame_index,ready_ms\n0,0\n1,\n2,33\n");
    }
}
