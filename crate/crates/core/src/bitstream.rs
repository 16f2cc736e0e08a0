//! The `.prms` wire format and bitrate accounting.
//!
//! A stream is a fixed 51-byte header followed by records in frame order.
//! Every field is fixed width and little-endian; there is no padding and no
//! entropy coding, so the size of a stream is known from its record table.
//!
//! ```text
//! header   "PRMS" ver:u8 m:u16 n:u16 h:u16 w:u16 c_lat:u16 c_hid:u16 U:u8 fps:u8
//!          gen_seed:u64 noise_seed:u64 γ:f32 α:f32 β:f32 μ:f32
//! scene    0x01 frame:u32 Δz:f32 zz:u8 Z⁰[h·w·c_lat]
//! keyframe 0x02 frame:u32 r:u16 Δu:f32 zu:u8 Δv:f32 zv:u8 u[m·r] v[r·n]
//! ```

use thiserror::Error;

use crate::inversion::{FitConfig, InversionError, PromptFactors, QuantParams, Quantized};
use crate::toygen::GeneratorConfig;

pub const MAGIC: [u8; 4] = *b"PRMS";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 51;
pub const TAG_SCENE_INIT: u8 = 0x01;
pub const TAG_KEYFRAME: u8 = 0x02;
/// Bytes of a keyframe record before its payloads.
pub const KEYFRAME_FIXED_LEN: usize = 17;
/// Bytes of a scene-init record before its payload.
pub const SCENE_INIT_FIXED_LEN: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum BitstreamError {
    #[error("truncated {}: need {needed} bytes, have {available}", match .record { Some(i) => format!("record {i}"), None => "header".to_string() })]
    Truncated {
        record: Option<usize>,
        needed: usize,
        available: usize,
    },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("header dimension {0} is zero")]
    ZeroDimension(&'static str),
    #[error("header field {field} = {value} does not fit the wire format")]
    FieldRange { field: &'static str, value: u64 },
    #[error("record {record}: unknown tag 0x{tag:02x}")]
    UnknownTag { record: usize, tag: u8 },
    #[error("record {record}: frame index {found} after {previous}")]
    NonMonotone { record: usize, previous: u32, found: u32 },
    #[error("record {record}: {reason}")]
    Ordering { record: usize, reason: &'static str },
    #[error("record {record}: {reason}")]
    Malformed { record: usize, reason: String },
    #[error("bitrate arithmetic: {0}")]
    ZeroDivisor(&'static str),
}

/// Stream-wide constants: generator shape and seeds plus the fitting
/// coefficients the receiver needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamHeader {
    pub m: u16,
    pub n: u16,
    pub h: u16,
    pub w: u16,
    pub c_lat: u16,
    pub c_hid: u16,
    pub upsample: u8,
    pub fps: u8,
    pub generator_seed: u64,
    pub noise_seed: u64,
    pub gamma: f32,
    pub alpha: f32,
    pub beta: f32,
    pub mu: f32,
}

fn narrow<T: TryFrom<usize>>(field: &'static str, v: usize) -> Result<T, BitstreamError> {
    T::try_from(v).map_err(|_| BitstreamError::FieldRange { field, value: v as u64 })
}

impl StreamHeader {
    pub fn new(gen: &GeneratorConfig, fit: &FitConfig, fps: u8, noise_seed: u64) -> Result<Self, BitstreamError> {
        let h = Self {
            m: narrow("m", gen.m)?,
            n: narrow("n", gen.n)?,
            h: narrow("h", gen.h)?,
            w: narrow("w", gen.w)?,
            c_lat: narrow("c_lat", gen.c_lat)?,
            c_hid: narrow("c_hid", gen.c_hid)?,
            upsample: narrow("upsample", gen.upsample)?,
            fps,
            generator_seed: gen.seed,
            noise_seed,
            gamma: fit.gamma,
            alpha: fit.alpha,
            beta: fit.beta,
            mu: fit.mu,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<(), BitstreamError> {
        let dims = [
            ("m", self.m as usize),
            ("n", self.n as usize),
            ("h", self.h as usize),
            ("w", self.w as usize),
            ("c_lat", self.c_lat as usize),
            ("c_hid", self.c_hid as usize),
            ("upsample", self.upsample as usize),
            ("fps", self.fps as usize),
        ];
        match dims.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(BitstreamError::ZeroDimension(name)),
            None => Ok(()),
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            seed: self.generator_seed,
            m: self.m as usize,
            n: self.n as usize,
            h: self.h as usize,
            w: self.w as usize,
            c_lat: self.c_lat as usize,
            c_hid: self.c_hid as usize,
            upsample: self.upsample as usize,
        }
    }

    /// `base` with the header's loss and noise coefficients.
    pub fn fit_config(&self, base: &FitConfig) -> FitConfig {
        FitConfig {
            gamma: self.gamma,
            alpha: self.alpha,
            beta: self.beta,
            mu: self.mu,
            ..*base
        }
    }

    fn latent_len(&self) -> usize {
        self.h as usize * self.w as usize * self.c_lat as usize
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        for d in [self.m, self.n, self.h, self.w, self.c_lat, self.c_hid] {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(self.upsample);
        out.push(self.fps);
        out.extend_from_slice(&self.generator_seed.to_le_bytes());
        out.extend_from_slice(&self.noise_seed.to_le_bytes());
        for f in [self.gamma, self.alpha, self.beta, self.mu] {
            out.extend_from_slice(&f.to_le_bytes());
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, BitstreamError> {
        let magic: [u8; 4] = r.array()?;
        if magic != MAGIC {
            return Err(BitstreamError::BadMagic(magic));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(BitstreamError::UnsupportedVersion(version));
        }
        let h = Self {
            m: r.u16()?,
            n: r.u16()?,
            h: r.u16()?,
            w: r.u16()?,
            c_lat: r.u16()?,
            c_hid: r.u16()?,
            upsample: r.u8()?,
            fps: r.u8()?,
            generator_seed: r.u64()?,
            noise_seed: r.u64()?,
            gamma: r.f32()?,
            alpha: r.f32()?,
            beta: r.f32()?,
            mu: r.f32()?,
        };
        h.validate()?;
        Ok(h)
    }
}

/// Scene-start latent `Z⁰`, 8-bit affine quantized.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInitRecord {
    pub frame_index: u32,
    pub z0: Quantized,
}

/// Keyframe prompt factors, 8-bit affine quantized.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeRecord {
    pub frame_index: u32,
    pub u: Quantized,
    pub v: Quantized,
}

impl KeyframeRecord {
    /// Packs fitted factors, snapping them to the 8-bit grid if they are not
    /// already on it.
    pub fn from_factors(frame_index: u32, f: &PromptFactors) -> Self {
        let (u, v) = f.quantized().quant.expect("quantized() fills quant");
        Self { frame_index, u, v }
    }

    pub fn rank(&self) -> usize {
        self.u.shape[1]
    }

    pub fn factors(&self) -> Result<PromptFactors, InversionError> {
        PromptFactors::from_quantized(self.u.clone(), self.v.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    SceneInit(SceneInitRecord),
    Keyframe(KeyframeRecord),
}

impl Record {
    pub fn frame_index(&self) -> u32 {
        match self {
            Record::SceneInit(s) => s.frame_index,
            Record::Keyframe(k) => k.frame_index,
        }
    }

    /// Serialized size in bytes.
    pub fn encoded_len(&self) -> usize {
        match self {
            Record::SceneInit(s) => SCENE_INIT_FIXED_LEN + s.z0.codes.len(),
            Record::Keyframe(k) => KEYFRAME_FIXED_LEN + k.u.codes.len() + k.v.codes.len(),
        }
    }

    fn check_shapes(&self, header: &StreamHeader, index: usize) -> Result<(), BitstreamError> {
        let bad = |reason: String| Err(BitstreamError::Malformed { record: index, reason });
        match self {
            Record::SceneInit(s) => {
                let want = [header.h as usize, header.w as usize, header.c_lat as usize];
                if s.z0.shape != want || s.z0.codes.len() != header.latent_len() {
                    return bad(format!("latent shape {:?}, header wants {want:?}", s.z0.shape));
                }
            }
            Record::Keyframe(k) => {
                let (m, n) = (header.m as usize, header.n as usize);
                let r = k.u.shape.get(1).copied().unwrap_or(0);
                if r == 0 || r > u16::MAX as usize {
                    return bad(format!("rank {r} out of range"));
                }
                if k.u.shape != [m, r] || k.v.shape != [r, n] {
                    return bad(format!("factor shapes {:?}, {:?} for m={m}, n={n}", k.u.shape, k.v.shape));
                }
                if k.u.codes.len() != m * r || k.v.codes.len() != r * n {
                    return bad("payload length does not match shape".into());
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write(&mut out);
        out
    }

    fn write(&self, out: &mut Vec<u8>) {
        let params = |out: &mut Vec<u8>, p: &QuantParams| {
            out.extend_from_slice(&p.scale.to_le_bytes());
            out.push(p.zero_point);
        };
        match self {
            Record::SceneInit(s) => {
                out.push(TAG_SCENE_INIT);
                out.extend_from_slice(&s.frame_index.to_le_bytes());
                params(out, &s.z0.params);
                out.extend_from_slice(&s.z0.codes);
            }
            Record::Keyframe(k) => {
                out.push(TAG_KEYFRAME);
                out.extend_from_slice(&k.frame_index.to_le_bytes());
                out.extend_from_slice(&(k.rank() as u16).to_le_bytes());
                params(out, &k.u.params);
                params(out, &k.v.params);
                out.extend_from_slice(&k.u.codes);
                out.extend_from_slice(&k.v.codes);
            }
        }
    }

    fn read(r: &mut Reader<'_>, header: &StreamHeader) -> Result<Self, BitstreamError> {
        let index = r.record.expect("records are read with an index");
        let tag = r.u8()?;
        let frame_index = r.u32()?;
        let params = |r: &mut Reader<'_>| -> Result<QuantParams, BitstreamError> {
            let scale = r.f32()?;
            let zero_point = r.u8()?;
            if !scale.is_finite() || scale <= 0.0 {
                return Err(BitstreamError::Malformed {
                    record: index,
                    reason: format!("quantization step {scale}"),
                });
            }
            Ok(QuantParams { scale, zero_point })
        };
        match tag {
            TAG_SCENE_INIT => {
                let p = params(r)?;
                let codes = r.bytes(header.latent_len())?.to_vec();
                Ok(Record::SceneInit(SceneInitRecord {
                    frame_index,
                    z0: Quantized {
                        shape: vec![header.h as usize, header.w as usize, header.c_lat as usize],
                        codes,
                        params: p,
                    },
                }))
            }
            TAG_KEYFRAME => {
                let rank = r.u16()? as usize;
                if rank == 0 {
                    return Err(BitstreamError::Malformed {
                        record: index,
                        reason: "rank 0".into(),
                    });
                }
                let (pu, pv) = (params(r)?, params(r)?);
                let (m, n) = (header.m as usize, header.n as usize);
                let u = r.bytes(m * rank)?.to_vec();
                let v = r.bytes(rank * n)?.to_vec();
                Ok(Record::Keyframe(KeyframeRecord {
                    frame_index,
                    u: Quantized {
                        shape: vec![m, rank],
                        codes: u,
                        params: pu,
                    },
                    v: Quantized {
                        shape: vec![rank, n],
                        codes: v,
                        params: pv,
                    },
                }))
            }
            tag => Err(BitstreamError::UnknownTag { record: index, tag }),
        }
    }
}

/// Tracks the ordering rules record by record.
///
/// Records are in frame order. The first record is a scene-init, and every
/// scene-init is immediately followed by a keyframe at the same frame index.
/// Keyframe indices strictly increase.
#[derive(Default)]
struct OrderCheck {
    prev: Option<Record>,
}

impl OrderCheck {
    fn push(&mut self, index: usize, rec: &Record) -> Result<(), BitstreamError> {
        let order = |reason| Err(BitstreamError::Ordering { record: index, reason });
        let f = rec.frame_index();
        match (&self.prev, rec) {
            (None, Record::Keyframe(_)) => return order("stream must open with a scene-init record"),
            (None, Record::SceneInit(_)) => {}
            (Some(Record::SceneInit(p)), Record::Keyframe(_)) => {
                if f != p.frame_index {
                    return order("scene-init must be followed by a keyframe at the same frame index");
                }
            }
            (Some(Record::SceneInit(_)), Record::SceneInit(_)) => {
                return order("scene-init must be followed by a keyframe");
            }
            (Some(Record::Keyframe(p)), _) => {
                if f <= p.frame_index {
                    return Err(BitstreamError::NonMonotone {
                        record: index,
                        previous: p.frame_index,
                        found: f,
                    });
                }
            }
        }
        self.prev = Some(rec.clone());
        Ok(())
    }

    fn finish(&self, count: usize) -> Result<(), BitstreamError> {
        match self.prev {
            Some(Record::SceneInit(_)) => Err(BitstreamError::Ordering {
                record: count - 1,
                reason: "stream ends after a scene-init without its keyframe",
            }),
            _ => Ok(()),
        }
    }
}

/// Header plus records.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub header: StreamHeader,
    pub records: Vec<Record>,
}

impl Stream {
    pub fn to_bytes(&self) -> Result<Vec<u8>, BitstreamError> {
        serialize(&self.header, &self.records)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BitstreamError> {
        let (header, records) = parse(bytes)?;
        Ok(Self { header, records })
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.records.iter().map(Record::encoded_len).sum::<usize>()
    }
}

pub fn serialize(header: &StreamHeader, records: &[Record]) -> Result<Vec<u8>, BitstreamError> {
    header.validate()?;
    let mut order = OrderCheck::default();
    for (i, rec) in records.iter().enumerate() {
        rec.check_shapes(header, i)?;
        order.push(i, rec)?;
    }
    order.finish(records.len())?;
    let total = HEADER_LEN + records.iter().map(Record::encoded_len).sum::<usize>();
    let mut out = Vec::with_capacity(total);
    header.write(&mut out);
    for rec in records {
        rec.write(&mut out);
    }
    debug_assert_eq!(out.len(), total);
    Ok(out)
}

pub fn parse(bytes: &[u8]) -> Result<(StreamHeader, Vec<Record>), BitstreamError> {
    let mut r = Reader::new(bytes);
    let header = StreamHeader::read(&mut r)?;
    let mut order = OrderCheck::default();
    let mut records = Vec::new();
    while r.remaining() > 0 {
        r.record = Some(records.len());
        let rec = Record::read(&mut r, &header)?;
        order.push(records.len(), &rec)?;
        records.push(rec);
    }
    order.finish(records.len())?;
    Ok((header, records))
}

/// Parses one record from the start of `bytes`, returning it with its
/// length. `index` only labels errors.
pub fn parse_record(bytes: &[u8], header: &StreamHeader, index: usize) -> Result<(Record, usize), BitstreamError> {
    let mut r = Reader::new(bytes);
    r.record = Some(index);
    let rec = Record::read(&mut r, header)?;
    Ok((rec, r.pos))
}

/// Length of the record starting with `fixed`, read from its fixed-size
/// prefix, or `None` if `fixed` is too short to tell.
pub fn record_len_from_prefix(fixed: &[u8], header: &StreamHeader) -> Option<Result<usize, u8>> {
    let tag = *fixed.first()?;
    match tag {
        TAG_SCENE_INIT => Some(Ok(SCENE_INIT_FIXED_LEN + header.latent_len())),
        TAG_KEYFRAME => {
            let rank = u16::from_le_bytes(fixed.get(5..7)?.try_into().ok()?) as usize;
            Some(Ok(KEYFRAME_FIXED_LEN + (header.m as usize + header.n as usize) * rank))
        }
        other => Some(Err(other)),
    }
}

/// Parses the header from the start of `bytes`.
pub fn parse_header(bytes: &[u8]) -> Result<StreamHeader, BitstreamError> {
    StreamHeader::read(&mut Reader::new(bytes))
}

/// Byte range `[start, end)` of every record, computed from the record
/// table alone.
pub fn record_spans(records: &[Record]) -> Vec<(usize, usize)> {
    let mut at = HEADER_LEN;
    records
        .iter()
        .map(|r| {
            let span = (at, at + r.encoded_len());
            at = span.1;
            span
        })
        .collect()
}

/// `(m + n)·rank·bits·fps / K` bits per second.
pub fn payload_bitrate(m: u64, n: u64, rank: u64, k: u64, fps: u64, bits: u64) -> Result<f64, BitstreamError> {
    if k == 0 {
        return Err(BitstreamError::ZeroDivisor("keyframe interval K = 0"));
    }
    let num = (m as u128 + n as u128) * rank as u128 * bits as u128 * fps as u128;
    let whole = num / k as u128;
    let rem = num % k as u128;
    Ok(whole as f64 + rem as f64 / k as f64)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    record: Option<usize>,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self {
            bytes,
            pos: 0,
            record: None,
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], BitstreamError> {
        if self.remaining() < n {
            return Err(BitstreamError::Truncated {
                record: self.record,
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], BitstreamError> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, BitstreamError> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16, BitstreamError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, BitstreamError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, BitstreamError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32, BitstreamError> {
        Ok(f32::from_le_bytes(self.array()?))
    }
}

/// Seeded random valid stream, for roundtrip testing.
pub fn random_stream(seed: u64) -> Stream {
    use crate::rng::SplitMix64;
    let mut rng = SplitMix64::new(seed);
    let mut pick = |lo: u64, hi: u64| lo + rng.next_u64() % (hi - lo + 1);
    let header = StreamHeader {
        m: pick(1, 12) as u16,
        n: pick(1, 6) as u16,
        h: pick(1, 4) as u16,
        w: pick(1, 4) as u16,
        c_lat: pick(1, 3) as u16,
        c_hid: pick(1, 8) as u16,
        upsample: 1 << pick(0, 3),
        fps: pick(1, 60) as u8,
        generator_seed: pick(0, u64::MAX - 1),
        noise_seed: pick(0, u64::MAX - 1),
        gamma: pick(0, 1000) as f32 / 1000.0,
        alpha: pick(0, 1000) as f32 / 1000.0,
        beta: pick(0, 1000) as f32 / 1000.0,
        mu: pick(0, 2000) as f32 / 1000.0 - 1.0,
    };
    let quant = |shape: Vec<usize>, pick: &mut dyn FnMut(u64, u64) -> u64| {
        let len = shape.iter().product();
        Quantized {
            codes: (0..len).map(|_| pick(0, 255) as u8).collect(),
            params: QuantParams {
                scale: (pick(1, 1 << 20) as f32) * 1e-6,
                zero_point: pick(0, 255) as u8,
            },
            shape,
        }
    };
    let (m, n) = (header.m as usize, header.n as usize);
    let latent = vec![header.h as usize, header.w as usize, header.c_lat as usize];
    let mut records = Vec::new();
    let mut frame = pick(0, 3) as u32;
    let scenes = pick(0, 3);
    for _ in 0..scenes {
        records.push(Record::SceneInit(SceneInitRecord {
            frame_index: frame,
            z0: quant(latent.clone(), &mut pick),
        }));
        for _ in 0..pick(1, 4) {
            let r = pick(1, 4) as usize;
            records.push(Record::Keyframe(KeyframeRecord {
                frame_index: frame,
                u: quant(vec![m, r], &mut pick),
                v: quant(vec![r, n], &mut pick),
            }));
            frame += pick(1, 8) as u32;
        }
    }
    Stream { header, records }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header() -> StreamHeader {
        StreamHeader::new(&GeneratorConfig::default(), &FitConfig::default(), 30, 7).unwrap()
    }

    fn q(shape: &[usize], fill: u8) -> Quantized {
        Quantized {
            shape: shape.to_vec(),
            codes: vec![fill; shape.iter().product()],
            params: QuantParams {
                scale: 0.01,
                zero_point: 128,
            },
        }
    }

    fn scene(f: u32) -> Record {
        Record::SceneInit(SceneInitRecord {
            frame_index: f,
            z0: q(&[16, 16, 4], 3),
        })
    }

    fn key(f: u32, r: usize) -> Record {
        Record::Keyframe(KeyframeRecord {
            frame_index: f,
            u: q(&[64, r], 1),
            v: q(&[r, 16], 2),
        })
    }

    #[test]
    fn empty_stream_is_header_only() {
        let field_widths = 4 + 1 + 2 * 2 + 2 * 4 + 1 + 1 + 8 + 8 + 4 * 4;
        let bytes = serialize(&header(), &[]).unwrap();
        assert_eq!(bytes.len(), field_widths);
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(&bytes[..4], b"PRMS");
        assert_eq!(parse(&bytes).unwrap(), (header(), vec![]));
    }

    #[test]
    fn header_field_layout() {
        let bytes = serialize(&header(), &[]).unwrap();
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..7], &64u16.to_le_bytes());
        assert_eq!(&bytes[7..9], &16u16.to_le_bytes());
        assert_eq!(bytes[17], 4);
        assert_eq!(bytes[18], 30);
        assert_eq!(&bytes[27..35], &7u64.to_le_bytes());
        assert_eq!(&bytes[47..51], &(-0.168f32).to_le_bytes());
    }

    #[test]
    fn record_sizes_follow_field_table() {
        let recs = vec![scene(0), key(0, 8), key(4, 4)];
        let bytes = serialize(&header(), &recs).unwrap();
        let scene_len = 1 + 4 + 4 + 1 + 16 * 16 * 4;
        let key8 = 1 + 4 + 2 + 4 + 1 + 4 + 1 + 64 * 8 + 8 * 16;
        let key4 = 1 + 4 + 2 + 4 + 1 + 4 + 1 + 64 * 4 + 4 * 16;
        assert_eq!(bytes.len(), 51 + scene_len + key8 + key4);
        assert_eq!(record_spans(&recs).last().unwrap().1, bytes.len());
        let (h, back) = parse(&bytes).unwrap();
        assert_eq!(h, header());
        assert_eq!(back, recs);
    }

    #[test]
    fn parse_errors_are_distinct() {
        let good = serialize(&header(), &[scene(0), key(0, 2), key(3, 2)]).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(parse(&bad), Err(BitstreamError::BadMagic(_))));

        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(parse(&bad), Err(BitstreamError::UnsupportedVersion(2)));

        let cut = &good[..good.len() - 1];
        assert!(matches!(
            parse(cut),
            Err(BitstreamError::Truncated { record: Some(2), .. })
        ));
        assert!(matches!(
            parse(&good[..20]),
            Err(BitstreamError::Truncated { record: None, .. })
        ));

        let mut bad = good.clone();
        let third = record_spans(&[scene(0), key(0, 2), key(3, 2)])[2].0;
        bad[third + 1..third + 5].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(
            parse(&bad),
            Err(BitstreamError::NonMonotone {
                record: 2,
                previous: 0,
                found: 0
            })
        );

        let mut bad = good;
        bad[third] = 9;
        assert_eq!(parse(&bad), Err(BitstreamError::UnknownTag { record: 2, tag: 9 }));
    }

    #[test]
    fn serialize_rejects_ordering_violations() {
        let h = header();
        assert!(matches!(serialize(&h, &[key(0, 2)]), Err(BitstreamError::Ordering { record: 0, .. })));
        assert!(matches!(
            serialize(&h, &[scene(0), key(1, 2)]),
            Err(BitstreamError::Ordering { record: 1, .. })
        ));
        assert!(matches!(serialize(&h, &[scene(0)]), Err(BitstreamError::Ordering { .. })));
        assert!(matches!(
            serialize(&h, &[scene(0), key(0, 2), key(0, 2)]),
            Err(BitstreamError::NonMonotone { record: 2, .. })
        ));
        assert!(matches!(
            serialize(&h, &[scene(4), key(4, 2), scene(2), key(2, 2)]),
            Err(BitstreamError::NonMonotone { record: 2, .. })
        ));
        assert!(matches!(
            serialize(&h, &[scene(0), key(0, 2), scene(5), key(5, 2), key(6, 2)]),
            Ok(_)
        ));
    }

    #[test]
    fn serialize_rejects_wrong_payload_shapes() {
        let bad = Record::Keyframe(KeyframeRecord {
            frame_index: 0,
            u: q(&[32, 2], 0),
            v: q(&[2, 16], 0),
        });
        assert!(matches!(
            serialize(&header(), &[scene(0), bad]),
            Err(BitstreamError::Malformed { record: 1, .. })
        ));
    }

    #[test]
    fn bitrate_examples() {
        assert_eq!(payload_bitrate(1024, 77, 32, 2, 30, 8).unwrap(), 4_227_840.0);
        assert_eq!(payload_bitrate(1024, 77, 8, 4, 30, 8).unwrap(), 528_480.0);
        assert_eq!(payload_bitrate(1, 1, 1, 30, 30, 8).unwrap(), 16.0);
        assert_eq!(payload_bitrate(1, 1, 1, 3, 1, 1).unwrap(), 2.0 / 3.0);
        assert!(payload_bitrate(1, 1, 1, 0, 30, 8).is_err());
    }

    proptest! {
        #[test]
        fn random_streams_roundtrip(seed in any::<u64>()) {
            let s = random_stream(seed);
            let bytes = s.to_bytes().unwrap();
            prop_assert_eq!(bytes.len(), s.encoded_len());
            let back = Stream::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }

        #[test]
        fn every_strict_prefix_fails_to_parse(seed in any::<u64>(), cut in 0.0f64..1.0) {
            let bytes = random_stream(seed).to_bytes().unwrap();
            let len = ((bytes.len() as f64) * cut) as usize;
            prop_assume!(len < bytes.len());
            let spans = record_spans(&random_stream(seed).records);
            // A cut exactly at a keyframe boundary is itself a valid stream.
            let on_boundary = len == HEADER_LEN
                || spans.iter().enumerate().any(|(i, s)| {
                    s.1 == len && matches!(random_stream(seed).records[i], Record::Keyframe(_))
                });
            prop_assert_eq!(parse(&bytes[..len]).is_err(), !on_boundary);
        }

        #[test]
        fn bitrate_linear_in_rank_and_inverse_interval(r in 1u64..64, k in 1u64..16) {
            let one = payload_bitrate(100, 10, 1, 1, 30, 8).unwrap();
            let b = payload_bitrate(100, 10, r, k, 30, 8).unwrap();
            prop_assert!((b - one * r as f64 / k as f64).abs() <= 1e-9 * b);
        }
    }
}
