//! Frame files: binary PPM (P6, 8-bit) and a lossless raw f32 tensor format.
//!
//! The raw format is the magic `TF32`, a `u32` rank, one `u32` per
//! dimension (`h, w, 3`), then row-major `f32` values, all little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use super::EvalError;
use crate::tensor::Tensor;
use crate::toygen::ImageFrame;

pub const RAW_MAGIC: [u8; 4] = *b"TF32";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameFormat {
    Ppm,
    RawF32,
}

impl FrameFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Ppm => "ppm",
            Self::RawF32 => "f32",
        }
    }

    pub fn from_extension(ext: &str) -> Option<Self> {
        match ext {
            "ppm" => Some(Self::Ppm),
            "f32" => Some(Self::RawF32),
            _ => None,
        }
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> EvalError {
    EvalError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn encode_ppm(frame: &ImageFrame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    out.extend(frame.pixels.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path, frame_index: u32) -> Result<ImageFrame, EvalError> {
    let mut pos = 0;
    let mut token = || -> Result<String, EvalError> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad(path, "truncated PPM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(bad(path, "not a binary PPM (P6)"));
    }
    let mut num = |what: &str| -> Result<usize, EvalError> {
        token()?.parse().map_err(|_| bad(path, format!("bad PPM {what}")))
    };
    let (w, h, max) = (num("width")?, num("height")?, num("maxval")?);
    if max != 255 {
        return Err(bad(path, format!("maxval {max}, only 8-bit PPM is supported")));
    }
    let data = &bytes[(pos + 1).min(bytes.len())..];
    if data.len() != w * h * 3 {
        return Err(bad(path, format!("PPM payload is {} bytes, expected {}", data.len(), w * h * 3)));
    }
    let t = Tensor::new(&[h, w, 3], data.iter().map(|&b| b as f32 / 255.0).collect())?;
    Ok(ImageFrame::new(t, frame_index)?)
}

pub fn encode_raw(frame: &ImageFrame) -> Vec<u8> {
    let shape = frame.pixels.shape();
    let mut out = RAW_MAGIC.to_vec();
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in frame.pixels.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8], path: &Path, frame_index: u32) -> Result<ImageFrame, EvalError> {
    let word = |i: usize| -> Result<u32, EvalError> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| bad(path, "truncated raw header"))
    };
    if bytes.get(..4) != Some(&RAW_MAGIC[..]) {
        return Err(bad(path, "missing TF32 magic"));
    }
    let rank = word(4)? as usize;
    if rank != 3 {
        return Err(bad(path, format!("rank {rank}, frames are h×w×3")));
    }
    let shape = (0..3).map(|i| word(8 + 4 * i).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let body = &bytes[20..];
    let n: usize = shape.iter().product();
    if body.len() != 4 * n {
        return Err(bad(path, format!("payload is {} bytes, expected {}", body.len(), 4 * n)));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(ImageFrame::new(Tensor::new(&shape, data)?, frame_index)?)
}

pub fn read_frame(path: &Path, frame_index: u32) -> Result<ImageFrame, EvalError> {
    let bytes = fs::read(path).map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match FrameFormat::from_extension(ext) {
        Some(FrameFormat::Ppm) => decode_ppm(&bytes, path, frame_index),
        Some(FrameFormat::RawF32) => decode_raw(&bytes, path, frame_index),
        None => Err(bad(path, "unknown frame extension")),
    }
}

pub fn write_frame(path: &Path, frame: &ImageFrame, format: FrameFormat) -> Result<(), EvalError> {
    let bytes = match format {
        FrameFormat::Ppm => encode_ppm(frame),
        FrameFormat::RawF32 => encode_raw(frame),
    };
    fs::write(path, bytes).map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Frame files in `dir` (`.ppm` or `.f32`), sorted by file name. Frame
/// indices are positions in that order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let io = |e| EvalError::Io {
        path: dir.to_path_buf(),
        source: e,
    };
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let p = entry.map_err(io)?.path();
        let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("");
        if p.is_file() && FrameFormat::from_extension(ext).is_some() {
            paths.push(p);
        }
    }
    paths.sort();
    Ok(paths)
}

pub fn read_frames(dir: &Path) -> Result<Vec<ImageFrame>, EvalError> {
    let paths = list_frames(dir)?;
    if paths.is_empty() {
        return Err(EvalError::NoFrames(dir.to_path_buf()));
    }
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| read_frame(p, i as u32))
        .collect()
}

/// Writes `frame_00000.<ext>`, `frame_00001.<ext>`, … into `dir`,
/// creating it if needed.
pub fn write_frames(dir: &Path, frames: &[ImageFrame], format: FrameFormat) -> Result<(), EvalError> {
    fs::create_dir_all(dir).map_err(|e| EvalError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    for (i, f) in frames.iter().enumerate() {
        write_frame(&dir.join(format!("frame_{i:05}.{}", format.extension())), f, format)?;
    }
    Ok(())
}
