//! Per-tensor affine 8-bit quantization and its straight-through fake
//! counterpart.

use crate::tensor::Tensor;

/// Scale `Δ` and zero-point `z` of an 8-bit affine grid: `value = (q - z)·Δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: u8,
}

/// An 8-bit quantized tensor as it travels on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub shape: Vec<usize>,
    pub codes: Vec<u8>,
    pub params: QuantParams,
}

/// Supported parameter precisions for fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Int8,
    Float32,
}

impl Precision {
    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            8 => Some(Self::Int8),
            32 => Some(Self::Float32),
            _ => None,
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            Self::Int8 => 8,
            Self::Float32 => 32,
        }
    }
}

impl Quantized {
    pub fn dequantize(&self) -> Tensor {
        let QuantParams { scale, zero_point } = self.params;
        let z = zero_point as f32;
        let data = self.codes.iter().map(|&q| (q as f32 - z) * scale).collect();
        Tensor::new(&self.shape, data).expect("grid values are finite")
    }
}

/// Quantizes onto a 255-step grid spanning `[min(t, 0), max(t, 0)]`.
///
/// The range is widened to contain zero so the zero-point fits in a byte.
/// A constant tensor gets a grid on which its value is exact.
pub fn quantize_u8(t: &Tensor) -> Quantized {
    let (lo, hi) = (t.min().min(0.0), t.max().max(0.0));
    let shape = t.shape().to_vec();
    if t.min() == t.max() {
        let v = t.min();
        let (params, code) = if v == 0.0 {
            (QuantParams { scale: 1.0, zero_point: 0 }, 0u8)
        } else {
            let code = if v > 0.0 { 129 } else { 127 };
            (QuantParams { scale: v.abs(), zero_point: 128 }, code)
        };
        return Quantized {
            shape,
            codes: vec![code; t.len()],
            params,
        };
    }
    let scale = (hi - lo) / 255.0;
    let zero_point = (-lo / scale).round().clamp(0.0, 255.0);
    let codes = t
        .data()
        .iter()
        .map(|&v| ((v / scale).round() + zero_point).clamp(0.0, 255.0) as u8)
        .collect();
    Quantized {
        shape,
        codes,
        params: QuantParams {
            scale,
            zero_point: zero_point as u8,
        },
    }
}

/// Quantize–dequantize. Identity at 32 bits; the backward pass is the
/// identity in both cases (callers feed the result to the tape in place of
/// the raw parameter and apply its gradient to the raw parameter).
pub fn fake_quantize(t: &Tensor, precision: Precision) -> Tensor {
    match precision {
        Precision::Float32 => t.clone(),
        Precision::Int8 => quantize_u8(t).dequantize(),
    }
}
