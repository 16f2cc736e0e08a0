//! Per-frame quality metrics.

use std::io::{self, Write};

use super::EvalError;
use crate::toygen::{check_shape, ImageFrame};

/// PSNR reported for identical frames.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape(x: &ImageFrame, y: &ImageFrame) -> Result<(), EvalError> {
    check_shape("frame", y.pixels.shape(), x.pixels.shape())?;
    Ok(())
}

pub fn mse(x: &ImageFrame, y: &ImageFrame) -> Result<f64, EvalError> {
    same_shape(x, y)?;
    let sum: f64 = x
        .pixels
        .data()
        .iter()
        .zip(y.pixels.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(sum / x.pixels.len() as f64)
}

/// `10·log10(1/MSE)` for a unit dynamic range, capped at 99 dB.
pub fn psnr(x: &ImageFrame, y: &ImageFrame) -> Result<f64, EvalError> {
    Ok(psnr_from_mse(mse(x, y)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5) over every
/// fully contained window position, averaged over positions and channels.
pub fn ssim(x: &ImageFrame, y: &ImageFrame) -> Result<f64, EvalError> {
    same_shape(x, y)?;
    let [h, w, ch] = [x.height(), x.width(), x.pixels.shape()[2]];
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(EvalError::TooSmall { h, w, min: SSIM_WINDOW });
    }
    let g = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let (xd, yd) = (x.pixels.data(), y.pixels.data());
    let mut total = 0.0;
    for c in 0..ch {
        let px = |d: &[f32], r: usize, q: usize| d[(r * w + q) * ch + c] as f64;
        // Separable filtering: rows first, then columns.
        let mut rows = vec![[0f64; 5]; h * ow];
        for r in 0..h {
            for q in 0..ow {
                let mut acc = [0f64; 5];
                for (k, gk) in g.iter().enumerate() {
                    let (a, b) = (px(xd, r, q + k), px(yd, r, q + k));
                    acc[0] += gk * a;
                    acc[1] += gk * b;
                    acc[2] += gk * a * a;
                    acc[3] += gk * b * b;
                    acc[4] += gk * a * b;
                }
                rows[r * ow + q] = acc;
            }
        }
        for r in 0..oh {
            for q in 0..ow {
                let mut m = [0f64; 5];
                for (k, gk) in g.iter().enumerate() {
                    let v = &rows[(r + k) * ow + q];
                    for i in 0..5 {
                        m[i] += gk * v[i];
                    }
                }
                let (mx, my) = (m[0], m[1]);
                let vx = m[2] - mx * mx;
                let vy = m[3] - my * my;
                let cov = m[4] - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    Ok((total / (oh * ow * ch) as f64).clamp(-1.0, 1.0))
}

/// `½·(mean(Δ_row(x - y)²) + mean(Δ_col(x - y)²))`, the same quantity the
/// fitting objective uses in place of a learned perceptual metric.
pub fn gradient_difference(x: &ImageFrame, y: &ImageFrame) -> Result<f64, EvalError> {
    same_shape(x, y)?;
    let [h, w, ch] = [x.height(), x.width(), x.pixels.shape()[2]];
    let r = |i: usize| x.pixels.data()[i] as f64 - y.pixels.data()[i] as f64;
    let (mut sv, mut sh) = (0.0, 0.0);
    for yy in 0..h {
        for xx in 0..w {
            for c in 0..ch {
                let i = (yy * w + xx) * ch + c;
                if yy + 1 < h {
                    sv += (r(i + w * ch) - r(i)).powi(2);
                }
                if xx + 1 < w {
                    sh += (r(i + ch) - r(i)).powi(2);
                }
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(0.5 * (mean(sv, (h - 1) * w * ch) + mean(sh, h * (w - 1) * ch)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMetrics {
    pub frame_index: u32,
    pub mse: f64,
    pub psnr_db: f64,
    /// `None` when the frame is smaller than the SSIM window.
    pub ssim: Option<f64>,
    pub grad_diff: f64,
}

impl FrameMetrics {
    pub fn compute(reference: &ImageFrame, test: &ImageFrame) -> Result<Self, EvalError> {
        let mse = mse(reference, test)?;
        let ssim = match ssim(reference, test) {
            Ok(s) => Some(s),
            Err(EvalError::TooSmall { .. }) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            frame_index: reference.frame_index,
            mse,
            psnr_db: psnr_from_mse(mse),
            ssim,
            grad_diff: gradient_difference(reference, test)?,
        })
    }

    /// `α·MSE + (1 - α)·grad_diff`, the fitting distance `D`.
    pub fn distance(&self, alpha: f32) -> f64 {
        alpha as f64 * self.mse + (1.0 - alpha as f64) * self.grad_diff
    }
}

/// Per-frame metrics with aggregates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
}

impl MetricReport {
    pub fn compute(reference: &[ImageFrame], test: &[ImageFrame]) -> Result<Self, EvalError> {
        if reference.len() != test.len() {
            return Err(EvalError::FrameCount {
                reference: reference.len(),
                test: test.len(),
            });
        }
        let frames = reference
            .iter()
            .zip(test)
            .map(|(r, t)| FrameMetrics::compute(r, t))
            .collect::<Result<_, _>>()?;
        Ok(Self { frames })
    }

    fn mean_of(&self, f: impl Fn(&FrameMetrics) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.frames.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_mse(&self) -> f64 {
        self.mean_of(|m| Some(m.mse)).unwrap_or(0.0)
    }

    pub fn mean_psnr(&self) -> f64 {
        self.mean_of(|m| Some(m.psnr_db)).unwrap_or(PSNR_CAP_DB)
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        self.mean_of(|m| m.ssim)
    }

    pub fn mean_grad_diff(&self) -> f64 {
        self.mean_of(|m| Some(m.grad_diff)).unwrap_or(0.0)
    }

    pub fn mean_distance(&self, alpha: f32) -> f64 {
        self.mean_of(|m| Some(m.distance(alpha))).unwrap_or(0.0)
    }

    /// `frame_index,mse,psnr_db,ssim,grad_diff_proxy` per frame, then a
    /// `mean` row.
    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        let opt = |v: Option<f64>| v.map(|s| format!("{s:.6}")).unwrap_or_default();
        writeln!(w, "frame_index,mse,psnr_db,ssim,grad_diff_proxy")?;
        for m in &self.frames {
            writeln!(
                w,
                "{},{:.8},{:.4},{},{:.8}",
                m.frame_index,
                m.mse,
                m.psnr_db,
                opt(m.ssim),
                m.grad_diff
            )?;
        }
        writeln!(
            w,
            "mean,{:.8},{:.4},{},{:.8}",
            self.mean_mse(),
            self.mean_psnr(),
            opt(self.mean_ssim()),
            self.mean_grad_diff()
        )
    }
}

/// Empirical CDF points `(value, fraction ≤ value)`.
pub fn cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().map(|(i, &x)| (x, (i + 1) as f64 / n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::Tensor;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> ImageFrame {
        ImageFrame::new(Tensor::from_fn(&[h, w, 3], |i| f(i / (w * 3), (i / 3) % w, i % 3)).unwrap(), 0).unwrap()
    }

    fn noise(seed: u64, h: usize, w: usize) -> ImageFrame {
        let mut rng = SplitMix64::new(seed);
        ImageFrame::new(Tensor::from_fn(&[h, w, 3], |_| rng.uniform_f32(0.0, 1.0)).unwrap(), 0).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = img(4, 4, |_, _, _| 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = img(4, 4, |_, _, _| 0.4);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&a, &img(4, 5, |_, _, _| 0.0)).is_err());
    }

    #[test]
    fn psnr_matches_two_loop_oracle() {
        let (a, b) = (noise(1, 9, 7), noise(2, 9, 7));
        let mut s = 0f64;
        for i in 0..9 * 7 {
            for c in 0..3 {
                let d = a.pixels.data()[i * 3 + c] as f64 - b.pixels.data()[i * 3 + c] as f64;
                s += d * d;
            }
        }
        let want = 10.0 * (1.0 / (s / (9.0 * 7.0 * 3.0))).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-6);
    }

    /// Direct evaluation of the SSIM formula at every window position.
    fn ssim_oracle(x: &ImageFrame, y: &ImageFrame) -> f64 {
        let (h, w) = (x.height(), x.width());
        let g1: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
        let norm: f64 = g1.iter().sum::<f64>().powi(2);
        let mut total = 0.0;
        let mut count = 0;
        for c in 0..3 {
            for r in 0..=h - 11 {
                for q in 0..=w - 11 {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wgt = g1[i] * g1[j] / norm;
                            let a = x.pixels.data()[((r + i) * w + q + j) * 3 + c] as f64;
                            let b = y.pixels.data()[((r + i) * w + q + j) * 3 + c] as f64;
                            mx += wgt * a;
                            my += wgt * b;
                            xx += wgt * a * a;
                            yy += wgt * b * b;
                            xy += wgt * a * b;
                        }
                    }
                    let (c1, c2) = (1e-4, 9e-4);
                    total += (2.0 * mx * my + c1) * (2.0 * (xy - mx * my) + c2)
                        / ((mx * mx + my * my + c1) * (xx - mx * mx + yy - my * my + c2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_examples() {
        let a = noise(3, 16, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let flat = img(12, 12, |_, _, _| 0.5);
        assert!((ssim(&flat, &flat).unwrap() - 1.0).abs() < 1e-12);
        let board = img(16, 16, |y, x, _| ((x + y) % 2) as f32);
        let inv = img(16, 16, |y, x, _| 1.0 - ((x + y) % 2) as f32);
        let s = ssim(&board, &inv).unwrap();
        assert!(s < 0.0, "{s}");
        assert!((s - ssim_oracle(&board, &inv)).abs() < 1e-9);
        assert!(matches!(ssim(&noise(1, 10, 20), &noise(2, 10, 20)), Err(EvalError::TooSmall { .. })));
    }

    #[test]
    fn ssim_matches_oracle_on_random_pairs() {
        for seed in 0..3 {
            let (a, b) = (noise(seed, 14, 17), noise(seed + 10, 14, 17));
            let s = ssim(&a, &b).unwrap();
            assert!((s - ssim_oracle(&a, &b)).abs() < 1e-9);
            assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn gradient_difference_ignores_offsets() {
        let a = noise(4, 6, 6);
        let shifted = ImageFrame::new(a.pixels.map(|v| v * 0.5 + 0.25).unwrap(), 0).unwrap();
        let half = ImageFrame::new(a.pixels.map(|v| v * 0.5).unwrap(), 0).unwrap();
        assert!((gradient_difference(&shifted, &half).unwrap()).abs() < 1e-12);
        assert!(gradient_difference(&a, &half).unwrap() > 0.0);
    }

    #[test]
    fn report_csv_for_identical_frames() {
        let a = vec![noise(1, 12, 12), noise(2, 12, 12)];
        let r = MetricReport::compute(&a, &a).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        for line in text.lines().skip(1) {
            assert_eq!(line.split(',').nth(2), Some("99.0000"));
        }
        assert!(MetricReport::compute(&a, &a[..1]).is_err());
    }

    #[test]
    fn cdf_points() {
        assert_eq!(cdf(&[3.0, 1.0, 2.0, 4.0]), vec![(1.0, 0.25), (2.0, 0.5), (3.0, 0.75), (4.0, 1.0)]);
    }
}
