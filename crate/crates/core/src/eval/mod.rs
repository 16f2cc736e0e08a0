//! Quality metrics, frame files, rate–quality sweeps and the interpolation
//! ablation.

mod ablation;
mod frames;
mod metrics;

use std::io::{self, Write};
use std::path::PathBuf;

use rayon::prelude::*;
use thiserror::Error;

pub use ablation::{ablate_interpolation, fit_latent, AblationReport};
pub use frames::{
    decode_ppm, decode_raw, encode_ppm, encode_raw, list_frames, read_frame, read_frames, write_frame, write_frames,
    FrameFormat, RAW_MAGIC,
};
pub use metrics::{cdf, gradient_difference, mse, psnr, psnr_from_mse, ssim, FrameMetrics, MetricReport, PSNR_CAP_DB};

use crate::autodiff::AutodiffError;
use crate::bitstream::{payload_bitrate, BitstreamError};
use crate::inversion::{compose_embedding, fit_distance, fit_first_frame, mix_noise, FitConfig, InversionError};
use crate::sender::{encode_variant, plan_keyframes, scene_flags, SenderConfig, SenderError};
use crate::tensor::TensorError;
use crate::toygen::{generate, init_weights, sample_noise, GenError, GeneratorConfig, ImageFrame};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("no frame files in {0}")]
    NoFrames(PathBuf),
    #[error("{reference} reference frames but {test} test frames")]
    FrameCount { reference: usize, test: usize },
    #[error("image {h}×{w} is smaller than the {min}×{min} SSIM window")]
    TooSmall { h: usize, w: usize, min: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sweep cell rank={rank} K={interval}: {source}")]
    Cell {
        rank: usize,
        interval: usize,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Sender(#[from] SenderError),
    #[error(transparent)]
    Inversion(#[from] InversionError),
    #[error(transparent)]
    Bitstream(#[from] BitstreamError),
    #[error(transparent)]
    Generator(#[from] GenError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// One `(rank, K)` cell of a rate–quality sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub rank: usize,
    pub interval: usize,
    /// `payload_bitrate(m, n, rank, K, fps, 8)`.
    pub bitrate_bps: f64,
    /// Mean fitting distance `D` over all frames.
    pub mean_distance: f64,
    pub mean_mse: f64,
    pub mean_psnr_db: f64,
    pub mean_ssim: Option<f64>,
    pub mean_grad_diff: f64,
}

/// Fits, decodes and measures every `(rank, K)` pair. Cells run in
/// parallel; rows come back sorted by bitrate, then rank, then K.
pub fn sweep(
    frames: &[ImageFrame],
    gen: &GeneratorConfig,
    ranks: &[usize],
    intervals: &[usize],
    base: &SenderConfig,
) -> Result<Vec<SweepRow>, EvalError> {
    if ranks.is_empty() || intervals.is_empty() {
        return Err(EvalError::InvalidArgument("sweep needs at least one rank and one interval".into()));
    }
    let weights = init_weights(gen)?;
    let flags = scene_flags(&weights, frames, base.scene_threshold)?;
    let cells: Vec<(usize, usize)> = ranks
        .iter()
        .flat_map(|&r| intervals.iter().map(move |&k| (r, k)))
        .collect();
    let mut rows = cells
        .par_iter()
        .map(|&(rank, interval)| {
            sweep_cell(frames, gen, &flags, rank, interval, base).map_err(|e| EvalError::Cell {
                rank,
                interval,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    rows.sort_by(|a, b| {
        a.bitrate_bps
            .total_cmp(&b.bitrate_bps)
            .then(a.rank.cmp(&b.rank))
            .then(a.interval.cmp(&b.interval))
    });
    Ok(rows)
}

fn sweep_cell(
    frames: &[ImageFrame],
    gen: &GeneratorConfig,
    flags: &[bool],
    rank: usize,
    interval: usize,
    base: &SenderConfig,
) -> Result<SweepRow, EvalError> {
    let cfg = SenderConfig {
        interval,
        ranks: vec![rank],
        ..base.clone()
    };
    let plan = plan_keyframes(frames.len(), interval, flags)?;
    let variant = encode_variant(gen, frames, &plan, &cfg, rank)?;
    let report = MetricReport::compute(frames, &variant.reconstruction)?;
    Ok(SweepRow {
        rank,
        interval,
        bitrate_bps: payload_bitrate(gen.m as u64, gen.n as u64, rank as u64, interval as u64, cfg.fps as u64, 8)?,
        mean_distance: report.mean_distance(cfg.fit.alpha),
        mean_mse: report.mean_mse(),
        mean_psnr_db: report.mean_psnr(),
        mean_ssim: report.mean_ssim(),
        mean_grad_diff: report.mean_grad_diff(),
    })
}

/// Fits each target as a scene-start keyframe and returns the final `D`
/// of the frame regenerated from the returned (possibly quantized) factors.
pub fn keyframe_distances(
    gen: &GeneratorConfig,
    targets: &[ImageFrame],
    fit: &FitConfig,
    noise_seed: u64,
) -> Result<Vec<f64>, EvalError> {
    let weights = init_weights(gen)?;
    let noise0 = sample_noise(gen, noise_seed);
    targets
        .par_iter()
        .map(|t| {
            let (factors, init, _) = fit_first_frame(&weights, &noise0, t, fit)?;
            let noise = mix_noise(&init.z0, &noise0, fit.gamma)?;
            let (x, _) = generate(&weights, &noise, &compose_embedding(&factors)?)?;
            Ok(fit_distance(&x, t, fit.alpha)? as f64)
        })
        .collect()
}

/// `rank,interval,bitrate_bps,mean_d,mean_mse,mean_psnr_db,mean_ssim,mean_grad_diff_proxy`
pub fn write_sweep_csv(mut w: impl Write, rows: &[SweepRow]) -> io::Result<()> {
    writeln!(w, "rank,interval,bitrate_bps,mean_d,mean_mse,mean_psnr_db,mean_ssim,mean_grad_diff_proxy")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{:.8},{:.8},{:.4},{},{:.8}",
            r.rank,
            r.interval,
            r.bitrate_bps,
            r.mean_distance,
            r.mean_mse,
            r.mean_psnr_db,
            r.mean_ssim.map(|s| format!("{s:.6}")).unwrap_or_default(),
            r.mean_grad_diff
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn tiny() -> (GeneratorConfig, SenderConfig) {
        let gen = GeneratorConfig {
            seed: 2,
            m: 8,
            n: 4,
            h: 4,
            w: 4,
            c_lat: 2,
            c_hid: 3,
            upsample: 2,
        };
        let cfg = SenderConfig {
            fit: FitConfig {
                iterations_first: 10,
                iterations_subsequent: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        (gen, cfg)
    }

    #[test]
    fn single_cell_single_row() {
        let (gen, cfg) = tiny();
        let frames = fixtures::translating_square(8, 8, 5, 3, 1);
        let rows = sweep(&frames, &gen, &[2], &[2], &cfg).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].bitrate_bps, payload_bitrate(8, 4, 2, 2, 30, 8).unwrap());
        assert!(rows[0].mean_ssim.is_none());
    }

    #[test]
    fn rows_sorted_by_bitrate_and_consistent() {
        let (gen, cfg) = tiny();
        let frames = fixtures::translating_square(8, 8, 5, 3, 1);
        let rows = sweep(&frames, &gen, &[1, 3], &[1, 4], &cfg).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.windows(2).all(|w| w[0].bitrate_bps <= w[1].bitrate_bps));
        for r in &rows {
            let want = payload_bitrate(8, 4, r.rank as u64, r.interval as u64, 30, 8).unwrap();
            assert_eq!(r.bitrate_bps, want);
        }
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }

    #[test]
    fn keyframe_distances_are_deterministic() {
        let (gen, cfg) = tiny();
        let targets = fixtures::target_set(8, 8);
        let fit = FitConfig { iterations_first: 20, rank: 2, ..cfg.fit };
        let a = keyframe_distances(&gen, &targets[..3], &fit, 1).unwrap();
        let b = keyframe_distances(&gen, &targets[..3], &fit, 1).unwrap();
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|d| d.is_finite() && *d > 0.0));
        assert_eq!(a, b);
    }

    #[test]
    fn bad_cells_are_identified() {
        let (gen, cfg) = tiny();
        let frames = fixtures::translating_square(8, 8, 3, 3, 1);
        let err = sweep(&frames, &gen, &[2, 99], &[1], &cfg).unwrap_err();
        assert!(matches!(err, EvalError::Cell { rank: 99, interval: 1, .. }), "{err}");
        assert!(sweep(&frames, &gen, &[], &[1], &cfg).is_err());
    }
}
