//! Synthetic test videos.

use crate::inversion::{compose_embedding, interpolation_weights, mix_noise, InversionError, PromptFactors};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;
use crate::toygen::{generate, Embedding, GeneratorWeights, ImageFrame, LatentFrame};

fn frame(h: usize, w: usize, index: u32, px: impl Fn(usize, usize, usize) -> f32) -> ImageFrame {
    let t = Tensor::from_fn(&[h, w, 3], |i| {
        let (y, x, c) = (i / (w * 3), (i / 3) % w, i % 3);
        px(y, x, c).clamp(0.0, 1.0)
    })
    .expect("finite pixels");
    ImageFrame::new(t, index).expect("pixels clamped to [0, 1]")
}

/// Square of side `side` moving `step` pixels right per frame
/// over a vertical gradient, wrapping at the border.
pub fn translating_square(h: usize, w: usize, frames: usize, side: usize, step: usize) -> Vec<ImageFrame> {
    (0..frames)
        .map(|t| {
            let x0 = ((w - side) / 4 + t * step) % w;
            let y0 = (h - side) / 2;
            frame(h, w, t as u32, |y, x, c| {
                let bg = [0.25, 0.35, 0.5][c] + 0.2 * y as f32 / h as f32;
                let dx = (x + w - x0) % w;
                let inside = dx < side && (y0..y0 + side).contains(&y);
                if inside {
                    [0.9, 0.75, 0.2][c]
                } else {
                    bg
                }
            })
        })
        .collect()
}

/// The first frame of [`translating_square`] repeated.
pub fn static_scene(h: usize, w: usize, frames: usize, side: usize) -> Vec<ImageFrame> {
    let first = translating_square(h, w, 1, side, 0).remove(0);
    (0..frames)
        .map(|t| ImageFrame {
            pixels: first.pixels.clone(),
            frame_index: t as u32,
        })
        .collect()
}

/// A slow pan over one palette, then a hard cut at `cut` to a different
/// palette and pattern.
pub fn scene_cut(h: usize, w: usize, frames: usize, cut: usize) -> Vec<ImageFrame> {
    (0..frames)
        .map(|t| {
            if t < cut {
                frame(h, w, t as u32, |y, x, c| {
                    let phase = (x + t) as f32 / w as f32;
                    [0.2, 0.4, 0.7][c] + 0.15 * (std::f32::consts::TAU * phase).sin() + 0.1 * y as f32 / h as f32
                })
            } else {
                frame(h, w, t as u32, |y, x, c| {
                    let checker = (((x + t) / 8 + y / 8) % 2) as f32;
                    [0.85, 0.6, 0.15][c] - 0.3 * checker
                })
            }
        })
        .collect()
}

/// Eight single-frame targets: four square positions and four frames
/// from either side of a scene cut.
pub fn target_set(h: usize, w: usize) -> Vec<ImageFrame> {
    let squares = translating_square(h, w, 8, (h / 4).max(1), (w / 8).max(1));
    let cuts = scene_cut(h, w, 8, 4);
    squares
        .into_iter()
        .step_by(2)
        .chain(cuts.into_iter().step_by(2))
        .enumerate()
        .map(|(i, f)| ImageFrame {
            frame_index: i as u32,
            ..f
        })
        .collect()
}

/// Seeded factors with entries `normal(0, scale²)`.
pub fn random_factors(m: usize, n: usize, rank: usize, scale: f32, seed: u64) -> PromptFactors {
    let mut rng = SplitMix64::new(seed);
    let mut draw = |len: usize| rng.normals(len).into_iter().map(|x| x * scale).collect();
    PromptFactors::new(
        Tensor::new(&[m, rank], draw(m * rank)).expect("finite"),
        Tensor::new(&[rank, n], draw(rank * n)).expect("finite"),
    )
    .expect("rank >= 1")
}

/// A video generated by the toy generator itself from keyframe prompts of
/// rank `rank` placed every `k` frames, with interpolated prompts and
/// chained latents in between. Frame 0 starts from `z0`.
pub fn planted_video(
    weights: &GeneratorWeights,
    noise0: &LatentFrame,
    z0: &LatentFrame,
    gamma: f32,
    rank: usize,
    k: usize,
    frames: usize,
    seed: u64,
) -> Result<Vec<ImageFrame>, InversionError> {
    let g = &weights.config;
    let key = |j: usize| -> Result<Embedding, InversionError> {
        compose_embedding(&random_factors(g.m, g.n, rank, 0.5, derive_seed(seed, j as u64)))
    };
    let mut out = Vec::with_capacity(frames);
    let mut z = z0.clone();
    let (mut c_a, mut c_b) = (key(0)?, key(1)?);
    for t in 0..frames {
        let (j, local) = (t / k.max(1), t % k.max(1));
        if local == 0 && t > 0 {
            c_a = c_b;
            c_b = key(j + 1)?;
        }
        let (wa, wb) = interpolation_weights(local, k.max(1));
        let c = Embedding(c_a.0.zip_map(&c_b.0, |a, b| wa * a + wb * b)?);
        let noise = LatentFrame {
            frame_index: t as u32,
            ..mix_noise(&z, noise0, gamma)?
        };
        let (x, zt) = generate(weights, &noise, &c)?;
        out.push(x);
        z = zt;
    }
    Ok(out)
}
