//! Prompt inversion: fitting low-rank, fake-quantized prompt factors to
//! target frames by gradient descent through the frozen generator.

mod fit;
mod loss;
mod quant;

use thiserror::Error;

pub use fit::{fit_first_frame, fit_frame, fit_gop, initial_factors, loss_gradient_check, Adam, FitReport, SceneInit};
pub use loss::{compute_loss, fit_distance, record_image_terms, record_loss, LossNodes, LossTerms};
pub use quant::{fake_quantize, quantize_u8, Precision, QuantParams, Quantized};

use crate::autodiff::AutodiffError;
use crate::tensor::{Tensor, TensorError};
use crate::toygen::{check_shape, Embedding, GenError, GeneratorConfig, LatentFrame};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InversionError {
    #[error("invalid fit config: {0}")]
    InvalidConfig(String),
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("a GOP needs at least two frames (K >= 1), got {0}")]
    EmptyGop(usize),
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },
    #[error(transparent)]
    Generator(#[from] GenError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Hyperparameters for one fitting job.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    /// Share of fixed noise when noising the previous latent.
    pub gamma: f32,
    /// Weight of the reconstruction term against the perceptual term.
    pub alpha: f32,
    /// Weight of the fitting loss against prompt regularization.
    pub beta: f32,
    /// Target mean of the embedding entries.
    pub mu: f32,
    pub rank: usize,
    pub iterations_first: usize,
    pub iterations_subsequent: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub precision: Precision,
    /// Standard deviation of the random factor initialization.
    pub init_scale: f32,
    /// Stream seed; per-keyframe initialization seeds derive from it.
    pub seed: u64,
    /// Start each GOP's new keyframe from the previous keyframe's factors.
    pub warm_start: bool,
    /// Condition frame `t` on the encoded ground-truth frame `t-1` instead of
    /// the generated latent.
    pub teacher_forcing: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            alpha: 0.8,
            beta: 0.9,
            mu: -0.168,
            rank: 8,
            iterations_first: 10_000,
            iterations_subsequent: 500,
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            precision: Precision::Int8,
            init_scale: 0.1,
            seed: 0,
            warm_start: true,
            teacher_forcing: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self, gen: &GeneratorConfig) -> Result<(), InversionError> {
        for (name, v) in [("gamma", self.gamma), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(InversionError::InvalidConfig(format!("{name} = {v} not in [0, 1]")));
            }
        }
        if self.rank == 0 {
            return Err(InversionError::ZeroRank);
        }
        if self.rank > gen.m.min(gen.n) {
            return Err(InversionError::InvalidConfig(format!(
                "rank {} exceeds min(m, n) = {}",
                self.rank,
                gen.m.min(gen.n)
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.init_scale >= 0.0) {
            return Err(InversionError::InvalidConfig(
                "learning rate must be positive and init scale non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Low-rank prompt factors `u` (`m × r`) and `v` (`r × n`).
///
/// When `quant` is present, `u` and `v` hold exactly the dequantized grid
/// values of the stored codes.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptFactors {
    pub u: Tensor,
    pub v: Tensor,
    pub quant: Option<(Quantized, Quantized)>,
}

impl PromptFactors {
    pub fn new(u: Tensor, v: Tensor) -> Result<Self, InversionError> {
        let (su, sv) = (u.shape(), v.shape());
        if su.len() != 2 || sv.len() != 2 || su[1] != sv[0] {
            return Err(InversionError::InvalidConfig(format!(
                "factor shapes {su:?} and {sv:?} are not m×r, r×n"
            )));
        }
        if su[1] == 0 {
            return Err(InversionError::ZeroRank);
        }
        Ok(Self { u, v, quant: None })
    }

    pub fn from_quantized(u: Quantized, v: Quantized) -> Result<Self, InversionError> {
        let mut f = Self::new(u.dequantize(), v.dequantize())?;
        f.quant = Some((u, v));
        Ok(f)
    }

    /// Snaps both factors to their 8-bit grids.
    pub fn quantized(&self) -> Self {
        match &self.quant {
            Some(_) => self.clone(),
            None => Self::from_quantized(quantize_u8(&self.u), quantize_u8(&self.v))
                .expect("shapes already validated"),
        }
    }

    pub fn rank(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn m(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.v.shape()[1]
    }
}

/// `Nᵗ = (1 - γ)·Zᵗ⁻¹ + γ·N⁰`.
pub fn mix_noise(z_prev: &LatentFrame, n0: &LatentFrame, gamma: f32) -> Result<LatentFrame, InversionError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(InversionError::InvalidConfig(format!("gamma = {gamma} not in [0, 1]")));
    }
    check_shape("noise", n0.z.shape(), z_prev.z.shape())?;
    let keep = 1.0 - gamma;
    let z = z_prev.z.zip_map(&n0.z, |z, n| keep * z + gamma * n)?;
    Ok(LatentFrame {
        z,
        frame_index: z_prev.frame_index + 1,
    })
}

/// Scale applied after the factor product, `1/√r`.
pub fn rank_norm(rank: usize) -> f32 {
    1.0 / (rank as f32).sqrt()
}

/// `c = u·v / √r`.
pub fn compose_embedding(f: &PromptFactors) -> Result<Embedding, InversionError> {
    if f.rank() == 0 {
        return Err(InversionError::ZeroRank);
    }
    let c = f.u.matmul(&f.v)?.scale(rank_norm(f.rank()))?;
    Ok(Embedding(c))
}

/// Weights `(1 - t/K, t/K)` applied to the previous and next keyframe
/// prompts for frame `t` of a GOP of length `K`.
pub fn interpolation_weights(t: usize, k: usize) -> (f32, f32) {
    let next = t as f32 / k as f32;
    (1.0 - next, next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn latent(v: f32) -> LatentFrame {
        LatentFrame {
            z: Tensor::full(&[2, 2, 3], v),
            frame_index: 0,
        }
    }

    fn random_latent(seed: u64) -> LatentFrame {
        let mut rng = SplitMix64::new(seed);
        LatentFrame {
            z: Tensor::from_fn(&[3, 3, 2], |_| rng.uniform_f32(-2.0, 2.0)).unwrap(),
            frame_index: 0,
        }
    }

    #[test]
    fn mix_endpoints_are_exact() {
        let (z, n) = (random_latent(1), random_latent(2));
        assert_eq!(mix_noise(&z, &n, 1.0).unwrap().z, n.z);
        assert_eq!(mix_noise(&z, &n, 0.0).unwrap().z, z.z);
    }

    #[test]
    fn mix_default_gamma() {
        let out = mix_noise(&latent(1.0), &latent(0.0), 0.95).unwrap();
        for &v in out.z.data() {
            assert!((v - 0.05).abs() < 1e-7);
        }
    }

    #[test]
    fn mix_is_affine() {
        let (z1, z2, n) = (random_latent(3), random_latent(4), random_latent(5));
        let (a, b, g) = (0.7f32, -1.3f32, 0.95f32);
        let combo = LatentFrame {
            z: z1.z.scale(a).unwrap().add(&z2.z.scale(b).unwrap()).unwrap(),
            frame_index: 0,
        };
        let lhs = mix_noise(&combo, &n, g).unwrap().z;
        let rhs = mix_noise(&z1, &n, g)
            .unwrap()
            .z
            .scale(a)
            .unwrap()
            .add(&mix_noise(&z2, &n, g).unwrap().z.scale(b).unwrap())
            .unwrap()
            .add(&n.z.scale(-(a + b - 1.0) * g).unwrap())
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-5);
    }

    #[test]
    fn mix_rejects_bad_inputs() {
        assert!(mix_noise(&latent(1.0), &latent(0.0), 1.5).is_err());
        assert!(mix_noise(&latent(1.0), &random_latent(0), 0.5).is_err());
    }

    #[test]
    fn compose_all_ones() {
        let f = PromptFactors::new(Tensor::ones(&[5, 4]), Tensor::ones(&[4, 3])).unwrap();
        let c = compose_embedding(&f).unwrap();
        assert!(c.0.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn compose_rank_one_is_outer_product() {
        let u = Tensor::new(&[3, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let v = Tensor::new(&[1, 2], vec![4.0, 3.0]).unwrap();
        let c = compose_embedding(&PromptFactors::new(u, v).unwrap()).unwrap();
        assert_eq!(c.0.data(), &[4.0, 3.0, -8.0, -6.0, 2.0, 1.5]);
    }

    #[test]
    fn compose_matches_triple_loop() {
        let mut rng = SplitMix64::new(21);
        let (m, r, n) = (7, 3, 5);
        let u = Tensor::from_fn(&[m, r], |_| rng.uniform_f32(-1.0, 1.0)).unwrap();
        let v = Tensor::from_fn(&[r, n], |_| rng.uniform_f32(-1.0, 1.0)).unwrap();
        let c = compose_embedding(&PromptFactors::new(u.clone(), v.clone()).unwrap()).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0f64;
                for k in 0..r {
                    acc += u.data()[i * r + k] as f64 * v.data()[k * n + j] as f64;
                }
                acc /= (r as f64).sqrt();
                assert!((c.0.data()[i * n + j] as f64 - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn compose_has_scale_gauge_freedom() {
        let mut rng = SplitMix64::new(8);
        let u = Tensor::from_fn(&[6, 2], |_| rng.uniform_f32(-1.0, 1.0)).unwrap();
        let v = Tensor::from_fn(&[2, 4], |_| rng.uniform_f32(-1.0, 1.0)).unwrap();
        let base = compose_embedding(&PromptFactors::new(u.clone(), v.clone()).unwrap()).unwrap();
        for s in [0.5f32, -3.0, 7.25] {
            let f = PromptFactors::new(u.scale(s).unwrap(), v.scale(1.0 / s).unwrap()).unwrap();
            assert!(compose_embedding(&f).unwrap().0.max_abs_diff(&base.0) < 1e-5);
        }
    }

    #[test]
    fn zero_rank_is_rejected() {
        assert_eq!(
            PromptFactors::new(Tensor::zeros(&[4, 0]), Tensor::zeros(&[0, 3])).unwrap_err(),
            InversionError::ZeroRank
        );
    }

    #[test]
    fn config_validation() {
        let gen = GeneratorConfig::default();
        assert!(FitConfig::default().validate(&gen).is_ok());
        assert!(FitConfig { alpha: 1.2, ..Default::default() }.validate(&gen).is_err());
        assert!(FitConfig { rank: 17, ..Default::default() }.validate(&gen).is_err());
        assert_eq!(
            FitConfig { rank: 0, ..Default::default() }.validate(&gen).unwrap_err(),
            InversionError::ZeroRank
        );
    }

    #[test]
    fn interpolation_weights_endpoints_and_midpoint() {
        assert_eq!(interpolation_weights(0, 4), (1.0, 0.0));
        assert_eq!(interpolation_weights(4, 4), (0.0, 1.0));
        assert_eq!(interpolation_weights(2, 4), (0.5, 0.5));
    }
}
