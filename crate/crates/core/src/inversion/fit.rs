use log::debug;

use super::loss::{record_loss, LossNodes, LossTerms};
use super::quant::{fake_quantize, quantize_u8, Precision, Quantized};
use super::{interpolation_weights, mix_noise, rank_norm, FitConfig, InversionError, PromptFactors};
use crate::autodiff::{AutodiffError, Gradients, NodeId, Tape};
use crate::fixtures::random_factors;
use crate::rng::derive_seed;
use crate::tensor::{Tensor, TensorError};
use crate::toygen::{self, check_shape, record_generator, GeneratorWeights, ImageFrame, LatentFrame};

/// Per-iteration loss history of one fitting job.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitReport {
    pub terms: Vec<LossTerms>,
}

impl FitReport {
    pub fn iterations(&self) -> usize {
        self.terms.len()
    }

    pub fn initial(&self) -> Option<LossTerms> {
        self.terms.first().copied()
    }

    pub fn final_terms(&self) -> Option<LossTerms> {
        self.terms.last().copied()
    }

    pub fn totals(&self) -> Vec<f32> {
        self.terms.iter().map(|t| t.total).collect()
    }
}

/// The scene-start latent as transmitted: 8-bit codes and their
/// dequantized values.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInit {
    pub z0: LatentFrame,
    pub codes: Quantized,
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f32,
    b1: f32,
    b2: f32,
    eps: f32,
    m: Vec<f32>,
    v: Vec<f32>,
    step: i32,
}

impl Adam {
    pub fn new(len: usize, cfg: &FitConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            b1: cfg.beta1,
            b2: cfg.beta2,
            eps: cfg.eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        self.step += 1;
        let c1 = 1.0 - self.b1.powi(self.step);
        let c2 = 1.0 - self.b2.powi(self.step);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.b1 * *m + (1.0 - self.b1) * g;
            *v = self.b2 * *v + (1.0 - self.b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// One frame's generator + objective, with `u`/`v` as parameters.
struct FrameGraph {
    tape: Tape,
    latent: NodeId,
    loss: LossNodes,
}

impl FrameGraph {
    /// With `blend = Some((w_prev, w_next))` the prompt is
    /// `w_prev·c_prev + w_next·c_new`; otherwise it is `c_new`.
    fn build(
        weights: &GeneratorWeights,
        cfg: &FitConfig,
        rank: usize,
        blend: Option<(f32, f32)>,
    ) -> Result<Self, InversionError> {
        let g = &weights.config;
        let mut tape = Tape::new();
        let u = tape.param("u", &[g.m, rank]);
        let v = tape.param("v", &[rank, g.n]);
        let noise = tape.input("noise", &g.latent_shape());
        let target = tape.input("target", &g.image_shape());
        let uv = tape.matmul(u, v)?;
        let mut c = tape.scale(uv, rank_norm(rank))?;
        if let Some((w_prev, w_next)) = blend {
            let prev = tape.input("c_prev", &g.embedding_shape());
            let a = tape.scale(prev, w_prev)?;
            let b = tape.scale(c, w_next)?;
            c = tape.add(a, b)?;
        }
        let gen = record_generator(&mut tape, weights, c, noise)?;
        let loss = record_loss(&mut tape, gen.image, target, c, cfg)?;
        tape.set_output(loss.total);
        Ok(Self {
            tape,
            latent: gen.latent,
            loss,
        })
    }

    fn step(&mut self, feeds: &[(&str, &Tensor)]) -> Result<(LossTerms, Gradients), InversionError> {
        self.tape.forward(feeds)?;
        let terms = self.loss.read(&self.tape);
        Ok((terms, self.tape.backward(1.0)?))
    }
}

fn non_finite(iteration: usize) -> impl Fn(InversionError) -> InversionError {
    move |e| match e {
        InversionError::Autodiff(AutodiffError::NonFinite { node }) => InversionError::NonFinite {
            iteration,
            detail: format!("forward value at node {node}"),
        },
        InversionError::Autodiff(AutodiffError::Tensor(TensorError::NonFinite { .. })) => {
            InversionError::NonFinite {
                iteration,
                detail: "gradient".into(),
            }
        }
        other => other,
    }
}

/// Largest relative error between the reverse-mode gradients of `L` with
/// respect to `u` and `v` and central differences with step `eps`.
pub fn loss_gradient_check(
    weights: &GeneratorWeights,
    target: &ImageFrame,
    noise: &LatentFrame,
    factors: &PromptFactors,
    cfg: &FitConfig,
    eps: f64,
) -> Result<f64, InversionError> {
    check_shape("target", target.pixels.shape(), &weights.config.image_shape())?;
    check_shape("noise", noise.z.shape(), &weights.config.latent_shape())?;
    let mut graph = FrameGraph::build(weights, cfg, factors.rank(), None)?;
    Ok(graph.tape.finite_diff_check(
        &[
            ("u", &factors.u),
            ("v", &factors.v),
            ("noise", &noise.z),
            ("target", &target.pixels),
        ],
        eps,
    )?)
}

/// Seeded `normal(0, init_scale²)` factors for the keyframe at `frame_index`.
pub fn initial_factors(weights: &GeneratorWeights, cfg: &FitConfig, frame_index: u32) -> PromptFactors {
    let g = &weights.config;
    random_factors(
        g.m,
        g.n,
        cfg.rank,
        cfg.init_scale,
        derive_seed(cfg.seed, frame_index as u64),
    )
}

fn finish(u: Tensor, v: Tensor, precision: Precision) -> Result<PromptFactors, InversionError> {
    let f = PromptFactors::new(u, v)?;
    Ok(match precision {
        Precision::Int8 => f.quantized(),
        Precision::Float32 => f,
    })
}

/// Fits one frame against `target` from a given noise input and starting
/// factors, for `iterations` steps.
pub fn fit_frame(
    weights: &GeneratorWeights,
    target: &ImageFrame,
    noise: &LatentFrame,
    init: &PromptFactors,
    cfg: &FitConfig,
    iterations: usize,
) -> Result<(PromptFactors, FitReport), InversionError> {
    cfg.validate(&weights.config)?;
    check_shape("target", target.pixels.shape(), &weights.config.image_shape())?;
    check_shape("noise", noise.z.shape(), &weights.config.latent_shape())?;
    let rank = init.rank();
    let mut graph = FrameGraph::build(weights, cfg, rank, None)?;
    let (mut u, mut v) = (init.u.clone().into_data(), init.v.clone().into_data());
    let (su, sv) = (init.u.shape().to_vec(), init.v.shape().to_vec());
    let mut adam_u = Adam::new(u.len(), cfg);
    let mut adam_v = Adam::new(v.len(), cfg);
    let mut report = FitReport::default();

    for it in 0..iterations {
        let uq = fake_quantize(&Tensor::new(&su, u.clone())?, cfg.precision);
        let vq = fake_quantize(&Tensor::new(&sv, v.clone())?, cfg.precision);
        let (terms, grads) = graph
            .step(&[
                ("u", &uq),
                ("v", &vq),
                ("noise", &noise.z),
                ("target", &target.pixels),
            ])
            .map_err(non_finite(it))?;
        if it % 500 == 0 {
            debug!("frame {} iter {it}: L={:.6} D={:.6}", target.frame_index, terms.total, terms.fit);
        }
        report.terms.push(terms);
        adam_u.step(&mut u, grads.get("u").expect("u").data());
        adam_v.step(&mut v, grads.get("v").expect("v").data());
    }
    let factors = finish(Tensor::new(&su, u)?, Tensor::new(&sv, v)?, cfg.precision)?;
    Ok((factors, report))
}

/// Scene-start fit: encodes the frame, quantizes that latent for
/// transmission, noises it with `N⁰` and fits `iterations_first` steps from a
/// seeded random start.
pub fn fit_first_frame(
    weights: &GeneratorWeights,
    noise0: &LatentFrame,
    target: &ImageFrame,
    cfg: &FitConfig,
) -> Result<(PromptFactors, SceneInit, FitReport), InversionError> {
    let z0 = toygen::encode(weights, target)?;
    let codes = quantize_u8(&z0.z);
    let scene = SceneInit {
        z0: LatentFrame {
            z: codes.dequantize(),
            frame_index: target.frame_index,
        },
        codes,
    };
    let noise = LatentFrame {
        frame_index: target.frame_index,
        ..mix_noise(&scene.z0, noise0, cfg.gamma)?
    };
    let init = initial_factors(weights, cfg, target.frame_index);
    let (factors, report) = fit_frame(weights, target, &noise, &init, cfg, cfg.iterations_first)?;
    Ok((factors, scene, report))
}

/// Interpolation-aware fit of the keyframe closing a GOP.
///
/// `frames[0]` is the frame already represented by `prev` and `z_entry` its
/// generated latent; `frames[1..=K]` are fitted jointly, each from
/// `(1 - t/K)·c_prev + (t/K)·c_new`, with latents chained forward and
/// detached between frames. Only the new keyframe's factors move.
pub fn fit_gop(
    weights: &GeneratorWeights,
    noise0: &LatentFrame,
    frames: &[ImageFrame],
    prev: &PromptFactors,
    z_entry: &LatentFrame,
    cfg: &FitConfig,
) -> Result<(PromptFactors, FitReport), InversionError> {
    cfg.validate(&weights.config)?;
    if frames.len() < 2 {
        return Err(InversionError::EmptyGop(frames.len()));
    }
    let k = frames.len() - 1;
    for f in frames {
        check_shape("target", f.pixels.shape(), &weights.config.image_shape())?;
    }
    let c_prev = super::compose_embedding(prev)?;
    let key_index = frames[k].frame_index;
    let init = if cfg.warm_start && prev.rank() == cfg.rank {
        PromptFactors::new(prev.u.clone(), prev.v.clone())?
    } else {
        initial_factors(weights, cfg, key_index)
    };
    let rank = init.rank();
    let mut graphs = (1..=k)
        .map(|t| FrameGraph::build(weights, cfg, rank, Some(interpolation_weights(t, k))))
        .collect::<Result<Vec<_>, _>>()?;
    let teacher: Option<Vec<LatentFrame>> = if cfg.teacher_forcing {
        Some(
            frames[..k]
                .iter()
                .map(|f| toygen::encode(weights, f))
                .collect::<Result<_, _>>()?,
        )
    } else {
        None
    };

    let (su, sv) = (init.u.shape().to_vec(), init.v.shape().to_vec());
    let (mut u, mut v) = (init.u.into_data(), init.v.into_data());
    let mut adam_u = Adam::new(u.len(), cfg);
    let mut adam_v = Adam::new(v.len(), cfg);
    let mut report = FitReport::default();

    for it in 0..cfg.iterations_subsequent {
        let uq = fake_quantize(&Tensor::new(&su, u.clone())?, cfg.precision);
        let vq = fake_quantize(&Tensor::new(&sv, v.clone())?, cfg.precision);
        let mut gu = vec![0f32; u.len()];
        let mut gv = vec![0f32; v.len()];
        let mut sum = LossTerms::default();
        let mut z_prev = z_entry.clone();
        for (t, graph) in graphs.iter_mut().enumerate() {
            let cond = match &teacher {
                Some(enc) => &enc[t],
                None => &z_prev,
            };
            let noise = mix_noise(cond, noise0, cfg.gamma)?;
            let (terms, grads) = graph
                .step(&[
                    ("u", &uq),
                    ("v", &vq),
                    ("noise", &noise.z),
                    ("target", &frames[t + 1].pixels),
                    ("c_prev", &c_prev.0),
                ])
                .map_err(non_finite(it))?;
            sum.accumulate(&terms);
            for (a, g) in gu.iter_mut().zip(grads.get("u").expect("u").data()) {
                *a += g;
            }
            for (a, g) in gv.iter_mut().zip(grads.get("v").expect("v").data()) {
                *a += g;
            }
            z_prev = LatentFrame {
                z: graph.tape.value(graph.latent).expect("latent cached"),
                frame_index: frames[t + 1].frame_index,
            };
        }
        if !sum.total.is_finite() {
            return Err(InversionError::NonFinite {
                iteration: it,
                detail: "summed GOP loss".into(),
            });
        }
        if it % 100 == 0 {
            debug!("gop ending {key_index} iter {it}: L={:.6}", sum.total);
        }
        report.terms.push(sum);
        adam_u.step(&mut u, &gu);
        adam_v.step(&mut v, &gv);
    }
    let factors = finish(Tensor::new(&su, u)?, Tensor::new(&sv, v)?, cfg.precision)?;
    Ok((factors, report))
}
