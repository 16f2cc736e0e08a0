use super::{EvalError, MetricReport};
use crate::inversion::{fit_distance, record_image_terms, Adam, FitConfig};
use crate::sender::{encode_variant, plan_keyframes, SenderConfig};
use crate::tensor::Tensor;
use crate::toygen::{decode, encode, init_weights, record_decoder, GeneratorConfig, GeneratorWeights, ImageFrame, LatentFrame};

/// Mean intermediate-frame loss for prompt-space and latent-space
/// interpolation over the same keyframe plan.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rank: usize,
    pub interval: usize,
    pub intermediate_frames: usize,
    /// Mean `D` over intermediates, prompt-space.
    pub prompt_loss: f64,
    /// Mean `D` over intermediates, latent-space.
    pub latent_loss: f64,
    pub prompt_mse: f64,
    pub latent_mse: f64,
}

impl AblationReport {
    /// `method,mean_d,mean_mse` rows for both methods.
    pub fn to_csv(&self) -> String {
        format!(
            "method,mean_d,mean_mse\nprompt_space,{:.8},{:.8}\nlatent_space,{:.8},{:.8}\n",
            self.prompt_loss, self.prompt_mse, self.latent_loss, self.latent_mse
        )
    }
}

/// Fits the decoder latent `N` (prompt fixed at zero) to `target` with the
/// image distance `D`, starting from the encoder's guess.
pub fn fit_latent(
    weights: &GeneratorWeights,
    target: &ImageFrame,
    cfg: &FitConfig,
    iterations: usize,
) -> Result<LatentFrame, EvalError> {
    let g = &weights.config;
    let mut tape = crate::autodiff::Tape::new();
    let z = tape.param("z", &g.latent_shape());
    let t = tape.input("target", &g.image_shape());
    let x = record_decoder(&mut tape, weights, z)?;
    let (rec, per) = record_image_terms(&mut tape, x, t)?;
    let a = tape.scale(rec, cfg.alpha)?;
    let b = tape.scale(per, 1.0 - cfg.alpha)?;
    let d = tape.add(a, b)?;
    tape.set_output(d);

    let start = encode(weights, target)?;
    let shape = start.z.shape().to_vec();
    let mut params = start.z.into_data();
    let mut adam = Adam::new(params.len(), cfg);
    for _ in 0..iterations {
        let zt = Tensor::new(&shape, params.clone())?;
        tape.forward(&[("z", &zt), ("target", &target.pixels)])?;
        let grads = tape.backward(1.0)?;
        adam.step(&mut params, grads.get("z").expect("z is a param").data());
    }
    Ok(LatentFrame {
        z: Tensor::new(&shape, params)?,
        frame_index: target.frame_index,
    })
}

/// Runs both interpolation schemes on one scene with keyframes every `k`
/// frames and compares them on the frames between keyframes.
pub fn ablate_interpolation(
    frames: &[ImageFrame],
    gen: &GeneratorConfig,
    rank: usize,
    k: usize,
    base: &SenderConfig,
) -> Result<AblationReport, EvalError> {
    if k < 2 {
        return Err(EvalError::InvalidArgument(format!("K={k} leaves no intermediate frames")));
    }
    let mut flags = vec![false; frames.len()];
    if let Some(f) = flags.first_mut() {
        *f = true;
    }
    let plan = plan_keyframes(frames.len(), k, &flags)?;
    let cfg = SenderConfig {
        interval: k,
        ranks: vec![rank],
        ..base.clone()
    };
    let prompt = encode_variant(gen, frames, &plan, &cfg, rank)?.reconstruction;

    let weights = init_weights(gen)?;
    let mut latents = Vec::new();
    for idx in plan.indices() {
        latents.push((idx, fit_latent(&weights, &frames[idx as usize], &cfg.fit, cfg.fit.iterations_first)?));
    }
    let mut latent = Vec::new();
    let mut targets = Vec::new();
    let mut from_prompt = Vec::new();
    for w in latents.windows(2) {
        let ((a, za), (b, zb)) = (&w[0], &w[1]);
        for t in a + 1..*b {
            let s = (t - a) as f32 / (b - a) as f32;
            let z = LatentFrame {
                z: za.z.zip_map(&zb.z, |p, q| (1.0 - s) * p + s * q)?,
                frame_index: t,
            };
            latent.push(ImageFrame {
                frame_index: t,
                ..decode(&weights, &z)?
            });
            targets.push(frames[t as usize].clone());
            from_prompt.push(prompt[t as usize].clone());
        }
    }
    if targets.is_empty() {
        return Err(EvalError::InvalidArgument("no intermediate frames between keyframes".into()));
    }
    let mean_d = |xs: &[ImageFrame]| -> Result<f64, EvalError> {
        let mut s = 0.0;
        for (x, y) in xs.iter().zip(&targets) {
            s += fit_distance(x, y, cfg.fit.alpha)? as f64;
        }
        Ok(s / targets.len() as f64)
    };
    let p = MetricReport::compute(&targets, &from_prompt)?;
    let l = MetricReport::compute(&targets, &latent)?;
    Ok(AblationReport {
        rank,
        interval: k,
        intermediate_frames: targets.len(),
        prompt_loss: mean_d(&from_prompt)?,
        latent_loss: mean_d(&latent)?,
        prompt_mse: p.mean_mse(),
        latent_mse: l.mean_mse(),
    })
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
    fn k_below_two_rejected() {
        let (gen, cfg) = tiny();
        let frames = fixtures::translating_square(8, 8, 4, 3, 1);
        assert!(matches!(
            ablate_interpolation(&frames, &gen, 2, 1, &cfg),
            Err(EvalError::InvalidArgument(_))
        ));
    }

    #[test]
    fn counts_only_intermediates() {
        let (gen, cfg) = tiny();
        let frames = fixtures::translating_square(8, 8, 6, 3, 1);
        // keyframes 0, 3, 5
        let r = ablate_interpolation(&frames, &gen, 2, 3, &cfg).unwrap();
        assert_eq!(r.intermediate_frames, 3);
        assert!(r.prompt_loss.is_finite() && r.latent_loss.is_finite());
        assert_eq!(r.to_csv().lines().count(), 3);
    }

    #[test]
    fn latent_fit_reduces_distance() {
        let (gen, cfg) = tiny();
        let w = init_weights(&gen).unwrap();
        let f = &fixtures::translating_square(8, 8, 1, 3, 1)[0];
        let before = fit_distance(&decode(&w, &encode(&w, f).unwrap()).unwrap(), f, 0.5).unwrap();
        let z = fit_latent(&w, f, &cfg.fit, 50).unwrap();
        let after = fit_distance(&decode(&w, &z).unwrap(), f, 0.5).unwrap();
        assert!(after < before, "{after} >= {before}");
    }
}
