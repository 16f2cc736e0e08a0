//! A frozen, seeded, differentiable stand-in for a one-step text-to-image
//! generator and its latent encoder.
//!
//! Conditioning is FiLM-style and linear in the prompt embedding `c`:
//!
//! ```text
//! F_gain = Σ_j B_j ⊗ (W_gain · c[:, j])        F_bias likewise with W_bias
//! Z      = N ⊙ (1 + tanh F_gain) + tanh F_bias
//! x      = sigmoid(conv2(tanh(conv1(upsample_U(Z)))))
//! ```
//!
//! Latents are `[h, w, c_lat]` and images `[H, W, 3]`, both row-major.
//!
//! Weights are drawn from one SplitMix64 stream in this order, each tensor in
//! row-major order: `W_gain [c_lat, m]`, `W_bias [c_lat, m]`, the basis maps
//! `B [n, h, w]`, `conv1` weight `[3, 3, c_lat, c_hid]` then bias `[c_hid]`,
//! `conv2` weight `[3, 3, c_hid, 3]` then bias `[3]`, and finally the
//! encoder map `[3, c_lat]`. Every draw is uniform on `[-a, a]` with
//! `a = sqrt(3 / fan_in)`; fan-ins are `m` for the projections, `n` for the
//! basis maps, `9·c_in` for each convolution (bias included) and `3` for the
//! encoder.

use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::rng::SplitMix64;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("{what}: expected shape {expected:?}, found {found:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub seed: u64,
    /// Embedding rows.
    pub m: usize,
    /// Embedding columns (tokens).
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c_lat: usize,
    pub c_hid: usize,
    /// Latent-to-pixel upsampling factor, a power of two.
    pub upsample: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            m: 64,
            n: 16,
            h: 16,
            w: 16,
            c_lat: 4,
            c_hid: 8,
            upsample: 4,
        }
    }
}

impl GeneratorConfig {
    /// Embedding dimensions of the large text-conditioned models this toy
    /// stands in for. Only shapes are meaningful at this scale.
    pub fn full_scale() -> Self {
        Self {
            m: 1024,
            n: 77,
            ..Self::default()
        }
    }

    /// An 8×8 latent (16×16 frames) with one basis map per latent position,
    /// so the prompt can reach any spatial pattern. Fast enough for sweeps.
    pub fn compact() -> Self {
        Self {
            h: 8,
            w: 8,
            n: 64,
            upsample: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let dims = [
            ("m", self.m),
            ("n", self.n),
            ("h", self.h),
            ("w", self.w),
            ("c_lat", self.c_lat),
            ("c_hid", self.c_hid),
            ("upsample", self.upsample),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(GenError::InvalidConfig(format!("{name} must be >= 1")));
        }
        if !self.upsample.is_power_of_two() {
            return Err(GenError::InvalidConfig(format!(
                "upsample factor {} is not a power of two",
                self.upsample
            )));
        }
        Ok(())
    }

    pub fn image_h(&self) -> usize {
        self.h * self.upsample
    }

    pub fn image_w(&self) -> usize {
        self.w * self.upsample
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.h, self.w, self.c_lat]
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_h(), self.image_w(), 3]
    }

    pub fn embedding_shape(&self) -> [usize; 2] {
        [self.m, self.n]
    }
}

/// The composed prompt matrix `c` (`m × n`).
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Tensor);

impl Embedding {
    pub fn zeros(cfg: &GeneratorConfig) -> Self {
        Self(Tensor::zeros(&cfg.embedding_shape()))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentFrame {
    pub z: Tensor,
    pub frame_index: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFrame {
    pub pixels: Tensor,
    pub frame_index: u32,
}

impl ImageFrame {
    /// Wraps pixels, rejecting values outside `[0, 1]` or a non-RGB layout.
    pub fn new(pixels: Tensor, frame_index: u32) -> Result<Self, GenError> {
        let s = pixels.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(GenError::Shape {
                what: "image",
                expected: vec![0, 0, 3],
                found: s.to_vec(),
            });
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(GenError::InvalidConfig("image pixels outside [0, 1]".into()));
        }
        Ok(Self {
            pixels,
            frame_index,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// Frozen generator parameters.
#[derive(Debug, Clone)]
pub struct GeneratorWeights {
    pub config: GeneratorConfig,
    pub w_gain: Tensor,
    pub w_bias: Tensor,
    /// `[h·w, n]`: column `j` is the flattened basis map `B_j`.
    pub basis: Tensor,
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    /// `[3, c_lat]` pixel-to-latent map applied after average pooling.
    pub encoder: Tensor,
}

fn draw(rng: &mut SplitMix64, shape: &[usize], fan_in: usize) -> Tensor {
    let a = (3.0 / fan_in as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.uniform_f32(-a, a)).expect("uniform draws are finite")
}

pub fn init_weights(config: &GeneratorConfig) -> Result<GeneratorWeights, GenError> {
    config.validate()?;
    let GeneratorConfig {
        m,
        n,
        h,
        w,
        c_lat,
        c_hid,
        ..
    } = *config;
    let mut rng = SplitMix64::new(config.seed);
    let w_gain = draw(&mut rng, &[c_lat, m], m);
    let w_bias = draw(&mut rng, &[c_lat, m], m);
    // Drawn map-by-map, stored transposed so a single matmul applies them.
    let maps = draw(&mut rng, &[n, h * w], n);
    let mut basis = vec![0f32; h * w * n];
    for j in 0..n {
        for p in 0..h * w {
            basis[p * n + j] = maps.data()[j * h * w + p];
        }
    }
    let conv1_w = draw(&mut rng, &[3, 3, c_lat, c_hid], 9 * c_lat);
    let conv1_b = draw(&mut rng, &[c_hid], 9 * c_lat);
    let conv2_w = draw(&mut rng, &[3, 3, c_hid, 3], 9 * c_hid);
    let conv2_b = draw(&mut rng, &[3], 9 * c_hid);
    let encoder = draw(&mut rng, &[3, c_lat], 3);
    Ok(GeneratorWeights {
        config: *config,
        w_gain,
        w_bias,
        basis: Tensor::new(&[h * w, n], basis)?,
        conv1_w,
        conv1_b,
        conv2_w,
        conv2_b,
        encoder,
    })
}

/// Node handles produced by [`record_generator`].
#[derive(Debug, Clone, Copy)]
pub struct GeneratorNodes {
    pub latent: NodeId,
    pub image: NodeId,
}

/// Records the generator on `tape` for an embedding node `c` (`m × n`) and a
/// noise node `noise` (`[h, w, c_lat]`).
pub fn record_generator(
    tape: &mut Tape,
    weights: &GeneratorWeights,
    c: NodeId,
    noise: NodeId,
) -> Result<GeneratorNodes, GenError> {
    let cfg = &weights.config;
    let basis = tape.literal(weights.basis.clone());
    let field = |tape: &mut Tape, proj: &Tensor| -> Result<NodeId, GenError> {
        let p = tape.literal(proj.clone());
        // (W · c)ᵀ = cᵀ · Wᵀ : [n, c_lat]
        let tok = tape.matmul_t(c, p, true, true)?;
        let f = tape.matmul(basis, tok)?;
        let f = tape.reshape(f, &cfg.latent_shape())?;
        Ok(tape.tanh(f)?)
    };
    let gain = field(tape, &weights.w_gain)?;
    let bias = field(tape, &weights.w_bias)?;
    let modulated = tape.mul(noise, gain)?;
    let z = tape.add(noise, modulated)?;
    let z = tape.add(z, bias)?;

    let image = record_decoder(tape, weights, z)?;
    Ok(GeneratorNodes { latent: z, image })
}

/// Generates one frame. Returns the image and the modulated latent `Z`.
pub fn generate(
    weights: &GeneratorWeights,
    noise: &LatentFrame,
    c: &Embedding,
) -> Result<(ImageFrame, LatentFrame), GenError> {
    let cfg = &weights.config;
    check_shape("noise latent", noise.z.shape(), &cfg.latent_shape())?;
    check_shape("embedding", c.0.shape(), &cfg.embedding_shape())?;
    let mut tape = Tape::new();
    let cn = tape.input("c", &cfg.embedding_shape());
    let nn = tape.input("noise", &cfg.latent_shape());
    let nodes = record_generator(&mut tape, weights, cn, nn)?;
    tape.set_output(nodes.image);
    let image = tape.forward(&[("c", &c.0), ("noise", &noise.z)])?;
    let z = tape.value(nodes.latent).expect("latent cached by forward");
    Ok((
        ImageFrame {
            pixels: image,
            frame_index: noise.frame_index,
        },
        LatentFrame {
            z,
            frame_index: noise.frame_index,
        },
    ))
}

/// The decoder half on its own: `x = sigmoid(conv2(tanh(conv1(upsample(Z)))))`.
/// Used by the latent-interpolation baseline.
pub fn record_decoder(tape: &mut Tape, weights: &GeneratorWeights, z: NodeId) -> Result<NodeId, GenError> {
    let mut up = z;
    let mut factor = weights.config.upsample;
    while factor > 1 {
        up = tape.upsample2(up)?;
        factor /= 2;
    }
    let w1 = tape.literal(weights.conv1_w.clone());
    let b1 = tape.literal(weights.conv1_b.clone());
    let w2 = tape.literal(weights.conv2_w.clone());
    let b2 = tape.literal(weights.conv2_b.clone());
    let hid = tape.conv3x3(up, w1, b1)?;
    let hid = tape.tanh(hid)?;
    let rgb = tape.conv3x3(hid, w2, b2)?;
    Ok(tape.sigmoid(rgb)?)
}

/// Decodes a latent directly (no prompt conditioning).
pub fn decode(weights: &GeneratorWeights, z: &LatentFrame) -> Result<ImageFrame, GenError> {
    check_shape("latent", z.z.shape(), &weights.config.latent_shape())?;
    let mut tape = Tape::new();
    let zn = tape.input("z", &weights.config.latent_shape());
    let img = record_decoder(&mut tape, weights, zn)?;
    tape.set_output(img);
    let pixels = tape.forward(&[("z", &z.z)])?;
    Ok(ImageFrame {
        pixels,
        frame_index: z.frame_index,
    })
}

/// Encoder stand-in: `U×U` average pooling followed by the fixed `3 → c_lat`
/// map (no bias).
pub fn encode(weights: &GeneratorWeights, x: &ImageFrame) -> Result<LatentFrame, GenError> {
    let cfg = &weights.config;
    check_shape("image", x.pixels.shape(), &cfg.image_shape())?;
    let (u, iw) = (cfg.upsample, cfg.image_w());
    let area = (u * u) as f32;
    let px = x.pixels.data();
    let enc = weights.encoder.data();
    let mut out = vec![0f32; cfg.h * cfg.w * cfg.c_lat];
    for y in 0..cfg.h {
        for xx in 0..cfg.w {
            let mut pooled = [0f32; 3];
            for dy in 0..u {
                for dx in 0..u {
                    let base = ((y * u + dy) * iw + xx * u + dx) * 3;
                    for ch in 0..3 {
                        pooled[ch] += px[base + ch];
                    }
                }
            }
            let o = &mut out[(y * cfg.w + xx) * cfg.c_lat..(y * cfg.w + xx + 1) * cfg.c_lat];
            for (ch, p) in pooled.iter().enumerate() {
                let p = p / area;
                for (k, ov) in o.iter_mut().enumerate() {
                    *ov += p * enc[ch * cfg.c_lat + k];
                }
            }
        }
    }
    Ok(LatentFrame {
        z: Tensor::new(&cfg.latent_shape(), out)?,
        frame_index: x.frame_index,
    })
}

/// The fixed noise `N⁰`: standard normals by Box–Muller over
/// SplitMix64(`noise_seed`).
pub fn sample_noise(config: &GeneratorConfig, noise_seed: u64) -> LatentFrame {
    let shape = config.latent_shape();
    let n = shape.iter().product();
    let data = SplitMix64::new(noise_seed).normals(n);
    LatentFrame {
        z: Tensor::new(&shape, data).expect("normal draws are finite"),
        frame_index: 0,
    }
}

pub(crate) fn check_shape(what: &'static str, found: &[usize], expected: &[usize]) -> Result<(), GenError> {
    if found != expected {
        return Err(GenError::Shape {
            what,
            expected: expected.to_vec(),
            found: found.to_vec(),
        });
    }
    Ok(())
}

/// Evaluates the conditioning fields `(F_gain, F_bias)` without the tanh.
pub fn modulation_fields(weights: &GeneratorWeights, c: &Embedding) -> Result<(Tensor, Tensor), GenError> {
    let cfg = &weights.config;
    check_shape("embedding", c.0.shape(), &cfg.embedding_shape())?;
    let mut tape = Tape::new();
    let cn = tape.input("c", &cfg.embedding_shape());
    let basis = tape.literal(weights.basis.clone());
    let mut fields = Vec::new();
    for proj in [&weights.w_gain, &weights.w_bias] {
        let p = tape.literal(proj.clone());
        let tok = tape.matmul_t(cn, p, true, true)?;
        let f = tape.matmul(basis, tok)?;
        fields.push(tape.reshape(f, &cfg.latent_shape())?);
    }
    tape.set_output(fields[1]);
    tape.forward(&[("c", &c.0)])?;
    Ok((
        tape.value(fields[0]).expect("cached"),
        tape.value(fields[1]).expect("cached"),
    ))
}
