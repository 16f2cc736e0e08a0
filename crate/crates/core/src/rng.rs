//! SplitMix64 and the draws built on it.
//!
//! All seeded randomness in the crate goes through this generator so that
//! weights, noise and initial factors are reproducible across platforms.

/// The SplitMix64 generator (Steele, Lea & Flood).
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform on `[0, 1)` from the top 53 bits of one draw.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`, computed in `f64` and rounded once.
    pub fn uniform_f32(&mut self, lo: f32, hi: f32) -> f32 {
        let u = self.next_f64();
        (lo as f64 + (hi as f64 - lo as f64) * u) as f32
    }

    /// Standard normal pair by Box–Muller over two consecutive draws.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        // 1 - u maps [0, 1) to (0, 1] so the logarithm is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * theta.cos(), r * theta.sin())
    }

    /// Fills `n` standard-normal `f32` values, consuming draws in pairs.
    pub fn normals(&mut self, n: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(n + 1);
        while out.len() < n {
            let (a, b) = self.normal_pair();
            out.push(a as f32);
            out.push(b as f32);
        }
        out.truncate(n);
        out
    }
}

/// Derives an independent seed for a sub-stream, e.g. the initial factors of
/// the keyframe at `index`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut rng = SplitMix64::new(base ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    rng.next_u64()
}
