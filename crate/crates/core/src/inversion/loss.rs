//! The fitting objective.
//!
//! ```text
//! D_rec = mean((x - x_gt)²)
//! D_per = ½·(mean(Δ_row(x - x_gt)²) + mean(Δ_col(x - x_gt)²))
//! λ     = |mean(c) - μ|
//! D     = α·D_rec + (1 - α)·D_per
//! L     = β·D + (1 - β)·λ
//! ```
//!
//! `D_per` is a gradient-difference stand-in for a learned perceptual
//! metric: it compares forward pixel differences of the two images, and the
//! difference operator is linear so it is applied to the residual directly.

use crate::autodiff::{NodeId, Tape};
use crate::inversion::{FitConfig, InversionError};
use crate::tensor::Tensor;
use crate::toygen::{check_shape, Embedding, ImageFrame};

/// One evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub total: f32,
    pub fit: f32,
    pub reconstruction: f32,
    pub perceptual: f32,
    pub regularization: f32,
}

impl LossTerms {
    pub(crate) fn accumulate(&mut self, other: &LossTerms) {
        self.total += other.total;
        self.fit += other.fit;
        self.reconstruction += other.reconstruction;
        self.perceptual += other.perceptual;
        self.regularization += other.regularization;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub fit: NodeId,
    pub reconstruction: NodeId,
    pub perceptual: NodeId,
    pub regularization: NodeId,
}

impl LossNodes {
    /// Reads the cached values after a forward pass.
    pub fn read(&self, tape: &Tape) -> LossTerms {
        let v = |n: NodeId| tape.value(n).map(|t| t.item()).unwrap_or(f32::NAN);
        LossTerms {
            total: v(self.total),
            fit: v(self.fit),
            reconstruction: v(self.reconstruction),
            perceptual: v(self.perceptual),
            regularization: v(self.regularization),
        }
    }
}

/// Records only the image terms `(D_rec, D_per)`.
pub fn record_image_terms(tape: &mut Tape, x: NodeId, target: NodeId) -> Result<(NodeId, NodeId), InversionError> {
    let resid = tape.sub(x, target)?;
    let sq = tape.mul(resid, resid)?;
    let rec = tape.mean(sq)?;
    let mut parts = [rec; 2];
    for (axis, slot) in parts.iter_mut().enumerate() {
        let d = tape.diff(resid, axis)?;
        let d2 = tape.mul(d, d)?;
        *slot = tape.mean(d2)?;
    }
    let per = tape.add(parts[0], parts[1])?;
    let per = tape.scale(per, 0.5)?;
    Ok((rec, per))
}

/// Records the full objective for image `x`, target `target` and prompt `c`.
pub fn record_loss(
    tape: &mut Tape,
    x: NodeId,
    target: NodeId,
    c: NodeId,
    cfg: &FitConfig,
) -> Result<LossNodes, InversionError> {
    let (rec, per) = record_image_terms(tape, x, target)?;
    let rec_w = tape.scale(rec, cfg.alpha)?;
    let per_w = tape.scale(per, 1.0 - cfg.alpha)?;
    let fit = tape.add(rec_w, per_w)?;

    let mean_c = tape.mean(c)?;
    let neg_mu = tape.literal(Tensor::scalar(-cfg.mu));
    let off = tape.add(mean_c, neg_mu)?;
    let reg = tape.abs(off)?;

    let fit_w = tape.scale(fit, cfg.beta)?;
    let reg_w = tape.scale(reg, 1.0 - cfg.beta)?;
    let total = tape.add(fit_w, reg_w)?;
    Ok(LossNodes {
        total,
        fit,
        reconstruction: rec,
        perceptual: per,
        regularization: reg,
    })
}

/// Evaluates every loss term for a generated frame against its target.
pub fn compute_loss(
    x: &ImageFrame,
    target: &ImageFrame,
    c: &Embedding,
    cfg: &FitConfig,
) -> Result<LossTerms, InversionError> {
    check_shape("generated image", x.pixels.shape(), target.pixels.shape())?;
    let mut tape = Tape::new();
    let xn = tape.input("x", x.pixels.shape());
    let tn = tape.input("target", target.pixels.shape());
    let cn = tape.input("c", c.0.shape());
    let nodes = record_loss(&mut tape, xn, tn, cn, cfg)?;
    tape.set_output(nodes.total);
    tape.forward(&[("x", &x.pixels), ("target", &target.pixels), ("c", &c.0)])?;
    Ok(nodes.read(&tape))
}

/// `α·D_rec + (1 - α)·D_per` between two images.
pub fn fit_distance(x: &ImageFrame, target: &ImageFrame, alpha: f32) -> Result<f32, InversionError> {
    check_shape("image", x.pixels.shape(), target.pixels.shape())?;
    let mut tape = Tape::new();
    let xn = tape.input("x", x.pixels.shape());
    let tn = tape.input("target", target.pixels.shape());
    let (rec, per) = record_image_terms(&mut tape, xn, tn)?;
    let rec = tape.scale(rec, alpha)?;
    let per = tape.scale(per, 1.0 - alpha)?;
    let d = tape.add(rec, per)?;
    tape.set_output(d);
    Ok(tape.forward(&[("x", &x.pixels), ("target", &target.pixels)])?.item())
}
