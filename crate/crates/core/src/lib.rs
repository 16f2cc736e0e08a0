//! Prompt-inversion video streaming at desk scale.
//!
//! Frames are inverted into low-rank, quantized prompt factors by gradient
//! descent through a frozen differentiable generator ([`toygen`],
//! [`inversion`]), written to a fixed-layout bitstream ([`bitstream`]),
//! shipped over a trace-replayed link with closest-bitrate ABR ([`sender`],
//! [`netsim`]) and regenerated by prompt interpolation and sequential
//! generation ([`receiver`]). [`eval`] holds metrics and experiment sweeps;
//! [`cli`] is the command-line surface.

pub mod autodiff;
pub mod bitstream;
pub mod cli;
pub mod eval;
pub mod fixtures;
pub mod kernels;
pub mod netsim;
pub mod receiver;
pub mod rng;
pub mod sender;
pub mod tensor;
pub mod inversion;
pub mod toygen;

pub use tensor::Tensor;
