//! Priority-centric discrete diffusion over vector-quantized token sequences.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: token and continuous corpora, synthetic generators, frequency statistics
//! - [`quantizer`]: codebooks, normalized nearest-neighbour quantization, VQ losses, toy training
//! - [`priority`]: per-token priority scores from corpus entropy or a learned ordering agent
//! - [`schedule`]: linear base schedules, priority modulation, per-step parameter recovery
//! - [`diffusion`]: mask-and-replace transition kernels, marginals, posteriors, reverse steps, VLB
//! - [`denoiser`]: the denoiser contract plus oracle and tabular implementations
//! - [`oracle`]: brute-force reference computations used by tests and [`verify`]
//! - [`verify`]: the desk-scale verification suite behind `priodiff verify`
//!
//! State `K` is the absorbing MASK token and `K + 1` is PAD. PAD never enters the
//! diffusion state space; padded positions are frozen by every kernel.

pub mod corpus;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod oracle;
pub mod priority;
pub mod quantizer;
pub mod rng;
pub mod schedule;
pub mod verify;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
