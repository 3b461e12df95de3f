//! Unfolded direct-diffusion-bridge reconstruction for low-dose parallel-beam CT.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: a small f64 tensor engine with a dynamic reverse-mode tape and AdamW.
//! * [`physics`]: phantoms, the ray-driven projector and its matched adjoint, FBP and
//!   low-dose noise simulation.
//! * [`schedule`]: the triangular β schedule and the bridge marginals derived from it.
//! * [`net`]: one unfolded iteration, a gradient step on the data term followed by a
//!   time-conditioned residual CNN.
//! * [`train`]: rollout-based training, stage-wise sampling and checkpoints.
//! * [`metrics`]: PSNR, SSIM and CSV reports.
//! * [`io`]: the `CTF1` array format and the on-disk dataset layout.

pub mod error;
pub mod io;
pub mod metrics;
pub mod net;
pub mod physics;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
