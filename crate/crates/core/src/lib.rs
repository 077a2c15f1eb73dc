//! Single-image reflection removal built around a patch-wise
//! reflection-intensity prior.
//!
//! The pipeline has three stages: synthetic superimposition of a
//! transmission layer and a degraded reflection layer, estimation of a
//! per-patch reflection-intensity prior, and a prior-conditioned U-Net
//! restorer. Everything runs on a small reverse-mode tensor engine so the
//! whole stack is CPU-only, deterministic, and testable end to end.
//!
//! Modules:
//! - [`tensor`]: reverse-mode autodiff tape, conv/attention/norm primitives,
//!   gradient verification, Adam.
//! - [`synthesis`]: superimposition model, degradation kernels, PPM/PGM I/O,
//!   dataset generation.
//! - [`prior`]: patch segmentation, reflection-intensity computation, and
//!   sinusoidal prior encoding.
//! - [`prrn`]: the prior-conditioned restorer network.
//! - [`rpen`]: the prior-extraction network (predicts the prior from a single
//!   superimposed image).
//! - [`metrics`]: PSNR, SSIM, patch pixel error.
//! - [`harness`]: deterministic training/evaluation orchestration, checkpoint
//!   format, inference.

pub mod harness;
pub mod metrics;
pub mod prior;
pub mod prrn;
pub mod rng;
pub mod rpen;
pub mod synthesis;
pub mod tensor;
