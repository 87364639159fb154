//! Multi-gate residual streams for small trainable transformer language
//! models.
//!
//! The crate keeps several parallel residual streams per token, updates each
//! one by a gated convex interpolation toward the sublayer output, and pools
//! the streams back into a working hidden state with learned attention
//! weights. Around that core it provides:
//!
//! - a dense tensor type with reverse-mode differentiation ([`tape`]),
//!   verified op-by-op against central finite differences ([`check`]);
//! - the gating/pooling primitives, stability invariants, depth-adaptive
//!   gate-bias initialization, and the interpolation inverse ([`residual`]);
//! - a decoder-only transformer with pluggable residual wiring ([`model`]);
//! - Muon + AdamW optimizers with warmup/cosine scheduling ([`optim`]);
//! - training with checkpointing and an inversion-based activation-recompute
//!   engine ([`train`]);
//! - depth-wise diagnostics: angular distances, massive-activation traces,
//!   RMS profiles, gate statistics, pruning sweeps, and the fused-kernel I/O
//!   estimator ([`diagnostics`]);
//! - a small command-line front end ([`cli`]).
//!
//! Start with the `examples/` directory; each file is a runnable tour of one
//! capability.

pub mod check;
pub mod ckpt;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod model;
pub mod optim;
pub mod train;
pub mod error;
pub mod residual;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{MgrError, Result};
pub use tape::{GradTape, NodeId};
pub use tensor::{Real, Tensor};
