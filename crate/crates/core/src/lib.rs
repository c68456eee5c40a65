//! Cross-layer weight sharing with low-rank deltas for small decoder-only
//! transformers.
//!
//! Later-layer weights are re-expressed as an earlier *anchor* weight plus a
//! trainable low-rank correction, `W_target ≈ W_anchor + s·A·B`. The crate
//! carries everything that is pure computation:
//!
//! - [`tensor`], [`graph`], [`linalg`]: dense tensors, reverse-mode autodiff,
//!   GEMM / truncated SVD / QR.
//! - [`model`]: a pre-norm RMSNorm + RoPE attention + SiLU-gated MLP transformer
//!   with addressable [`model::WeightSite`]s.
//! - [`delta`]: sharing plans, delta initialization and compressed models.
//! - [`redundancy`]: similarity-driven and structural plan builders.
//! - [`pmr`]: progressive module replacement distillation.
//! - [`quant`]: per-row int8 and NF4 weight quantization.
//!
//! The crate is `no_std` (with `alloc`); enable the `std` feature for runtime
//! SIMD dispatch in the GEMM kernel.
#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod delta;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod pmr;
pub mod quant;
pub mod redundancy;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
