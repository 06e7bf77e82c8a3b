//! mergeforge-core: weight-space merging of transformer checkpoints.
//!
//! The crate fabricates small "expert" models from a shared base, merges
//! them with data-free methods (linear soup, SLERP, TIES, DARE-TIES), with
//! gradient-learned per-column scaling coefficients (differentiable adaptive
//! merging), or with a (μ+λ) evolution strategy over per-layer weights, and
//! evaluates the results.
//!
//! Module map:
//! - [`tensor`] / [`tape`]: dense tensors and a tape-based reverse-mode
//!   autodiff engine sized exactly for the reference model and objectives.
//! - [`checkpoint`]: safetensors container I/O and compatibility checks.
//! - [`model`]: a compact decoder-only transformer (RMSNorm, causal
//!   attention, gated MLP) for fabricating and evaluating experts.
//! - [`merge`]: data-free merging over task vectors.
//! - [`dam`]: trainable per-column merge coefficients and their objectives.
//! - [`evo`]: the evolutionary per-layer baseline.

pub mod checkpoint;
pub mod dam;
pub mod error;
pub mod evo;
pub mod merge;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
