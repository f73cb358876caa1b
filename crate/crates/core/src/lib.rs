//! LongVQ: a gated SSM-attention hybrid whose keys are vector-quantized into a
//! fixed-size codebook, which lets attention run in time linear in the
//! sequence length.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: tensors, FFT convolution, a reverse-mode tape and a
//!   finite-difference oracle.
//! - [`ssm`]: S4-initialised state-space channels, bilinear discretization and
//!   kernel materialization.
//! - [`vq`]: codebooks with EMA statistics and straight-through quantization.
//! - [`attention`]: the gated attention layer with interchangeable attention
//!   functions and kernels (dense oracle, factored linear-time).
//! - [`model`], [`train`], [`tasks`]: blocks, optimisation and desk-scale data.
//!
//! Interchangeable pieces (attention functions, attention kernels, norms,
//! tasks) are registered by name in a [`registry::Registry`] and selected at
//! runtime from configuration.

pub mod attention;
pub mod error;
pub mod model;
pub mod numerics;
pub mod registry;
pub mod ssm;
pub mod tasks;
pub mod train;
pub mod vq;

pub use error::{Error, Result};
pub use numerics::{Graph, Real, Rng, Tensor, Var};
