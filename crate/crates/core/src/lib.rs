//! Prompt-adaptive mixed-precision quantization of a toy conditional
//! denoising-diffusion model.
//!
//! A text-to-quality predictor maps a prompt embedding to an expected
//! generation quality; a quality-to-bit allocator turns that quality and the
//! denoising step into per-layer activation bit-widths. Everything runs on a
//! small MLP denoiser over synthetic data so the whole pipeline fits on a
//! laptop.

// Range checks are written as negated comparisons so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod qlip;
pub mod quant;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
