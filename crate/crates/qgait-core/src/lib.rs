//! Quantization-aware training for gait silhouette embeddings.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`tensor`]) on top of which the remaining layers are built:
//! uniform fake-quantization with a learnable step size and two backward
//! rules ([`quant`]), the closed-form gradient-moment analysis of the soft
//! quantizer ([`theory`]), a deterministic synthetic silhouette dataset
//! ([`synthdata`]), the part-based embedding network ([`gaitnet`]),
//! task and distillation losses ([`losses`]), the two-stage training
//! driver ([`trainer`]), retrieval metrics and BitOPs accounting
//! ([`metrics`]), and an integer-arithmetic inference path ([`intinfer`]).
//!
//! The crate is `no_std`-compatible (`alloc` required); all transcendental
//! math goes through `libm` so results are bit-identical across builds.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod fmath;
pub mod gaitnet;
pub mod intinfer;
pub mod losses;
pub mod metrics;
pub mod quant;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
