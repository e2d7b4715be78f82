//! Spectral domain-invariant / domain-specific decoupling with spatial-spectral
//! coupling, trained under a two-stage mean-teacher loop on synthetic data.
//!
//! The numeric modules are generic over [`Scalar`] (`f32`, `f64`); the aliases
//! at the crate root fix the scalar to `f64`, which the trainer uses throughout.

// `!(x > 0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod coupling;
pub mod data;
pub mod error;
pub mod filter;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod said;
pub mod scalar;
pub mod spectral;
pub mod svg;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ImagePlane = spectral::ImagePlane<f64>;
pub type Spectrum = spectral::Spectrum<f64>;
pub type RadialField = spectral::RadialField<f64>;
pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tape::Tape<f64>;
pub type ParamStore = params::ParamStore<f64>;
