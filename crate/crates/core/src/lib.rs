//! Condition-degradation guidance (CDG) on a toy conditional diffusion model.
//!
//! A deterministic text encoder produces token embeddings and self-attention
//! maps; Weighted PageRank over those maps ranks tokens; a stratified mask
//! replaces the most important tokens with the null condition; and the
//! degraded condition serves as the negative branch of guidance in an Euler
//! sampler over an exact Gaussian-mixture denoiser. The `geometry` module
//! measures how guidance deltas sit relative to the denoising subspace.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod degradation;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod guidance;
pub mod importance;
pub mod linalg;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type Encoder64 = encoder::TextEncoder<f64>;
pub type Encoder32 = encoder::TextEncoder<f32>;
pub type Model64 = diffusion::GmmConditionalModel<f64>;
pub type Model32 = diffusion::GmmConditionalModel<f32>;
pub type Sampler64 = diffusion::CdgSampler<f64>;
pub type Sampler32 = diffusion::CdgSampler<f32>;
pub type Schedule64 = diffusion::SigmaSchedule<f64>;
pub type Scores64 = importance::ImportanceScores<f64>;
pub type Prediction64 = guidance::Prediction<f64>;
