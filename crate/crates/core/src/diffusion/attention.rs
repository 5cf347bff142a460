//! Latent-dependent attention at the intervention block.
//!
//! The toy keeps text encoding separate from denoising, so the block attention
//! is recomputed from the encoder's stored queries and keys with an additive
//! query offset `weight · W · [x; σ]`. The map then tracks the denoising state
//! and importance computed at different steps can disagree.

use crate::encoder::{EncoderTrace, TextEncoder, TokenSequence};
use crate::error::{invalid, Result};
use crate::importance::AttentionMap;
use crate::linalg::Matrix;
use crate::rng;
use crate::scalar::Scalar;

pub const DEFAULT_BIAS_WEIGHT: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct AttentionProvider<T> {
    weight: T,
    /// `embed_dim × (data_dim + 1)`.
    map: Matrix<T>,
}

impl<T: Scalar> AttentionProvider<T> {
    pub fn new(embed_dim: usize, data_dim: usize, weight: f64, seed: u64) -> Result<Self> {
        if !weight.is_finite() {
            return Err(invalid("attention bias weight must be finite"));
        }
        let mut r = rng::stream(seed, "attention-provider", 0);
        let scale = T::lit(1.0 / ((data_dim + 1) as f64).sqrt());
        Ok(Self {
            weight: T::lit(weight),
            map: Matrix::from_fn(embed_dim, data_dim + 1, |_, _| rng::normal::<T, _>(&mut r) * scale),
        })
    }

    pub fn weight(&self) -> T {
        self.weight
    }

    pub fn data_dim(&self) -> usize {
        self.map.cols() - 1
    }

    pub fn embed_dim(&self) -> usize {
        self.map.rows()
    }

    /// `None` when the bias weight is zero.
    pub fn query_offset(&self, x: &[T], sigma: T) -> Result<Option<Vec<T>>> {
        if x.len() != self.data_dim() {
            return Err(invalid(format!(
                "latent has length {}, provider expects {}",
                x.len(),
                self.data_dim()
            )));
        }
        if self.weight == T::zero() {
            return Ok(None);
        }
        let mut features = x.to_vec();
        features.push(sigma);
        let mut offset = self.map.matvec(&features)?;
        offset.iter_mut().for_each(|v| *v *= self.weight);
        Ok(Some(offset))
    }

    /// Block-`block` attention for an already traced prompt.
    pub fn attention_for_trace(
        &self,
        encoder: &TextEncoder<T>,
        trace: &EncoderTrace<T>,
        x: &[T],
        sigma: T,
        block: usize,
    ) -> Result<AttentionMap<T>> {
        let offset = self.query_offset(x, sigma)?;
        encoder.block_attention(trace, block, offset.as_deref())
    }

    pub fn attention_map(
        &self,
        encoder: &TextEncoder<T>,
        tokens: &TokenSequence,
        x: &[T],
        sigma: T,
        block: usize,
    ) -> Result<AttentionMap<T>> {
        if block >= encoder.params().num_blocks {
            return Err(invalid(format!(
                "lambda_block {block} out of range (encoder has {} blocks)",
                encoder.params().num_blocks
            )));
        }
        let trace = encoder.trace(tokens)?;
        self.attention_for_trace(encoder, &trace, x, sigma, block)
    }
}
