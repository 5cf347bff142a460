//! Seed derivation and seeded sampling helpers.
//!
//! Every random quantity in the crate comes from a ChaCha8 stream whose seed is
//! derived from one master seed plus a textual tag, so independent components
//! never share a stream and results are identical across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a. Stable across Rust releases, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut buf = Vec::with_capacity(16 + tag.len());
    buf.extend_from_slice(&master.to_le_bytes());
    buf.extend_from_slice(tag.as_bytes());
    buf.extend_from_slice(&index.to_le_bytes());
    fnv1a(&buf)
}

pub fn stream(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, index))
}

#[inline]
pub fn normal<T: Scalar, R: rand::Rng + ?Sized>(rng: &mut R) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::lit(z)
}

pub fn normal_vec<T: Scalar, R: rand::Rng + ?Sized>(rng: &mut R, len: usize, scale: T) -> Vec<T> {
    (0..len).map(|_| normal::<T, _>(rng) * scale).collect()
}
