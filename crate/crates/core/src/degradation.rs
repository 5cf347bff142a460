//! Stratified condition degradation.
//!
//! One ratio `R ∈ [0, 2]` drives two per-type ratios: content tokens are
//! replaced first (`r_content = min(R, 1)`), context-aggregating tokens only
//! once every content token is gone (`r_ctxagg = max(R − 1, 0)`). Within each
//! type the most important tokens go first.

use serde::Serialize;

use crate::encoder::{Condition, TokenKind, TokenSequence};
use crate::error::{invalid, Error, Result};
use crate::importance::ImportanceScores;
use crate::scalar::Scalar;

/// Absorbs rounding in `r · count` so that e.g. `(1.7 − 1) · 10` floors to 7.
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DegradationRatios {
    pub r_deg: f64,
    pub r_content: f64,
    pub r_ctxagg: f64,
}

impl DegradationRatios {
    pub fn k_content(&self, content_count: usize) -> usize {
        replace_count(self.r_content, content_count)
    }

    pub fn k_ctxagg(&self, ctxagg_count: usize) -> usize {
        replace_count(self.r_ctxagg, ctxagg_count)
    }

    /// `R == 1`: every content token and no context-aggregating token is
    /// replaced, so the mask depends on token types alone.
    pub fn is_type_boundary(&self) -> bool {
        self.r_deg == 1.0
    }
}

fn replace_count(ratio: f64, count: usize) -> usize {
    ((ratio * count as f64 + FLOOR_SLACK).floor() as usize).min(count)
}

pub fn map_ratio(r_deg: f64) -> Result<DegradationRatios> {
    if !(0.0..=2.0).contains(&r_deg) {
        return Err(Error::InvalidRatio(r_deg));
    }
    Ok(DegradationRatios {
        r_deg,
        r_content: r_deg.min(1.0),
        r_ctxagg: (r_deg - 1.0).max(0.0),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DegradationMask {
    /// 1 keeps the token, 0 replaces it with the null condition's row.
    pub bits: Vec<u8>,
    pub k_content: usize,
    pub k_ctxagg: usize,
    /// Ascending positions with bit 0.
    pub replaced_indices: Vec<usize>,
    /// 1-based rank of each position within its own type.
    pub rank_within_type: Vec<usize>,
}

impl DegradationMask {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn replaced_count(&self) -> usize {
        self.replaced_indices.len()
    }
}

/// Builds the mask from a global importance ordering (most important first).
/// Each type keeps the relative order its positions have in `sorted_indices`.
pub fn build_mask_from_order(tokens: &TokenSequence, sorted_indices: &[usize], ratios: &DegradationRatios) -> Result<DegradationMask> {
    let n = tokens.len();
    if sorted_indices.len() != n {
        return Err(invalid(format!(
            "ordering covers {} positions, sequence has {n}",
            sorted_indices.len()
        )));
    }
    let mut seen = vec![false; n];
    for &i in sorted_indices {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(invalid("ordering is not a permutation of the positions"));
        }
    }

    let content_total = tokens.content_count();
    let k_content = ratios.k_content(content_total);
    let k_ctxagg = ratios.k_ctxagg(n - content_total);

    let mut bits = vec![1u8; n];
    let mut rank_within_type = vec![0usize; n];
    let (mut content_rank, mut ctxagg_rank) = (0, 0);
    for &i in sorted_indices {
        let (rank, k) = match tokens.kinds[i] {
            TokenKind::Content => {
                content_rank += 1;
                (content_rank, k_content)
            }
            TokenKind::CtxAgg => {
                ctxagg_rank += 1;
                (ctxagg_rank, k_ctxagg)
            }
        };
        rank_within_type[i] = rank;
        if rank <= k {
            bits[i] = 0;
        }
    }
    let replaced_indices = (0..n).filter(|&i| bits[i] == 0).collect();
    Ok(DegradationMask {
        bits,
        k_content,
        k_ctxagg,
        replaced_indices,
        rank_within_type,
    })
}

pub fn build_mask<T: Scalar>(tokens: &TokenSequence, importance: &ImportanceScores<T>, ratios: &DegradationRatios) -> Result<DegradationMask> {
    if importance.len() != tokens.len() {
        return Err(invalid(format!(
            "importance covers {} positions, sequence has {}",
            importance.len(),
            tokens.len()
        )));
    }
    build_mask_from_order(tokens, &importance.sorted_indices, ratios)
}

/// Mask at `R == 1`: zero every content position, keep every other one.
/// Needs no importance scores. Within-type ranks follow position order.
pub fn type_only_mask(tokens: &TokenSequence) -> DegradationMask {
    let identity: Vec<usize> = (0..tokens.len()).collect();
    let ratios = map_ratio(1.0).expect("1.0 is in range");
    build_mask_from_order(tokens, &identity, &ratios).expect("identity is a permutation")
}

/// Row-wise interpolation `m ⊙ c + (1 − m) ⊙ ∅`.
pub fn apply_mask<T: Scalar>(c: &Condition<T>, null: &Condition<T>, mask: &DegradationMask) -> Result<Condition<T>> {
    if c.seq_len() != null.seq_len() || c.dim() != null.dim() || mask.len() != c.seq_len() {
        return Err(invalid(format!(
            "shape mismatch: condition {}x{}, null {}x{}, mask {}",
            c.seq_len(),
            c.dim(),
            null.seq_len(),
            null.dim(),
            mask.len()
        )));
    }
    let mut out = c.clone();
    for &i in &mask.replaced_indices {
        out.embeddings.row_mut(i).copy_from_slice(null.embeddings.row(i));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{tokenize, EncoderParams};
    use crate::linalg::Matrix;

    fn eight_tokens() -> TokenSequence {
        let p = EncoderParams {
            seq_len: 8,
            ..EncoderParams::default()
        };
        tokenize("a man is cooking", &p).unwrap()
    }

    #[test]
    fn ratio_mapping() {
        let r = map_ratio(1.0).unwrap();
        assert_eq!((r.r_content, r.r_ctxagg), (1.0, 0.0));
        let r = map_ratio(1.1).unwrap();
        assert_eq!(r.r_content, 1.0);
        assert!((r.r_ctxagg - 0.1).abs() < 1e-15);
        let r = map_ratio(0.0).unwrap();
        assert_eq!((r.r_content, r.r_ctxagg), (0.0, 0.0));
        assert!(matches!(map_ratio(2.01), Err(Error::InvalidRatio(_))));
        assert!(map_ratio(-0.1).is_err());
        assert!(map_ratio(f64::NAN).is_err());
    }

    #[test]
    fn floor_survives_rounding() {
        // 1.7 - 1.0 is slightly below 0.7 in binary
        assert_eq!(map_ratio(1.7).unwrap().k_ctxagg(10), 7);
        assert_eq!(map_ratio(0.3).unwrap().k_content(10), 3);
        assert_eq!(map_ratio(0.29).unwrap().k_content(10), 2);
    }

    #[test]
    fn endpoint_masks() {
        let t = eight_tokens();
        let scores = ImportanceScores::from_raw(vec![0.1, 0.3, 0.05, 0.2, 0.15, 0.1, 0.05, 0.05]).unwrap();
        let none = build_mask(&t, &scores, &map_ratio(0.0).unwrap()).unwrap();
        assert!(none.bits.iter().all(|&b| b == 1));
        let all = build_mask(&t, &scores, &map_ratio(2.0).unwrap()).unwrap();
        assert!(all.bits.iter().all(|&b| b == 0));
    }

    #[test]
    fn one_point_two_five_on_eight_tokens() {
        let t = eight_tokens();
        // CtxAgg positions 0,5,6,7 ; position 6 is the most important of them
        let scores = ImportanceScores::from_raw(vec![0.05, 0.2, 0.1, 0.15, 0.25, 0.04, 0.2, 0.01]).unwrap();
        let m = build_mask(&t, &scores, &map_ratio(1.25).unwrap()).unwrap();
        assert_eq!((m.k_content, m.k_ctxagg), (4, 1));
        assert_eq!(m.replaced_indices, vec![1, 2, 3, 4, 6]);
        assert_eq!(m.bits, vec![1, 0, 0, 0, 0, 1, 0, 1]);
        assert_eq!(m.rank_within_type[6], 1);
        assert_eq!(m.rank_within_type[4], 1);
    }

    #[test]
    fn empty_prompt_has_no_content_to_replace() {
        let t = tokenize("", &EncoderParams::default()).unwrap();
        let order: Vec<usize> = (0..t.len()).collect();
        let m = build_mask_from_order(&t, &order, &map_ratio(1.5).unwrap()).unwrap();
        assert_eq!(m.k_content, 0);
        assert_eq!(m.k_ctxagg, 8);
        assert_eq!(m.replaced_indices, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn type_only_mask_zeros_content() {
        let t = eight_tokens();
        let m = type_only_mask(&t);
        assert_eq!(m.bits, vec![1, 0, 0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn rejects_bad_orderings() {
        let t = eight_tokens();
        let r = map_ratio(0.5).unwrap();
        assert!(build_mask_from_order(&t, &[0, 1, 2], &r).is_err());
        assert!(build_mask_from_order(&t, &[0, 1, 2, 3, 4, 5, 6, 6], &r).is_err());
        assert!(build_mask_from_order(&t, &[0, 1, 2, 3, 4, 5, 6, 8], &r).is_err());
    }

    fn conditions() -> (Condition<f64>, Condition<f64>) {
        let c = Condition::new(Matrix::from_fn(8, 3, |i, j| (i * 3 + j) as f64)).unwrap();
        let null = Condition::new(Matrix::from_fn(8, 3, |i, j| -((i + j) as f64) - 0.5)).unwrap();
        (c, null)
    }

    #[test]
    fn masked_interpolation() {
        let t = eight_tokens();
        let (c, null) = conditions();
        let order: Vec<usize> = (0..8).collect();
        let keep = build_mask_from_order(&t, &order, &map_ratio(0.0).unwrap()).unwrap();
        assert_eq!(apply_mask(&c, &null, &keep).unwrap(), c);
        let drop = build_mask_from_order(&t, &order, &map_ratio(2.0).unwrap()).unwrap();
        assert_eq!(apply_mask(&c, &null, &drop).unwrap(), null);

        let mut single = keep.clone();
        single.bits[3] = 0;
        single.replaced_indices = vec![3];
        let out = apply_mask(&c, &null, &single).unwrap();
        for i in 0..8 {
            let expected = if i == 3 { null.embeddings.row(i) } else { c.embeddings.row(i) };
            assert_eq!(out.embeddings.row(i), expected);
        }
        assert_eq!(apply_mask(&out, &null, &single).unwrap(), out);
    }

    #[test]
    fn interpolation_shape_checks() {
        let t = eight_tokens();
        let (c, _) = conditions();
        let other = Condition::new(Matrix::<f64>::zeros(8, 4)).unwrap();
        assert!(apply_mask(&c, &other, &type_only_mask(&t)).is_err());
    }
}
