//! Token importance from attention graphs.
//!
//! Each head's attention map is treated as the weighted adjacency matrix of a
//! directed token graph and scored with weighted PageRank: row-normalize, start
//! from the uniform distribution and iterate `s ← Aᵀs / ‖Aᵀs‖₁` until the L1
//! change drops below `epsilon`. There is no damping term, so the graph must be
//! irreducible and aperiodic for the iteration to converge. Softmax attention
//! is strictly positive, which guarantees both.
//!
//! Per-head scores are fused by a root-mean-square over the heads whose score
//! variance lies inside `[v_min, v_max]`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Per-head `N × N` attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T> {
    heads: Vec<Matrix<T>>,
}

impl<T: Scalar> AttentionMap<T> {
    pub fn new(heads: Vec<Matrix<T>>) -> Result<Self> {
        let Some(first) = heads.first() else {
            return Err(invalid("attention map needs at least one head"));
        };
        let n = first.rows();
        for (h, m) in heads.iter().enumerate() {
            if m.rows() != n || m.cols() != n {
                return Err(invalid(format!("head {h} is not {n}x{n}")));
            }
            if m.data().iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
                return Err(invalid(format!("head {h} has negative or non-finite weights")));
            }
        }
        Ok(Self { heads })
    }

    pub fn heads(&self) -> &[Matrix<T>] {
        &self.heads
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn seq_len(&self) -> usize {
        self.heads[0].rows()
    }
}

/// Per-token scores with a stable descending ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores<T> {
    pub scores: Vec<T>,
    /// Positions by descending score; ties go to the lower position.
    pub sorted_indices: Vec<usize>,
    /// False when an iterative producer hit its iteration cap.
    pub converged: bool,
    pub iterations: usize,
}

impl<T: Scalar> ImportanceScores<T> {
    /// L1-normalizes nonnegative raw scores and ranks them.
    pub fn from_raw(raw: Vec<T>) -> Result<Self> {
        if raw.is_empty() {
            return Err(invalid("no scores"));
        }
        if raw.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
            return Err(invalid("scores must be finite and nonnegative"));
        }
        let total: T = raw.iter().copied().sum();
        if total <= T::zero() {
            return Err(invalid("scores sum to zero"));
        }
        let scores: Vec<T> = raw.into_iter().map(|v| v / total).collect();
        let sorted_indices = rank_descending(&scores);
        Ok(Self {
            scores,
            sorted_indices,
            converged: true,
            iterations: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// 1-based rank of every position in the global ordering.
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.len()];
        for (r, &i) in self.sorted_indices.iter().enumerate() {
            ranks[i] = r + 1;
        }
        ranks
    }
}

/// Stable argsort by descending value; equal values keep position order.
pub fn rank_descending<T: Scalar>(values: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).expect("finite scores"));
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WprConfig {
    pub epsilon: f64,
    pub max_iters: usize,
}

impl Default for WprConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-8,
            max_iters: 1000,
        }
    }
}

fn row_normalized<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = a.clone();
    for i in 0..a.rows() {
        let total: T = a.row(i).iter().copied().sum();
        if !(total > T::zero()) {
            return Err(Error::DegenerateGraph { row: i });
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

/// Weighted PageRank over a single head.
///
/// Hitting `max_iters` is not an error: the last iterate is returned with
/// `converged == false`.
pub fn wpr_single_head<T: Scalar>(a: &Matrix<T>, epsilon: T, max_iters: usize) -> Result<ImportanceScores<T>> {
    let n = a.rows();
    if n == 0 || a.cols() != n {
        return Err(invalid(format!("attention must be square, got {}x{}", a.rows(), a.cols())));
    }
    if a.data().iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
        return Err(invalid("attention weights must be finite and nonnegative"));
    }
    let p = row_normalized(a)?;

    let mut s = vec![T::one() / T::lit(n as f64); n];
    let mut next = vec![T::zero(); n];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        next.iter_mut().for_each(|v| *v = T::zero());
        // next = Pᵀ s
        for (i, &si) in s.iter().enumerate() {
            for (nj, &pij) in next.iter_mut().zip(p.row(i)) {
                *nj += pij * si;
            }
        }
        let total: T = next.iter().copied().sum();
        next.iter_mut().for_each(|v| *v /= total);
        let change: T = next.iter().zip(&s).map(|(&x, &y)| (x - y).abs()).sum();
        std::mem::swap(&mut s, &mut next);
        if change < epsilon {
            converged = true;
            break;
        }
    }
    let sorted_indices = rank_descending(&s);
    Ok(ImportanceScores {
        scores: s,
        sorted_indices,
        converged,
        iterations,
    })
}

/// Population variance of the scores.
pub fn head_variance<T: Scalar>(scores: &ImportanceScores<T>) -> T {
    let n = T::lit(scores.len() as f64);
    let mean = scores.scores.iter().copied().sum::<T>() / n;
    scores.scores.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n
}

/// Variance window for the head filter. Heads outside `[v_min, v_max]` are
/// dropped from fusion when `enabled`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig<T> {
    pub v_min: T,
    pub v_max: T,
    pub enabled: bool,
}

impl<T: Scalar> FusionConfig<T> {
    pub fn disabled() -> Self {
        Self {
            v_min: T::zero(),
            v_max: T::infinity(),
            enabled: false,
        }
    }

    pub fn window(v_min: T, v_max: T) -> Result<Self> {
        if !(v_min >= T::zero() && v_min <= v_max) {
            return Err(Error::Config(format!(
                "variance window needs 0 <= v_min <= v_max, got [{v_min}, {v_max}]"
            )));
        }
        Ok(Self {
            v_min,
            v_max,
            enabled: true,
        })
    }

    fn keeps(&self, variance: T) -> bool {
        !self.enabled || (variance >= self.v_min && variance <= self.v_max)
    }
}

/// Root-mean-square fusion of per-head scores over the heads kept by the
/// variance filter, L1-renormalized.
pub fn fuse_heads<T: Scalar>(per_head: &[ImportanceScores<T>], cfg: &FusionConfig<T>) -> Result<ImportanceScores<T>> {
    let Some(first) = per_head.first() else {
        return Err(invalid("fusion needs at least one head"));
    };
    let n = first.len();
    if per_head.iter().any(|s| s.len() != n) {
        return Err(invalid("heads score different sequence lengths"));
    }
    let kept: Vec<&ImportanceScores<T>> = per_head.iter().filter(|s| cfg.keeps(head_variance(s))).collect();
    if kept.is_empty() {
        return Err(Error::AllHeadsFiltered);
    }
    let count = T::lit(kept.len() as f64);
    let raw: Vec<T> = (0..n)
        .map(|i| (kept.iter().map(|s| s.scores[i] * s.scores[i]).sum::<T>() / count).sqrt())
        .collect();
    let mut fused = ImportanceScores::from_raw(raw)?;
    fused.converged = per_head.iter().all(|s| s.converged);
    fused.iterations = per_head.iter().map(|s| s.iterations).max().unwrap_or(0);
    Ok(fused)
}

/// Column sums of a nonnegative `N_img × N_text` cross-attention matrix.
pub fn cross_attention_baseline<T: Scalar>(c: &Matrix<T>) -> Result<ImportanceScores<T>> {
    if c.data().iter().any(|&v| !(v >= T::zero())) {
        return Err(invalid("cross-attention weights must be nonnegative"));
    }
    let raw: Vec<T> = (0..c.cols()).map(|j| c.column(j).into_iter().sum()).collect();
    ImportanceScores::from_raw(raw)
}

/// How the variance filter thresholds are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadFilter {
    #[default]
    Disabled,
    Fixed { v_min: f64, v_max: f64 },
    /// Thresholds at the given quantiles (in `[0, 1]`) of the observed head
    /// variances, linearly interpolated.
    Percentile { lower: f64, upper: f64 },
}

impl HeadFilter {
    pub fn percentile_default() -> Self {
        HeadFilter::Percentile { lower: 0.1, upper: 0.9 }
    }

    pub fn resolve<T: Scalar>(&self, variances: &[T]) -> Result<FusionConfig<T>> {
        match *self {
            HeadFilter::Disabled => Ok(FusionConfig::disabled()),
            HeadFilter::Fixed { v_min, v_max } => FusionConfig::window(T::lit(v_min), T::lit(v_max)),
            HeadFilter::Percentile { lower, upper } => {
                if !(0.0..=1.0).contains(&lower) || !(0.0..=1.0).contains(&upper) || lower > upper {
                    return Err(Error::Config(format!("bad percentile window [{lower}, {upper}]")));
                }
                FusionConfig::window(quantile(variances, lower), quantile(variances, upper))
            }
        }
    }
}

fn quantile<T: Scalar>(values: &[T], q: f64) -> T {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite variances"));
    if sorted.is_empty() {
        return T::zero();
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::lit(pos - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ImportanceConfig {
    pub wpr: WprConfig,
    pub head_filter: HeadFilter,
}

/// Everything computed for one attention map.
#[derive(Debug, Clone)]
pub struct ImportanceReport<T> {
    pub per_head: Vec<ImportanceScores<T>>,
    pub variances: Vec<T>,
    pub heads_kept: Vec<bool>,
    pub fused: ImportanceScores<T>,
}

pub fn compute_importance<T: Scalar>(map: &AttentionMap<T>, cfg: &ImportanceConfig) -> Result<ImportanceReport<T>> {
    let epsilon = T::lit(cfg.wpr.epsilon);
    let per_head = map
        .heads()
        .iter()
        .map(|h| wpr_single_head(h, epsilon, cfg.wpr.max_iters))
        .collect::<Result<Vec<_>>>()?;
    let variances: Vec<T> = per_head.iter().map(head_variance).collect();
    let fusion = cfg.head_filter.resolve(&variances)?;
    let heads_kept = variances.iter().map(|&v| fusion.keeps(v)).collect();
    let fused = fuse_heads(&per_head, &fusion)?;
    Ok(ImportanceReport {
        per_head,
        variances,
        heads_kept,
        fused,
    })
}
