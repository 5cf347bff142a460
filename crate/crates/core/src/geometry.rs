//! Subspace geometry of guidance directions.
//!
//! The principal denoising subspace at a noise level is the top right-singular
//! subspace of conditional noise predictions stacked across prompts. A guidance
//! delta is scored by its principal angles to that subspace (decoupling, 1 =
//! orthogonal) and by the fraction of its energy the subspace captures
//! (interference, 0 = none).

use serde::Serialize;

use crate::degradation::{build_mask_from_order, map_ratio, type_only_mask};
use crate::diffusion::{CdgSampler, PreparedPrompt, SigmaSchedule};
use crate::error::{invalid, Error, Result};
use crate::guidance::{guidance_delta, GuidanceConfig, GuidanceMode, Prediction};
use crate::linalg::{norm, principal_angle_sines_squared, project_onto, thin_svd, Matrix};
use crate::rng;
use crate::scalar::Scalar;

/// Share of squared singular-value mass the default subspace dimension keeps.
pub const ENERGY_FRACTION: f64 = 0.9;

/// Conditional noise predictions at one noise level, one row per prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionStack<T> {
    pub sigma: T,
    pub rows: Matrix<T>,
}

impl<T: Scalar> PredictionStack<T> {
    pub fn new(sigma: T, rows: Matrix<T>) -> Result<Self> {
        if rows.rows() == 0 || rows.cols() == 0 {
            return Err(invalid("prediction stack is empty"));
        }
        if !rows.is_finite() || !sigma.is_finite() {
            return Err(invalid("prediction stack has non-finite entries"));
        }
        Ok(Self { sigma, rows })
    }

    pub fn num_prompts(&self) -> usize {
        self.rows.rows()
    }
}

/// Orthonormal `d_x × k` basis of the top-`k` right-singular subspace.
pub fn estimate_subspace<T: Scalar>(stack: &PredictionStack<T>, k: usize) -> Result<Matrix<T>> {
    if k == 0 {
        return Err(invalid("subspace dimension must be at least 1"));
    }
    let svd = thin_svd(&stack.rows)?;
    let rank = svd.rank();
    if k > rank {
        return Err(Error::RankDeficient { requested: k, rank });
    }
    Ok(Matrix::from_fn(stack.rows.cols(), k, |i, j| svd.vt[(j, i)]))
}

/// Smallest `k` whose singular values hold `ENERGY_FRACTION` of the squared
/// mass, capped at `num_prompts − 1` and at the numerical rank (never below 1).
pub fn default_subspace_dim<T: Scalar>(stack: &PredictionStack<T>) -> Result<usize> {
    let svd = thin_svd(&stack.rows)?;
    let rank = svd.rank();
    if rank == 0 {
        return Err(Error::RankDeficient { requested: 1, rank: 0 });
    }
    let energy: Vec<f64> = svd.s.iter().map(|v| v.as_f64() * v.as_f64()).collect();
    let total: f64 = energy.iter().sum();
    let mut acc = 0.0;
    let mut k = energy.len();
    for (i, e) in energy.iter().enumerate() {
        acc += e;
        if acc >= ENERGY_FRACTION * total {
            k = i + 1;
            break;
        }
    }
    Ok(k.min(stack.num_prompts().saturating_sub(1)).min(rank).max(1))
}

/// Orthonormal basis of the column span of `delta`.
fn delta_basis<T: Scalar>(delta: &Matrix<T>) -> Result<Matrix<T>> {
    if delta.cols() == 1 {
        let v = delta.column(0);
        let n = norm(&v);
        if !(n > T::zero()) {
            return Err(Error::UndefinedMetric("guidance delta is zero".into()));
        }
        return Ok(Matrix::column_vector(&v.iter().map(|&x| x / n).collect::<Vec<_>>()));
    }
    if !(delta.frobenius_norm() > T::zero()) {
        return Err(Error::UndefinedMetric("guidance delta is zero".into()));
    }
    let svd = thin_svd(delta)?;
    let rank = svd.rank();
    Ok(Matrix::from_fn(delta.rows(), rank, |i, j| svd.u[(i, j)]))
}

/// Mean `sin²` of the principal angles between the span of the columns of
/// `delta` and `span(basis)`.
pub fn decoupling<T: Scalar>(delta: &Matrix<T>, basis: &Matrix<T>) -> Result<T> {
    if delta.rows() != basis.rows() {
        return Err(invalid("delta and basis live in different spaces"));
    }
    let span = delta_basis(delta)?;
    let sines = principal_angle_sines_squared(&span, basis)?;
    let n = T::lit(sines.len() as f64);
    Ok(sines.into_iter().sum::<T>() / n)
}

/// `‖P·delta‖² / ‖delta‖²` with `P` the orthogonal projector onto `span(basis)`.
pub fn interference<T: Scalar>(delta: &Matrix<T>, basis: &Matrix<T>) -> Result<T> {
    let total = delta.frobenius_norm();
    if !(total > T::zero()) {
        return Err(Error::UndefinedMetric("guidance delta is zero".into()));
    }
    let projected = project_onto(basis, delta)?.frobenius_norm();
    let ratio = (projected / total) * (projected / total);
    Ok(ratio.min(T::one()))
}

pub fn decoupling_vec<T: Scalar>(delta: &[T], basis: &Matrix<T>) -> Result<T> {
    decoupling(&Matrix::column_vector(delta), basis)
}

pub fn interference_vec<T: Scalar>(delta: &[T], basis: &Matrix<T>) -> Result<T> {
    interference(&Matrix::column_vector(delta), basis)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptMetrics {
    pub decoupling: Option<f64>,
    pub interference: Option<f64>,
    /// Set when the metrics are undefined for this prompt.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodMetrics {
    pub method: GuidanceMode,
    pub decoupling_mean: Option<f64>,
    pub interference_mean: Option<f64>,
    pub num_valid_prompts: usize,
    /// Metrics of the subspace spanned by all valid deltas together.
    pub pooled_decoupling: Option<f64>,
    pub pooled_interference: Option<f64>,
    pub per_prompt: Vec<PromptMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometryRecord {
    pub sigma: f64,
    pub subspace_dim: usize,
    pub singular_values: Vec<f64>,
    pub cfg: MethodMetrics,
    pub cdg: MethodMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometryReport {
    pub num_prompts: usize,
    pub records: Vec<GeometryRecord>,
}

impl GeometryReport {
    /// Every reported metric value, for range checks.
    pub fn metric_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for r in &self.records {
            for m in [&r.cfg, &r.cdg] {
                out.extend(m.decoupling_mean);
                out.extend(m.interference_mean);
                out.extend(m.pooled_decoupling);
                out.extend(m.pooled_interference);
                for p in &m.per_prompt {
                    out.extend(p.decoupling);
                    out.extend(p.interference);
                }
            }
        }
        out
    }
}

/// Positive and negative noise predictions a mode would combine at `(x, σ)`.
fn guidance_pair<T: Scalar>(
    sampler: &CdgSampler<T>,
    prompt: &PreparedPrompt<T>,
    x: &[T],
    sigma: T,
    config: &GuidanceConfig,
    order: Option<&[usize]>,
    cond: &Prediction<T>,
) -> Result<(Prediction<T>, Prediction<T>)> {
    let uncond = || sampler.noise_prediction(x, sigma, sampler.null_embedding());
    match config.mode {
        GuidanceMode::None => Ok((cond.clone(), cond.clone())),
        GuidanceMode::Cfg => Ok((cond.clone(), uncond()?)),
        GuidanceMode::Cdg | GuidanceMode::CfgStar => {
            let ratios = map_ratio(config.r_deg.expect("validated: degradation modes carry r_deg"))?;
            let mask = if ratios.is_type_boundary() {
                type_only_mask(&prompt.tokens)
            } else {
                let order = match order {
                    Some(o) => o.to_vec(),
                    None => sampler.importance_at(prompt, x, sigma, config.lambda_block)?.fused.sorted_indices,
                };
                build_mask_from_order(&prompt.tokens, &order, &ratios)?
            };
            let e_deg = sampler.degraded_embedding(prompt, &mask)?;
            let degraded = sampler.noise_prediction(x, sigma, &e_deg)?;
            if config.mode == GuidanceMode::Cdg {
                Ok((cond.clone(), degraded))
            } else {
                Ok((degraded, uncond()?))
            }
        }
    }
}

fn summarize<T: Scalar>(method: GuidanceMode, deltas: &[Vec<T>], basis: &Matrix<T>) -> Result<MethodMetrics> {
    let mut per_prompt = Vec::with_capacity(deltas.len());
    let mut valid: Vec<&Vec<T>> = Vec::new();
    for delta in deltas {
        match (decoupling_vec(delta, basis), interference_vec(delta, basis)) {
            (Ok(d), Ok(i)) => {
                valid.push(delta);
                per_prompt.push(PromptMetrics {
                    decoupling: Some(d.as_f64()),
                    interference: Some(i.as_f64()),
                    note: None,
                });
            }
            (Err(Error::UndefinedMetric(msg)), _) | (_, Err(Error::UndefinedMetric(msg))) => per_prompt.push(PromptMetrics {
                decoupling: None,
                interference: None,
                note: Some(msg),
            }),
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    let mean = |f: fn(&PromptMetrics) -> Option<f64>| {
        let vals: Vec<f64> = per_prompt.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let (pooled_decoupling, pooled_interference) = if valid.is_empty() {
        (None, None)
    } else {
        let stacked = Matrix::from_columns(&valid)?;
        (
            Some(decoupling(&stacked, basis)?.as_f64()),
            Some(interference(&stacked, basis)?.as_f64()),
        )
    };
    Ok(MethodMetrics {
        method,
        decoupling_mean: mean(|p| p.decoupling),
        interference_mean: mean(|p| p.interference),
        num_valid_prompts: valid.len(),
        pooled_decoupling,
        pooled_interference,
        per_prompt,
    })
}

/// Compares the guidance deltas of two configurations across noise levels.
///
/// Each prompt gets one clean sample `x₀` from the model and one noise
/// direction `z`; at level `σ` its latent is `x₀ + σ·z`, shared by both methods.
/// With `reuse_first_step_mask` a degradation method ranks tokens once per
/// prompt at the first level. `k = None` picks the dimension per level with
/// [`default_subspace_dim`].
pub fn run_geometry_sweep<T: Scalar>(
    sampler: &CdgSampler<T>,
    schedule: &SigmaSchedule<T>,
    prompts: &[PreparedPrompt<T>],
    config_cfg: &GuidanceConfig,
    config_cdg: &GuidanceConfig,
    k: Option<usize>,
    seed: u64,
) -> Result<GeometryReport> {
    config_cfg.validate()?;
    config_cdg.validate()?;
    if config_cfg.guidance_scale != config_cdg.guidance_scale {
        return Err(Error::Config("both methods must share the guidance scale".into()));
    }
    let needed = k.unwrap_or(1) + 1;
    if prompts.len() < needed {
        return Err(invalid(format!(
            "geometry needs at least {needed} prompts, got {}",
            prompts.len()
        )));
    }
    let num_blocks = sampler.encoder().params().num_blocks;
    for c in [config_cfg, config_cdg] {
        if c.mode.uses_degradation() && c.lambda_block >= num_blocks {
            return Err(invalid(format!("lambda_block {} out of range", c.lambda_block)));
        }
    }

    let d = sampler.model().data_dim();
    let mut anchors = Vec::with_capacity(prompts.len());
    for (p, prompt) in prompts.iter().enumerate() {
        let mut r = rng::stream(seed, "geometry-latent", p as u64);
        let x0 = sampler.model().sample_clean(&prompt.embedding, &mut r)?;
        let z: Vec<T> = rng::normal_vec(&mut r, d, T::one());
        anchors.push((x0, z));
    }
    let latent = |p: usize, sigma: T| -> Vec<T> {
        let (x0, z) = &anchors[p];
        x0.iter().zip(z).map(|(&a, &b)| a + sigma * b).collect()
    };

    // cached importance orderings, per method and prompt
    let mut orders: [Vec<Option<Vec<usize>>>; 2] = [vec![None; prompts.len()], vec![None; prompts.len()]];
    let mut records = Vec::with_capacity(schedule.steps());
    for &sigma in schedule.noise_levels() {
        let latents: Vec<Vec<T>> = (0..prompts.len()).map(|p| latent(p, sigma)).collect();
        let conds = prompts
            .iter()
            .zip(&latents)
            .map(|(prompt, x)| sampler.noise_prediction(x, sigma, &prompt.embedding))
            .collect::<Result<Vec<_>>>()?;
        let stack = PredictionStack::new(sigma, Matrix::from_rows(&conds.iter().map(|c| c.value.clone()).collect::<Vec<_>>())?)?;
        let dim = match k {
            Some(k) => k,
            None => default_subspace_dim(&stack)?,
        };
        let basis = estimate_subspace(&stack, dim)?;
        let singular_values = thin_svd(&stack.rows)?.s.iter().map(|v| v.as_f64()).collect();

        let mut metrics = Vec::with_capacity(2);
        for (slot, config) in [config_cfg, config_cdg].into_iter().enumerate() {
            let mut deltas = Vec::with_capacity(prompts.len());
            for (p, prompt) in prompts.iter().enumerate() {
                let x = &latents[p];
                let needs_order = config.mode.uses_degradation() && config.r_deg != Some(1.0);
                if needs_order && config.reuse_first_step_mask && orders[slot][p].is_none() {
                    let report = sampler.importance_at(prompt, x, sigma, config.lambda_block)?;
                    orders[slot][p] = Some(report.fused.sorted_indices);
                }
                let order = if config.reuse_first_step_mask { orders[slot][p].as_deref() } else { None };
                let (pos, neg) = guidance_pair(sampler, prompt, x, sigma, config, order, &conds[p])?;
                deltas.push(guidance_delta(&pos, &neg)?);
            }
            metrics.push(summarize(config.mode, &deltas, &basis)?);
        }
        let cdg = metrics.pop().expect("two methods");
        let cfg = metrics.pop().expect("two methods");
        records.push(GeometryRecord {
            sigma: sigma.as_f64(),
            subspace_dim: dim,
            singular_values,
            cfg,
            cdg,
        });
    }
    Ok(GeometryReport {
        num_prompts: prompts.len(),
        records,
    })
}
