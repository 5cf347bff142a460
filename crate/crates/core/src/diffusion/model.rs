//! Condition-dependent Gaussian mixture with its exact denoiser.
//!
//! `p(x₀ | e) = Σ_j π_j N(x₀; M_j e, s_j² I)`. Adding noise of level σ gives
//! `p(x; σ | e) = Σ_j π_j N(x; M_j e, (s_j² + σ²) I)`, and the minimum-MSE
//! denoiser is the posterior mean
//!
//! ```text
//! D(x; σ, e) = Σ_j γ_j(x) · (s_j² x + σ² m_j) / (s_j² + σ²)
//! ```
//!
//! with responsibilities `γ_j ∝ π_j N(x; m_j, (s_j² + σ²) I)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::guidance::Prediction;
use crate::linalg::{norm_sq, Matrix};
use crate::rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// Number of mixture components `J`.
    pub components: usize,
    pub data_dim: usize,
    pub cond_dim: usize,
    pub spread_min: f64,
    pub spread_max: f64,
    /// Typical norm of a component mean for a unit condition embedding.
    pub mean_scale: f64,
    pub seed: u64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            components: 16,
            data_dim: 8,
            cond_dim: 32,
            spread_min: 0.3,
            spread_max: 0.8,
            mean_scale: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmComponent<T> {
    /// `d_x × d_c`; the component mean is `map · e`.
    pub map: Matrix<T>,
    pub spread: T,
    pub weight: T,
}

#[derive(Debug, Clone)]
pub struct GmmConditionalModel<T> {
    components: Vec<GmmComponent<T>>,
    data_dim: usize,
    cond_dim: usize,
}

impl<T: Scalar> GmmConditionalModel<T> {
    /// Spreads may be zero (point masses); denoising still needs `σ > 0`.
    pub fn from_components(components: Vec<GmmComponent<T>>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(invalid("mixture needs at least one component"));
        };
        let (data_dim, cond_dim) = (first.map.rows(), first.map.cols());
        if data_dim == 0 || cond_dim == 0 {
            return Err(invalid("component maps must be non-empty"));
        }
        for (j, c) in components.iter().enumerate() {
            if c.map.rows() != data_dim || c.map.cols() != cond_dim {
                return Err(invalid(format!("component {j} map has the wrong shape")));
            }
            if !c.map.is_finite() || !(c.spread >= T::zero()) || !c.spread.is_finite() {
                return Err(invalid(format!("component {j} has a bad map or spread")));
            }
            if !(c.weight > T::zero()) {
                return Err(invalid(format!("component {j} weight must be positive")));
            }
        }
        let total: T = components.iter().map(|c| c.weight).sum();
        if (total - T::one()).abs() > T::lit(1e-12).max(T::epsilon() * T::lit(16.0)) {
            return Err(invalid(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self {
            components,
            data_dim,
            cond_dim,
        })
    }

    pub fn seeded(params: &ModelParams) -> Result<Self> {
        if params.components == 0 || params.data_dim == 0 || params.cond_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(params.spread_min > 0.0 && params.spread_min <= params.spread_max) {
            return Err(Error::Config("need 0 < spread_min <= spread_max".into()));
        }
        if !(params.mean_scale > 0.0 && params.mean_scale.is_finite()) {
            return Err(Error::Config("mean_scale must be positive".into()));
        }
        let mut r = rng::stream(params.seed, "model", 0);
        let scale = T::lit(params.mean_scale / (params.cond_dim as f64).sqrt());
        let mut raw = Vec::with_capacity(params.components);
        for _ in 0..params.components {
            let map = Matrix::from_fn(params.data_dim, params.cond_dim, |_, _| rng::normal::<T, _>(&mut r) * scale);
            let u: f64 = rand::Rng::random(&mut r);
            let spread = params.spread_min + u * (params.spread_max - params.spread_min);
            let w: f64 = rand::Rng::random(&mut r);
            raw.push((map, spread, 0.5 + w));
        }
        let total: f64 = raw.iter().map(|(_, _, w)| w).sum();
        let components = raw
            .into_iter()
            .map(|(map, spread, w)| GmmComponent {
                map,
                spread: T::lit(spread),
                weight: T::lit(w / total),
            })
            .collect();
        Self::from_components(components)
    }

    pub fn components(&self) -> &[GmmComponent<T>] {
        &self.components
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn means(&self, e: &[T]) -> Result<Vec<Vec<T>>> {
        if e.len() != self.cond_dim {
            return Err(invalid(format!(
                "condition embedding has length {}, model expects {}",
                e.len(),
                self.cond_dim
            )));
        }
        self.components.iter().map(|c| c.map.matvec(e)).collect()
    }

    fn check(&self, x: &[T], sigma: T) -> Result<()> {
        if x.len() != self.data_dim {
            return Err(invalid(format!(
                "latent has length {}, model expects {}",
                x.len(),
                self.data_dim
            )));
        }
        if !(sigma > T::zero()) || !sigma.is_finite() {
            return Err(invalid(format!("sigma must be positive, got {sigma}")));
        }
        Ok(())
    }

    /// Log of `π_j N(x; m_j, v_j I)` for every component, with `v_j = s_j² + σ²`.
    fn component_log_weights(&self, x: &[T], sigma: T, means: &[Vec<T>]) -> Vec<T> {
        let half_dim = T::lit(self.data_dim as f64 / 2.0);
        let two_pi = T::lit(std::f64::consts::TAU);
        let two = T::lit(2.0);
        self.components
            .iter()
            .zip(means)
            .map(|(c, m)| {
                let v = c.spread * c.spread + sigma * sigma;
                let dist: T = x.iter().zip(m).map(|(&a, &b)| (a - b) * (a - b)).sum();
                c.weight.ln() - half_dim * (two_pi * v).ln() - dist / (two * v)
            })
            .collect()
    }

    /// Posterior responsibilities, stabilized by subtracting the max log-weight.
    pub fn responsibilities(&self, x: &[T], sigma: T, e: &[T]) -> Result<Vec<T>> {
        self.check(x, sigma)?;
        let means = self.means(e)?;
        Ok(normalized_exp(&self.component_log_weights(x, sigma, &means)))
    }

    pub fn denoise(&self, x: &[T], sigma: T, e: &[T]) -> Result<Prediction<T>> {
        self.check(x, sigma)?;
        let means = self.means(e)?;
        let gamma = normalized_exp(&self.component_log_weights(x, sigma, &means));
        let s2 = sigma * sigma;
        let mut d = vec![T::zero(); self.data_dim];
        for ((c, m), &g) in self.components.iter().zip(&means).zip(&gamma) {
            let sp2 = c.spread * c.spread;
            let inv = g / (sp2 + s2);
            for ((di, &xi), &mi) in d.iter_mut().zip(x).zip(m) {
                *di += inv * (sp2 * xi + s2 * mi);
            }
        }
        Prediction::denoised(d, sigma)
    }

    /// Score through the denoiser: `(D − x)/σ²`.
    pub fn score(&self, x: &[T], sigma: T, e: &[T]) -> Result<Vec<T>> {
        let d = self.denoise(x, sigma, e)?;
        let s2 = sigma * sigma;
        Ok(d.value.iter().zip(x).map(|(&di, &xi)| (di - xi) / s2).collect())
    }

    /// `log p(x; σ | e)`.
    pub fn log_density(&self, x: &[T], sigma: T, e: &[T]) -> Result<T> {
        self.check(x, sigma)?;
        let means = self.means(e)?;
        Ok(log_sum_exp(&self.component_log_weights(x, sigma, &means)))
    }

    /// Gradient of the mixture log-density: `Σ_j γ_j (m_j − x)/(s_j² + σ²)`.
    pub fn analytic_score(&self, x: &[T], sigma: T, e: &[T]) -> Result<Vec<T>> {
        self.check(x, sigma)?;
        let means = self.means(e)?;
        let gamma = normalized_exp(&self.component_log_weights(x, sigma, &means));
        let mut g = vec![T::zero(); self.data_dim];
        for ((c, m), &w) in self.components.iter().zip(&means).zip(&gamma) {
            let inv = w / (c.spread * c.spread + sigma * sigma);
            for ((gi, &xi), &mi) in g.iter_mut().zip(x).zip(m) {
                *gi += inv * (mi - xi);
            }
        }
        Ok(g)
    }

    /// Noise-free sample `x₀ ~ p(x₀ | e)`.
    pub fn sample_clean<R: rand::Rng + ?Sized>(&self, e: &[T], rng: &mut R) -> Result<Vec<T>> {
        let means = self.means(e)?;
        let u = T::lit(rng.random::<f64>());
        let mut acc = T::zero();
        let mut pick = self.components.len() - 1;
        for (j, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = j;
                break;
            }
        }
        let spread = self.components[pick].spread;
        Ok(means[pick].iter().map(|&m| m + spread * rng::normal::<T, _>(rng)).collect())
    }
}

fn log_sum_exp<T: Scalar>(logs: &[T]) -> T {
    let max = logs.iter().copied().fold(T::neg_infinity(), T::max);
    max + logs.iter().map(|&l| (l - max).exp()).sum::<T>().ln()
}

fn normalized_exp<T: Scalar>(logs: &[T]) -> Vec<T> {
    let max = logs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = logs.iter().map(|&l| (l - max).exp()).collect();
    let total: T = out.iter().copied().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Euclidean distance.
pub fn distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    let diff: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    norm_sq(&diff).sqrt()
}
