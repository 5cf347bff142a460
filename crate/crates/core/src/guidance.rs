//! Guided combination of denoiser predictions.
//!
//! Every rule has the shape `positive + (w − 1)·(positive − negative)`:
//!
//! | mode    | positive | negative |
//! |---------|----------|----------|
//! | CFG     | `c`      | `∅`      |
//! | CDG     | `c`      | `c_deg`  |
//! | CFG*    | `c_deg`  | `∅`      |
//!
//! The rule is affine in its inputs, so it gives the same answer whether it is
//! applied to clean-sample predictions `D`, noise predictions
//! `ε = (x − D)/σ`, or scores `(D − x)/σ²`. The sampler combines in ε space.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuidanceMode {
    /// Conditional prediction only; the scale is ignored.
    None,
    #[serde(rename = "CFG")]
    Cfg,
    #[serde(rename = "CDG")]
    Cdg,
    #[serde(rename = "CFGStar")]
    CfgStar,
}

impl GuidanceMode {
    pub fn uses_degradation(self) -> bool {
        matches!(self, GuidanceMode::Cdg | GuidanceMode::CfgStar)
    }

    /// The name used in configs and reports.
    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceMode::None => "None",
            GuidanceMode::Cfg => "CFG",
            GuidanceMode::Cdg => "CDG",
            GuidanceMode::CfgStar => "CFGStar",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub guidance_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_deg: Option<f64>,
    #[serde(default = "default_lambda_block")]
    pub lambda_block: usize,
    #[serde(default = "default_reuse")]
    pub reuse_first_step_mask: bool,
}

fn default_lambda_block() -> usize {
    1
}

fn default_reuse() -> bool {
    true
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            mode: GuidanceMode::Cdg,
            guidance_scale: 4.5,
            r_deg: Some(1.0),
            lambda_block: default_lambda_block(),
            reuse_first_step_mask: default_reuse(),
        }
    }
}

impl GuidanceConfig {
    pub fn cfg(w: f64) -> Self {
        Self {
            mode: GuidanceMode::Cfg,
            guidance_scale: w,
            r_deg: None,
            ..Self::default()
        }
    }

    pub fn cdg(w: f64, r_deg: f64) -> Self {
        Self {
            mode: GuidanceMode::Cdg,
            guidance_scale: w,
            r_deg: Some(r_deg),
            ..Self::default()
        }
    }

    pub fn cfg_star(w: f64, r_deg: f64) -> Self {
        Self {
            mode: GuidanceMode::CfgStar,
            guidance_scale: w,
            r_deg: Some(r_deg),
            ..Self::default()
        }
    }

    pub fn unguided() -> Self {
        Self {
            mode: GuidanceMode::None,
            guidance_scale: 1.0,
            r_deg: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.guidance_scale >= 1.0) || !self.guidance_scale.is_finite() {
            return Err(Error::Config(format!(
                "guidance_scale must be a finite value >= 1, got {}",
                self.guidance_scale
            )));
        }
        match (self.mode.uses_degradation(), self.r_deg) {
            (true, None) => Err(Error::Config(format!("{:?} mode needs r_deg", self.mode))),
            (false, Some(_)) => Err(Error::Config(format!("{:?} mode takes no r_deg", self.mode))),
            (true, Some(r)) if !(0.0..=2.0).contains(&r) => Err(Error::InvalidRatio(r)),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PredictionSpace {
    /// Clean-sample estimate `D(x; σ)`.
    Denoised,
    /// Noise estimate `ε = (x − D)/σ`.
    Noise,
    /// Score estimate `(D − x)/σ²`.
    Score,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub value: Vec<T>,
    pub sigma: T,
    pub space: PredictionSpace,
}

impl<T: Scalar> Prediction<T> {
    pub fn new(value: Vec<T>, sigma: T, space: PredictionSpace) -> Result<Self> {
        if !(sigma > T::zero()) || !sigma.is_finite() {
            return Err(invalid(format!("sigma must be positive, got {sigma}")));
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(invalid("prediction is not finite"));
        }
        Ok(Self { value, sigma, space })
    }

    pub fn denoised(value: Vec<T>, sigma: T) -> Result<Self> {
        Self::new(value, sigma, PredictionSpace::Denoised)
    }

    pub fn dim(&self) -> usize {
        self.value.len()
    }

    /// Re-expresses this prediction in another space at latent `x`.
    pub fn to_space(&self, x: &[T], space: PredictionSpace) -> Result<Self> {
        if x.len() != self.dim() {
            return Err(invalid("latent and prediction dimensions differ"));
        }
        let s = self.sigma;
        // pass through the denoised form
        let d: Vec<T> = match self.space {
            PredictionSpace::Denoised => self.value.clone(),
            PredictionSpace::Noise => x.iter().zip(&self.value).map(|(&xi, &e)| xi - s * e).collect(),
            PredictionSpace::Score => x.iter().zip(&self.value).map(|(&xi, &g)| xi + s * s * g).collect(),
        };
        let value = match space {
            PredictionSpace::Denoised => d,
            PredictionSpace::Noise => x.iter().zip(&d).map(|(&xi, &di)| (xi - di) / s).collect(),
            PredictionSpace::Score => x.iter().zip(&d).map(|(&xi, &di)| (di - xi) / (s * s)).collect(),
        };
        Ok(Self {
            value,
            sigma: s,
            space,
        })
    }
}

fn check_pair<T: Scalar>(a: &Prediction<T>, b: &Prediction<T>) -> Result<()> {
    if a.sigma != b.sigma {
        return Err(invalid(format!("sigma mismatch: {} vs {}", a.sigma, b.sigma)));
    }
    if a.dim() != b.dim() {
        return Err(invalid(format!("dimension mismatch: {} vs {}", a.dim(), b.dim())));
    }
    if a.space != b.space {
        return Err(invalid(format!("cannot combine {:?} with {:?}", a.space, b.space)));
    }
    Ok(())
}

/// `positive + (w − 1)·(positive − negative)`.
pub fn combine<T: Scalar>(positive: &Prediction<T>, negative: &Prediction<T>, w: T) -> Result<Prediction<T>> {
    check_pair(positive, negative)?;
    let gain = w - T::one();
    Ok(Prediction {
        value: positive
            .value
            .iter()
            .zip(&negative.value)
            .map(|(&p, &n)| p + gain * (p - n))
            .collect(),
        sigma: positive.sigma,
        space: positive.space,
    })
}

pub fn combine_cfg<T: Scalar>(cond: &Prediction<T>, uncond: &Prediction<T>, w: T) -> Result<Prediction<T>> {
    combine(cond, uncond, w)
}

pub fn combine_cdg<T: Scalar>(cond: &Prediction<T>, degraded: &Prediction<T>, w: T) -> Result<Prediction<T>> {
    combine(cond, degraded, w)
}

pub fn combine_cfg_star<T: Scalar>(degraded: &Prediction<T>, uncond: &Prediction<T>, w: T) -> Result<Prediction<T>> {
    combine(degraded, uncond, w)
}

/// The guidance direction `positive − negative` that `(w − 1)` scales.
pub fn guidance_delta<T: Scalar>(positive: &Prediction<T>, negative: &Prediction<T>) -> Result<Vec<T>> {
    check_pair(positive, negative)?;
    Ok(positive.value.iter().zip(&negative.value).map(|(&p, &n)| p - n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(v: &[f64]) -> Prediction<f64> {
        Prediction::new(v.to_vec(), 0.5, PredictionSpace::Noise).unwrap()
    }

    #[test]
    fn cfg_examples() {
        let cond = p(&[1.0, 0.0]);
        let uncond = p(&[0.0, 0.0]);
        assert_eq!(combine_cfg(&cond, &uncond, 1.0).unwrap(), cond);
        assert_eq!(combine_cfg(&cond, &cond, 9.0).unwrap(), cond);
        assert_eq!(combine_cfg(&cond, &uncond, 7.0).unwrap().value, vec![7.0, 0.0]);
    }

    #[test]
    fn cdg_examples() {
        let cond = p(&[1.0, 1.0]);
        let degraded = p(&[1.0, 0.0]);
        assert_eq!(combine_cdg(&cond, &degraded, 3.0).unwrap().value, vec![1.0, 3.0]);
        assert_eq!(combine_cdg(&cond, &degraded, 1.0).unwrap(), cond);
        // c_deg == ∅ reduces to CFG
        assert_eq!(
            combine_cdg(&cond, &degraded, 4.0).unwrap(),
            combine_cfg(&cond, &degraded, 4.0).unwrap()
        );
    }

    #[test]
    fn cfg_star_examples() {
        let cond = p(&[0.3, -0.2]);
        let uncond = p(&[1.0, 2.0]);
        assert_eq!(
            combine_cfg_star(&cond, &uncond, 5.0).unwrap(),
            combine_cfg(&cond, &uncond, 5.0).unwrap()
        );
        assert_eq!(combine_cfg_star(&cond, &uncond, 1.0).unwrap(), cond);
        assert_eq!(combine_cfg_star(&uncond, &uncond, 6.0).unwrap(), uncond);
    }

    #[test]
    fn delta_identity() {
        let a = p(&[0.2, 1.5, -3.0]);
        let b = p(&[1.0, 0.5, 2.0]);
        assert!(guidance_delta(&a, &a).unwrap().iter().all(|&v| v == 0.0));
        let delta = guidance_delta(&a, &b).unwrap();
        let guided = combine(&a, &b, 3.5).unwrap();
        for ((g, a), d) in guided.value.iter().zip(&a.value).zip(&delta) {
            assert!((g - (a + 2.5 * d)).abs() < 1e-15);
        }
    }

    #[test]
    fn mismatches_are_rejected() {
        let a = p(&[1.0]);
        let b = Prediction::new(vec![1.0], 0.25, PredictionSpace::Noise).unwrap();
        assert!(combine(&a, &b, 2.0).is_err());
        assert!(combine(&a, &p(&[1.0, 2.0]), 2.0).is_err());
        let d = Prediction::denoised(vec![1.0], 0.5).unwrap();
        assert!(combine(&a, &d, 2.0).is_err());
        assert!(Prediction::denoised(vec![1.0], 0.0).is_err());
    }

    #[test]
    fn space_conversions_round_trip() {
        let x: [f64; 3] = [0.7, -1.1, 2.0];
        let d = Prediction::<f64>::denoised(vec![0.1, 0.2, 0.3], 0.8).unwrap();
        let eps = d.to_space(&x, PredictionSpace::Noise).unwrap();
        let score = eps.to_space(&x, PredictionSpace::Score).unwrap();
        let back = score.to_space(&x, PredictionSpace::Denoised).unwrap();
        for (a, b) in back.value.iter().zip(&d.value) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!((eps.value[0] - (0.7 - 0.1) / 0.8).abs() < 1e-15);
        assert!((score.value[0] - (0.1 - 0.7) / 0.64).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(GuidanceConfig::cfg(7.0).validate().is_ok());
        assert!(GuidanceConfig::cfg(0.5).validate().is_err());
        assert!(GuidanceConfig::cdg(3.0, 2.5).validate().is_err());
        let mut c = GuidanceConfig::cfg(2.0);
        c.r_deg = Some(1.0);
        assert!(c.validate().is_err());
        let mut c = GuidanceConfig::cdg(2.0, 1.0);
        c.r_deg = None;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_field_names() {
        let json = r#"{"mode":"CDG","guidance_scale":4.0,"r_deg":1.1,"lambda_block":0,"reuse_first_step_mask":false}"#;
        let c: GuidanceConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.mode, GuidanceMode::Cdg);
        assert_eq!(c.r_deg, Some(1.1));
        assert_eq!(c.lambda_block, 0);
        assert!(!c.reuse_first_step_mask);
        let c: GuidanceConfig = serde_json::from_str(r#"{"mode":"CFG","guidance_scale":7.0}"#).unwrap();
        assert_eq!(c, GuidanceConfig::cfg(7.0));
    }
}
