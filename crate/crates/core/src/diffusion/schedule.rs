use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 28,
            sigma_max: 10.0,
            sigma_min: 0.01,
        }
    }
}

/// Strictly decreasing noise levels `σ_T > … > σ_1` followed by a terminal 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSchedule<T> {
    sigmas: Vec<T>,
}

impl<T: Scalar> SigmaSchedule<T> {
    pub fn from_sigmas(sigmas: Vec<T>) -> Result<Self> {
        if sigmas.len() < 2 {
            return Err(invalid("schedule needs at least one positive sigma and the terminal 0"));
        }
        if *sigmas.last().expect("non-empty") != T::zero() {
            return Err(invalid("schedule must end at sigma = 0"));
        }
        if !(sigmas[0].is_finite() && sigmas[sigmas.len() - 2] > T::zero()) {
            return Err(invalid("noise levels must be finite and positive"));
        }
        if sigmas.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(invalid("noise levels must be strictly decreasing"));
        }
        Ok(Self { sigmas })
    }

    /// `steps` levels spaced uniformly in `ln σ` from `sigma_max` down to
    /// `sigma_min`, then 0.
    pub fn log_spaced(steps: usize, sigma_max: f64, sigma_min: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < sigma_min < sigma_max, got {sigma_min} and {sigma_max}"
            )));
        }
        let (hi, lo) = (sigma_max.ln(), sigma_min.ln());
        let mut sigmas: Vec<T> = if steps == 1 {
            vec![T::lit(sigma_max)]
        } else {
            (0..steps)
                .map(|i| T::lit((hi + (lo - hi) * i as f64 / (steps - 1) as f64).exp()))
                .collect()
        };
        sigmas.push(T::zero());
        Self::from_sigmas(sigmas)
    }

    pub fn from_params(p: &ScheduleParams) -> Result<Self> {
        Self::log_spaced(p.steps, p.sigma_max, p.sigma_min)
    }

    /// All levels including the terminal 0.
    pub fn sigmas(&self) -> &[T] {
        &self.sigmas
    }

    /// The positive levels, one per Euler step.
    pub fn noise_levels(&self) -> &[T] {
        &self.sigmas[..self.sigmas.len() - 1]
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma_max(&self) -> T {
        self.sigmas[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule() {
        let s = SigmaSchedule::<f64>::from_params(&ScheduleParams::default()).unwrap();
        assert_eq!(s.steps(), 28);
        assert_eq!(s.sigmas().len(), 29);
        assert!((s.sigma_max() - 10.0).abs() < 1e-12);
        assert!((s.noise_levels()[27] - 0.01).abs() < 1e-15);
        assert_eq!(s.sigmas()[28], 0.0);
        let ratios: Vec<f64> = s.noise_levels().windows(2).map(|w| w[1] / w[0]).collect();
        assert!(ratios.iter().all(|r| (r - ratios[0]).abs() < 1e-12));
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(SigmaSchedule::<f64>::from_sigmas(vec![1.0, 1.0, 0.0]).is_err());
        assert!(SigmaSchedule::<f64>::from_sigmas(vec![1.0, 0.5]).is_err());
        assert!(SigmaSchedule::<f64>::from_sigmas(vec![0.0]).is_err());
        assert!(SigmaSchedule::<f64>::log_spaced(0, 10.0, 0.1).is_err());
        assert!(SigmaSchedule::<f64>::log_spaced(5, 0.1, 10.0).is_err());
        assert_eq!(SigmaSchedule::<f64>::log_spaced(1, 3.0, 0.1).unwrap().sigmas(), &[3.0, 0.0]);
    }
}
