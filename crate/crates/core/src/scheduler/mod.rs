//! EDM noise schedule, forward noising and the deterministic Euler sampler
//! in x0-parameterisation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid sigma {0}")]
    InvalidSigma(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub n_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            n_steps: 16,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule, SchedulerError> {
        NoiseSchedule::edm(self.n_steps, self.sigma_min, self.sigma_max, self.rho)
    }

    /// Log-uniform draw over `[sigma_min, sigma_max]`; one draw is shared by
    /// every frame of a training scene pass.
    pub fn draw_training_sigma(&self, rng: &mut impl Rng) -> f64 {
        let (lo, hi) = (self.sigma_min.ln(), self.sigma_max.ln());
        rng.random_range(lo..hi).exp()
    }
}

/// Strictly decreasing sigmas `sigmas[0] = sigma_max … sigmas[n-1] = sigma_min`,
/// followed by an implicit terminal 0.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn edm(n: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Self, SchedulerError> {
        if n < 2 {
            return Err(SchedulerError::InvalidSchedule(format!("n = {n} < 2")));
        }
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(SchedulerError::InvalidSchedule(format!(
                "need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
            )));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(SchedulerError::InvalidSchedule(format!("rho = {rho}")));
        }
        let (a, b) = (sigma_max.powf(1.0 / rho), sigma_min.powf(1.0 / rho));
        let mut sigmas: Vec<f64> = (0..n)
            .map(|i| (a + i as f64 / (n - 1) as f64 * (b - a)).powf(rho))
            .collect();
        sigmas[0] = sigma_max;
        sigmas[n - 1] = sigma_min;
        if sigmas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(SchedulerError::InvalidSchedule("sigmas not strictly decreasing".into()));
        }
        Ok(Self { sigmas })
    }

    pub fn n_steps(&self) -> usize {
        self.sigmas.len()
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma(&self, step: usize) -> f64 {
        self.sigmas[step]
    }

    /// Sigma after step `step`; 0 after the last one.
    pub fn next_sigma(&self, step: usize) -> f64 {
        self.sigmas.get(step + 1).copied().unwrap_or(0.0)
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigmas[0]
    }
}

/// `x_t = x0 + sigma·eps`.
pub fn add_noise(x0: &Tensor, sigma: f64, eps: &Tensor) -> Result<Tensor, SchedulerError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(SchedulerError::InvalidSigma(sigma));
    }
    let s = sigma as f32;
    Ok(x0.zip_map(eps, |x, e| x + s * e)?)
}

/// Euler step of the probability-flow ODE: `x0_hat + (σ_next/σ_t)(x_t − x0_hat)`.
pub fn sampler_step(x_t: &Tensor, x0_hat: &Tensor, sigma_t: f64, sigma_next: f64) -> Result<Tensor, SchedulerError> {
    if !(sigma_t > 0.0) {
        return Err(SchedulerError::InvalidSigma(sigma_t));
    }
    if !(sigma_next >= 0.0 && sigma_next < sigma_t) {
        return Err(SchedulerError::InvalidSigma(sigma_next));
    }
    let r = (sigma_next / sigma_t) as f32;
    Ok(x_t.zip_map(x0_hat, |xt, x0| x0 + r * (xt - x0))?)
}

/// Runs the full schedule from `x_start` (noise at `sigma_max`), calling
/// `denoise(x_t, sigma, step)` for the clean estimate at every step.
pub fn sample<E>(
    schedule: &NoiseSchedule,
    x_start: Tensor,
    mut denoise: impl FnMut(&Tensor, f64, usize) -> Result<Tensor, E>,
) -> Result<Tensor, E>
where
    E: From<SchedulerError>,
{
    let mut x = x_start;
    for step in 0..schedule.n_steps() {
        let (s, s_next) = (schedule.sigma(step), schedule.next_sigma(step));
        let x0_hat = denoise(&x, s, step)?;
        x = sampler_step(&x, &x0_hat, s, s_next)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use proptest::prelude::*;

    #[test]
    fn endpoints_exact() {
        let s = NoiseSchedule::edm(16, 0.002, 80.0, 7.0).unwrap();
        assert_eq!(s.sigma(0), 80.0);
        assert_eq!(s.sigma(15), 0.002);
        assert_eq!(s.next_sigma(15), 0.0);
    }

    #[test]
    fn linear_case_midpoint() {
        let s = NoiseSchedule::edm(3, 0.1, 10.0, 1.0).unwrap();
        assert!((s.sigma(1) - 5.05).abs() < 1e-12);
    }

    #[test]
    fn invalid_ranges() {
        assert!(NoiseSchedule::edm(1, 0.1, 1.0, 7.0).is_err());
        assert!(NoiseSchedule::edm(4, 1.0, 0.1, 7.0).is_err());
        assert!(NoiseSchedule::edm(4, 0.0, 1.0, 7.0).is_err());
        assert!(NoiseSchedule::edm(4, 0.1, 1.0, 0.0).is_err());
    }

    #[test]
    fn add_noise_cases() {
        let mut rng = seeded_rng(1);
        let x0 = Tensor::randn(&[10_000], 1.0, &mut rng);
        let eps = Tensor::randn(&[10_000], 1.0, &mut rng);
        assert_eq!(add_noise(&x0, 0.0, &eps).unwrap(), x0);
        let sigma = 0.7;
        let xt = add_noise(&x0, sigma, &eps).unwrap();
        let d = xt.sub(&x0).unwrap();
        let mean = d.mean();
        let var = d.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d.numel() as f64;
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.05);
        let d2 = add_noise(&x0, 2.0 * sigma, &eps).unwrap().sub(&x0).unwrap();
        assert!(d2.max_abs_diff(&d.scale(2.0)) < 1e-5);
        assert!(add_noise(&x0, -1.0, &eps).is_err());
    }

    #[test]
    fn sampler_step_cases() {
        let mut rng = seeded_rng(2);
        let xt = Tensor::randn(&[8], 1.0, &mut rng);
        let x0 = Tensor::randn(&[8], 1.0, &mut rng);
        assert_eq!(sampler_step(&xt, &x0, 1.0, 0.0).unwrap(), x0);
        assert_eq!(sampler_step(&x0, &x0, 1.0, 0.5).unwrap(), x0);
        assert!(sampler_step(&xt, &x0, 0.0, 0.0).is_err());
        assert!(sampler_step(&xt, &x0, 1.0, 1.0).is_err());
    }

    #[test]
    fn oracle_loop_recovers_x0() {
        let mut rng = seeded_rng(3);
        let x0 = Tensor::randn(&[1, 8, 8], 0.5, &mut rng);
        for n in [2, 5, 16, 64] {
            let sched = ScheduleConfig {
                n_steps: n,
                ..Default::default()
            }
            .build()
            .unwrap();
            let start = Tensor::randn(&[1, 8, 8], sched.sigma_max() as f32, &mut rng);
            let out = sample::<SchedulerError>(&sched, start, |_, _, _| Ok(x0.clone())).unwrap();
            assert!(out.max_abs_diff(&x0) < 1e-4);
        }
    }

    #[test]
    fn training_sigma_in_range() {
        let cfg = ScheduleConfig::default();
        let mut rng = seeded_rng(4);
        for _ in 0..1000 {
            let s = cfg.draw_training_sigma(&mut rng);
            assert!(s >= cfg.sigma_min && s <= cfg.sigma_max);
        }
    }

    proptest! {
        #[test]
        fn schedule_strictly_decreasing(n in 2usize..80, smin in 1e-3f64..1.0, ratio in 1.5f64..1e4, rho in 0.5f64..10.0) {
            let s = NoiseSchedule::edm(n, smin, smin * ratio, rho).unwrap();
            prop_assert_eq!(s.sigmas().len(), n);
            prop_assert!(s.sigmas().windows(2).all(|w| w[1] < w[0]));
            prop_assert_eq!(s.sigma(n - 1), smin);
        }
    }
}
