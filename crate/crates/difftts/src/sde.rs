//! Variance-preserving SDE: linear noise schedule, closed-form forward
//! marginal, and the discretized reverse sampler.
//!
//! The forward process `dX = -½ X β_t dt + √β_t dW` with `β_t` affine in t
//! has the exact marginal `X_t = X_0 e^{-½∫β} + √λ(t) ε`, where
//! `λ(t) = 1 - e^{-∫₀ᵗ β_s ds}`. The reverse sampler takes N equal steps
//! on the grid t ∈ {1/N, ..., 1}:
//!
//! `X_{t-1/N} = X_t + (β_t/N)(½X_t + s(X_t)) + √(β_t/N) z_t`.

use crate::numerics::{randn, Rng, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("lambda is singular at t = 0")]
    SingularLambda,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
}

/// Linear noise schedule β_t = β0 + (β1 − β0)·t on the unit horizon.
#[derive(Clone, Copy, Debug)]
pub struct NoiseSchedule {
    pub beta0: f64,
    pub beta1: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            beta0: 0.05,
            beta1: 20.0,
        }
    }
}

impl NoiseSchedule {
    pub fn new(beta0: f64, beta1: f64) -> NoiseSchedule {
        assert!(
            0.0 < beta0 && beta0 < beta1,
            "schedule requires 0 < beta0 < beta1"
        );
        NoiseSchedule { beta0, beta1 }
    }

    /// β_t.
    pub fn beta(&self, t: f64) -> Result<f64, SdeError> {
        check_time(t)?;
        Ok(self.beta0 + (self.beta1 - self.beta0) * t)
    }

    /// ∫₀ᵗ β_s ds, in closed form for the linear schedule.
    pub fn cum_beta(&self, t: f64) -> Result<f64, SdeError> {
        check_time(t)?;
        Ok(self.beta0 * t + (self.beta1 - self.beta0) * t * t / 2.0)
    }

    /// λ(t) = 1 − e^{−∫β}; the forward-marginal noise variance.
    /// Strictly in (0, 1) for t in (0, 1]. t = 0 is rejected because the
    /// training loss needs λ⁻¹.
    pub fn lambda(&self, t: f64) -> Result<f64, SdeError> {
        check_time(t)?;
        if t == 0.0 {
            return Err(SdeError::SingularLambda);
        }
        Ok(-(-self.cum_beta(t)?).exp_m1())
    }

    /// Mean coefficient e^{−½∫β} of the forward marginal.
    pub fn mean_coeff(&self, t: f64) -> Result<f64, SdeError> {
        Ok((-0.5 * self.cum_beta(t)?).exp())
    }
}

fn check_time(t: f64) -> Result<(), SdeError> {
    if !(0.0..=1.0).contains(&t) || !t.is_finite() {
        Err(SdeError::TimeOutOfRange(t))
    } else {
        Ok(())
    }
}

/// Exact forward corruption: x_t = x0·e^{−½∫β} + √λ(t)·ε with ε ~ N(0, I).
pub fn forward_marginal(
    x0: &Tensor,
    t: f64,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor, SdeError> {
    if x0.shape() != eps.shape() {
        return Err(SdeError::ShapeMismatch(
            x0.shape().to_vec(),
            eps.shape().to_vec(),
        ));
    }
    let alpha = schedule.mean_coeff(t)?;
    let sqrt_lambda = schedule.lambda(t)?.sqrt();
    Ok(x0.scale(alpha).add(&eps.scale(sqrt_lambda)))
}

/// Reverse sampler settings.
#[derive(Clone, Debug)]
pub struct ReverseSamplerConfig {
    /// Number of discretization steps N.
    pub steps: usize,
    /// Temperature τ; the prior is sampled from N(0, I/τ).
    pub temperature: f64,
    /// Inject z at every step, including the final one.
    pub noise_at_every_step: bool,
    /// Ablation: also scale per-step noise by 1/√τ (off by default; the
    /// temperature normally applies to the prior only).
    pub scale_step_noise_by_temperature: bool,
}

impl Default for ReverseSamplerConfig {
    fn default() -> Self {
        ReverseSamplerConfig {
            steps: 50,
            temperature: 1.5,
            noise_at_every_step: true,
            scale_step_noise_by_temperature: false,
        }
    }
}

impl ReverseSamplerConfig {
    pub fn validate(&self) {
        assert!(self.steps >= 1, "need at least one reverse step");
        assert!(self.temperature > 0.0, "temperature must be positive");
    }
}

/// Prior draw x_1 ~ N(0, I/τ).
pub fn sample_prior(shape: &[usize], temperature: f64, rng: &mut Rng) -> Tensor {
    assert!(temperature > 0.0, "temperature must be positive");
    randn(shape, rng).scale(1.0 / temperature.sqrt())
}

/// One step of the discretized reverse process, from t to t − 1/N.
/// `noise` enables the z_t term for this step.
pub fn reverse_step(
    x: &Tensor,
    t: f64,
    score: &Tensor,
    schedule: &NoiseSchedule,
    config: &ReverseSamplerConfig,
    noise: bool,
    rng: &mut Rng,
) -> Result<Tensor, SdeError> {
    if x.shape() != score.shape() {
        return Err(SdeError::ShapeMismatch(
            x.shape().to_vec(),
            score.shape().to_vec(),
        ));
    }
    let h = schedule.beta(t)? / config.steps as f64;
    let drift = x.scale(0.5).add(score).scale(h);
    let mut out = x.add(&drift);
    if noise {
        let mut sigma = h.sqrt();
        if config.scale_step_noise_by_temperature {
            sigma /= config.temperature.sqrt();
        }
        out = out.add(&randn(x.shape(), rng).scale(sigma));
    }
    Ok(out)
}

/// Runs the full reverse trajectory from a prior draw down to x_0.
/// `score_fn(x, t)` supplies the (possibly guided) score at each grid point.
pub fn reverse_trajectory<E>(
    x1: Tensor,
    schedule: &NoiseSchedule,
    config: &ReverseSamplerConfig,
    rng: &mut Rng,
    mut score_fn: impl FnMut(&Tensor, f64) -> Result<Tensor, E>,
) -> Result<Tensor, ReverseError<E>> {
    config.validate();
    let n = config.steps;
    let mut x = x1;
    for k in (1..=n).rev() {
        let t = k as f64 / n as f64;
        let score = score_fn(&x, t).map_err(|e| ReverseError::Score { step: n - k, source: e })?;
        let noise = config.noise_at_every_step || k > 1;
        x = reverse_step(&x, t, &score, schedule, config, noise, rng)
            .map_err(|e| ReverseError::Step { step: n - k, source: e })?;
    }
    Ok(x)
}

/// Failure inside a reverse run, tagged with the step index.
#[derive(Debug, Error)]
pub enum ReverseError<E> {
    #[error("score evaluation failed at step {step}")]
    Score { step: usize, source: E },
    #[error("reverse step {step} failed")]
    Step {
        step: usize,
        source: SdeError,
    },
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn beta_endpoints_and_midpoint() {
        let s = NoiseSchedule::default();
        assert_eq!(s.beta(0.0).unwrap(), 0.05);
        assert_eq!(s.beta(1.0).unwrap(), 20.0);
        assert!((s.beta(0.5).unwrap() - 10.025).abs() < 1e-15);
        assert!(s.beta(1.5).is_err());
        assert!(s.beta(-0.1).is_err());
    }

    #[test]
    fn cum_beta_closed_form() {
        let s = NoiseSchedule::default();
        assert_eq!(s.cum_beta(0.0).unwrap(), 0.0);
        assert!((s.cum_beta(1.0).unwrap() - 10.025).abs() < 1e-12);
        assert!((s.cum_beta(0.5).unwrap() - 2.51875).abs() < 1e-12);
    }

    #[test]
    fn lambda_values_and_monotonicity() {
        let s = NoiseSchedule::default();
        assert!(matches!(s.lambda(0.0), Err(SdeError::SingularLambda)));
        assert!((s.lambda(1.0).unwrap() - (1.0 - (-10.025f64).exp())).abs() < 1e-15);
        assert!((s.lambda(0.5).unwrap() - (1.0 - (-2.51875f64).exp())).abs() < 1e-15);
        assert!(s.lambda(1e-9).unwrap() < 1e-8);
        let mut prev = 0.0;
        for k in 1..=1000 {
            let l = s.lambda(k as f64 / 1000.0).unwrap();
            assert!(l > prev && l < 1.0);
            prev = l;
        }
    }

    #[test]
    fn forward_marginal_limits() {
        let s = NoiseSchedule::default();
        let x0 = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]);
        let eps = Tensor::from_vec(&[3], vec![0.3, 0.1, -0.7]);
        let tiny = forward_marginal(&x0, 1e-9, &eps, &s).unwrap();
        assert!(tiny.sub(&x0).l2_norm() < 1e-3);
        // At t = 1 the data coefficient is e^{-5.0125} ≈ 0.00665.
        let alpha = s.mean_coeff(1.0).unwrap();
        assert!((alpha - 0.00665).abs() < 1e-4);
        let far = forward_marginal(&x0, 1.0, &eps, &s).unwrap();
        assert!(far.sub(&eps.scale(s.lambda(1.0).unwrap().sqrt())).l2_norm() < 0.02);
        let bad = forward_marginal(&x0, 0.5, &Tensor::zeros(&[2]), &s);
        assert!(matches!(bad, Err(SdeError::ShapeMismatch(_, _))));
    }

    #[test]
    fn reverse_step_arithmetic() {
        // x = 1, score = -1, t = 0.5 (β = 10.025), N = 50, z = 0:
        // x' = 1 + 0.2005·(0.5 - 1) = 0.89975.
        let s = NoiseSchedule::default();
        let cfg = ReverseSamplerConfig {
            steps: 50,
            temperature: 1.0,
            ..Default::default()
        };
        let x = Tensor::scalar(1.0);
        let score = Tensor::scalar(-1.0);
        let mut rng = Rng::new(0);
        let out = reverse_step(&x, 0.5, &score, &s, &cfg, false, &mut rng).unwrap();
        assert!((out.item() - 0.89975).abs() < 1e-12);
    }

    #[test]
    fn reverse_step_drift_fixed_point() {
        // score = -x/2 cancels the drift exactly when z = 0.
        let s = NoiseSchedule::default();
        let cfg = ReverseSamplerConfig::default();
        let x = Tensor::from_vec(&[2, 2], vec![0.4, -1.0, 2.0, 0.0]);
        let score = x.scale(-0.5);
        let mut rng = Rng::new(0);
        let out = reverse_step(&x, 0.7, &score, &s, &cfg, false, &mut rng).unwrap();
        assert!(out.bit_eq(&x));
        // And zero everything stays zero.
        let zero = Tensor::zeros(&[3]);
        let out = reverse_step(&zero, 0.3, &zero, &s, &cfg, false, &mut rng).unwrap();
        assert!(out.bit_eq(&zero));
    }

    #[test]
    fn prior_temperature_scales_variance() {
        for (tau, want) in [(1.0f64, 1.0), (1.5, 1.0 / 1.5), (4.0, 0.25)] {
            let mut rng = Rng::new(99).substream_indexed("prior", tau.to_bits());
            let x = sample_prior(&[100_000], tau, &mut rng);
            let mean = x.mean();
            let var =
                x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (x.numel() - 1) as f64;
            let tol = if tau >= 4.0 { 0.01 } else { 0.02 };
            assert!((var - want).abs() < tol, "tau {}: var {}", tau, var);
        }
    }
}
