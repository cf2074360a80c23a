//! Numerical building blocks shared by the whole crate: diagonal Gaussians,
//! reparameterized sampling, the Adam optimizer with global-norm clipping and
//! a central finite-difference gradient used as a testing oracle.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::f64::consts::{E, PI};

use crate::error::{check_len, Error, Result};

/// Gaussian with diagonal covariance, stored as mean and per-coordinate variance.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
}

impl DiagGaussian {
    pub fn new(mean: DVector<f64>, variance: DVector<f64>) -> Result<Self> {
        check_len("DiagGaussian variance", mean.len(), variance.len())?;
        if let Some(v) = variance.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!("variance must be positive, got {v}")));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                component: "DiagGaussian mean",
            });
        }
        Ok(Self { mean, variance })
    }

    /// Zero mean and unit variance, the filter's starting posterior.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            variance: DVector::from_element(dim, 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn entropy(&self) -> f64 {
        self.variance
            .iter()
            .map(|s| 0.5 * (2.0 * PI * E * s).ln())
            .sum()
    }
}

/// Differential entropy in nats of a diagonal Gaussian with the given variances.
pub fn gaussian_entropy(variance: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for &s in variance {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Domain(format!(
                "entropy needs positive variance, got {s}"
            )));
        }
        total += 0.5 * (2.0 * PI * E * s).ln();
    }
    Ok(total)
}

/// Partial derivatives of [`gaussian_entropy`] with respect to each variance.
pub fn gaussian_entropy_grad(variance: &[f64]) -> Vec<f64> {
    variance.iter().map(|s| 0.5 / s).collect()
}

/// `mean + sqrt(variance) * noise`, coordinate-wise.
pub fn reparam_sample(q: &DiagGaussian, noise: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("reparam_sample noise", q.dim(), noise.len())?;
    Ok(DVector::from_iterator(
        q.dim(),
        q.mean
            .iter()
            .zip(q.variance.iter())
            .zip(noise.iter())
            .map(|((m, s), e)| m + s.sqrt() * e),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Moment estimates for Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            config,
        }
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    /// One bias-corrected descent step, in place.
    ///
    /// Coordinates whose gradient is exactly zero are skipped entirely (their
    /// moments are not decayed), so a zero gradient never moves a parameter.
    /// On error nothing is modified.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_len("adam params", self.len(), params.len())?;
        check_len("adam grads", self.len(), grads.len())?;
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                component: "adam gradient",
            });
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            if g == 0.0 {
                continue;
            }
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_update(
    params: &[f64],
    grads: &[f64],
    state: &AdamState,
) -> Result<(Vec<f64>, AdamState)> {
    let mut next = state.clone();
    let mut out = params.to_vec();
    next.step(&mut out, grads)?;
    Ok((out, next))
}

/// Rescales `grads` so its Euclidean norm is at most `max_norm`; returns the
/// norm before clipping. An infinite threshold disables clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm.is_finite() && norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("step size must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let plus = f(&probe);
        probe[j] = x[j] - h;
        let minus = f(&probe);
        probe[j] = x[j];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                component: "finite difference evaluation",
            });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}
