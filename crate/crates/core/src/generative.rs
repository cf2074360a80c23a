//! Generative model: latent dynamics `x' = x + W φ(x) + B u + ε` with
//! squared-exponential radial basis features, and linear-nonlinear observations.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{check_len, Error, Result};
use crate::numeric::DiagGaussian;

/// Parameters of the latent transition. Also used as the container for
/// gradients with respect to those parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsParams {
    /// `m x r` basis weights.
    pub weights: DMatrix<f64>,
    /// `m x r`; column `i` is the center of basis function `i`.
    pub centers: DMatrix<f64>,
    /// Log of each basis function's inverse squared width.
    pub log_inverse_widths: DVector<f64>,
    /// `m x p` input coupling.
    pub input_map: DMatrix<f64>,
    /// Log of the isotropic state-noise variance.
    pub log_state_noise_var: f64,
}

impl DynamicsParams {
    pub fn zeros(m: usize, r: usize, p: usize) -> Self {
        Self {
            weights: DMatrix::zeros(m, r),
            centers: DMatrix::zeros(m, r),
            log_inverse_widths: DVector::zeros(r),
            input_map: DMatrix::zeros(m, p),
            log_state_noise_var: 0.0,
        }
    }

    /// Centers drawn uniformly in `[-half_width, half_width]^m`; widths chosen so
    /// that neighbouring centers overlap at φ ≈ 0.5; zero weights; unit noise.
    pub fn init<R: Rng + ?Sized>(
        m: usize,
        r: usize,
        p: usize,
        half_width: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if m == 0 || r == 0 || p == 0 {
            return Err(Error::Domain(format!(
                "dynamics dimensions must be positive, got m={m} r={r} p={p}"
            )));
        }
        if !(half_width > 0.0) {
            return Err(Error::Domain(format!(
                "center box half-width must be positive, got {half_width}"
            )));
        }
        let mut params = Self::zeros(m, r, p);
        for v in params.centers.iter_mut() {
            *v = rng.random_range(-half_width..half_width);
        }
        let spacing = 2.0 * half_width / (r as f64).powf(1.0 / m as f64);
        let gamma = 2.0 * std::f64::consts::LN_2 / (spacing * spacing);
        params.log_inverse_widths.fill(gamma.ln());
        Ok(params)
    }

    pub fn latent_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_basis(&self) -> usize {
        self.weights.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.input_map.ncols()
    }

    pub fn state_noise_var(&self) -> f64 {
        self.log_state_noise_var.exp()
    }

    fn check(&self) -> Result<()> {
        let (m, r) = self.weights.shape();
        check_len("dynamics centers rows", m, self.centers.nrows())?;
        check_len("dynamics centers cols", r, self.centers.ncols())?;
        check_len("dynamics widths", r, self.log_inverse_widths.len())?;
        check_len("dynamics input map rows", m, self.input_map.nrows())
    }

    /// Replaces the centers with `r` points spread over `points` by farthest
    /// point sampling, and resets widths from the mean nearest-center distance.
    pub fn reseed_centers(&mut self, points: &[DVector<f64>]) -> Result<()> {
        let r = self.n_basis();
        let m = self.latent_dim();
        if points.len() < r {
            return Err(Error::Domain(format!(
                "need at least {r} points to reseed centers, got {}",
                points.len()
            )));
        }
        for p in points {
            check_len("reseed point", m, p.len())?;
        }
        let mut chosen = vec![0usize];
        let mut dist: Vec<f64> = points.iter().map(|p| (p - &points[0]).norm_squared()).collect();
        while chosen.len() < r {
            let (next, _) = dist
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
            chosen.push(next);
            for (d, p) in dist.iter_mut().zip(points) {
                *d = d.min((p - &points[next]).norm_squared());
            }
        }
        for (col, &idx) in chosen.iter().enumerate() {
            self.centers.set_column(col, &points[idx]);
        }
        let mut nearest = 0.0;
        for i in 0..r {
            let ci = self.centers.column(i);
            let d = (0..r)
                .filter(|&j| j != i)
                .map(|j| (ci - self.centers.column(j)).norm())
                .fold(f64::INFINITY, f64::min);
            nearest += d;
        }
        let spacing = (nearest / r as f64).max(1e-6);
        let gamma = 2.0 * std::f64::consts::LN_2 / (spacing * spacing);
        self.log_inverse_widths.fill(gamma.ln());
        Ok(())
    }
}

/// `φ_i(x) = exp(-γ_i ‖x - c_i‖² / 2)` for every basis function.
pub fn rbf_features(x: &DVector<f64>, params: &DynamicsParams) -> Result<DVector<f64>> {
    params.check()?;
    check_len("rbf_features x", params.latent_dim(), x.len())?;
    Ok(features_unchecked(x, params))
}

fn features_unchecked(x: &DVector<f64>, params: &DynamicsParams) -> DVector<f64> {
    DVector::from_fn(params.n_basis(), |i, _| {
        let d2 = (x - params.centers.column(i)).norm_squared();
        (-0.5 * params.log_inverse_widths[i].exp() * d2).exp()
    })
}

/// Deterministic increment `W φ(x) + B u`.
pub fn drift(x: &DVector<f64>, u: &DVector<f64>, params: &DynamicsParams) -> Result<DVector<f64>> {
    let phi = rbf_features(x, params)?;
    check_len("drift input", params.input_dim(), u.len())?;
    Ok(&params.weights * phi + &params.input_map * u)
}

/// Velocity field in the absence of input, `W φ(x)`.
pub fn autonomous_drift(x: &DVector<f64>, params: &DynamicsParams) -> Result<DVector<f64>> {
    let phi = rbf_features(x, params)?;
    Ok(&params.weights * phi)
}

/// Jacobian of `W φ(x)` with respect to `x`.
pub fn dynamics_jacobian(x: &DVector<f64>, params: &DynamicsParams) -> Result<DMatrix<f64>> {
    let phi = rbf_features(x, params)?;
    let m = params.latent_dim();
    let mut jac = DMatrix::zeros(m, m);
    for i in 0..params.n_basis() {
        let gamma = params.log_inverse_widths[i].exp();
        let diff = x - params.centers.column(i);
        // dφ_i/dx = -γ_i φ_i (x - c_i)ᵀ
        let scale = -gamma * phi[i];
        jac.ger(scale, &params.weights.column(i), &diff, 1.0);
    }
    Ok(jac)
}

/// `E_{q}[log N(x; a, σ² I)]` with `a = x_prev + W φ(x_prev) + B u`, in closed form.
pub fn expected_transition_loglik(
    q: &DiagGaussian,
    x_prev: &DVector<f64>,
    u: &DVector<f64>,
    params: &DynamicsParams,
) -> Result<f64> {
    check_len("transition posterior", params.latent_dim(), q.dim())?;
    let mean = x_prev + drift(x_prev, u, params)?;
    Ok(transition_closed_form(q, &mean, params.log_state_noise_var))
}

pub(crate) fn transition_closed_form(q: &DiagGaussian, mean: &DVector<f64>, log_var: f64) -> f64 {
    let m = q.dim() as f64;
    let var = log_var.exp();
    let sq = (&q.mean - mean).norm_squared() + q.variance.sum();
    -0.5 * m * ((2.0 * PI).ln() + log_var) - sq / (2.0 * var)
}

/// Gradient of [`expected_transition_loglik`] with respect to each of its inputs.
#[derive(Debug, Clone)]
pub struct TransitionGrad {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    pub x_prev: DVector<f64>,
    pub params: DynamicsParams,
}

pub fn expected_transition_loglik_grad(
    q: &DiagGaussian,
    x_prev: &DVector<f64>,
    u: &DVector<f64>,
    params: &DynamicsParams,
) -> Result<TransitionGrad> {
    check_len("transition posterior", params.latent_dim(), q.dim())?;
    let phi = rbf_features(x_prev, params)?;
    check_len("drift input", params.input_dim(), u.len())?;
    let a = x_prev + &params.weights * &phi + &params.input_map * u;
    let var = params.state_noise_var();
    let resid = &q.mean - &a;
    let upstream = &resid / var;
    let mut grad = DynamicsParams::zeros(params.latent_dim(), params.n_basis(), params.input_dim());
    let x_dir = drift_backward(x_prev, u, &phi, params, &upstream, &mut grad);
    let m = q.dim() as f64;
    grad.log_state_noise_var = -0.5 * m + (resid.norm_squared() + q.variance.sum()) / (2.0 * var);
    Ok(TransitionGrad {
        mean: -&upstream,
        variance: DVector::from_element(q.dim(), -0.5 / var),
        x_prev: upstream + x_dir,
        params: grad,
    })
}

/// Accumulates into `grad` the gradient of `⟨upstream, W φ(x) + B u⟩` with
/// respect to the dynamics parameters; returns the gradient with respect to `x`.
pub(crate) fn drift_backward(
    x: &DVector<f64>,
    u: &DVector<f64>,
    phi: &DVector<f64>,
    params: &DynamicsParams,
    upstream: &DVector<f64>,
    grad: &mut DynamicsParams,
) -> DVector<f64> {
    grad.weights.ger(1.0, upstream, phi, 1.0);
    grad.input_map.ger(1.0, upstream, u, 1.0);
    let mut dx = DVector::zeros(x.len());
    for i in 0..params.n_basis() {
        let dphi = params.weights.column(i).dot(upstream);
        if dphi == 0.0 {
            continue;
        }
        let gamma = params.log_inverse_widths[i].exp();
        let diff = x - params.centers.column(i);
        let g = dphi * phi[i];
        // ∂φ/∂c = γ φ (x - c), ∂φ/∂log γ = -γ ‖x - c‖² φ / 2, ∂φ/∂x = -∂φ/∂c
        let mut col = grad.centers.column_mut(i);
        col.axpy(g * gamma, &diff, 1.0);
        grad.log_inverse_widths[i] += -0.5 * gamma * diff.norm_squared() * g;
        dx.axpy(-g * gamma, &diff, 1.0);
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObsKind {
    /// Poisson counts with exponential (canonical) link.
    #[serde(alias = "poisson-canonical")]
    Poisson,
    /// Independent Gaussian channels with shared variance.
    Gaussian,
}

impl ObsKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObsKind::Poisson => "poisson",
            ObsKind::Gaussian => "gaussian",
        }
    }
}

/// Observation map `y ~ P(f(C x + b))`. Also the container for its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationParams {
    /// `n x m` loading.
    pub loading: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub kind: ObsKind,
    /// Log of the per-channel noise variance; unused by the Poisson kind.
    pub log_obs_noise_var: f64,
}

/// Per-channel Poisson intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Rates(pub DVector<f64>);

impl ObservationParams {
    pub fn new(loading: DMatrix<f64>, bias: DVector<f64>, kind: ObsKind, obs_noise_var: f64) -> Result<Self> {
        check_len("observation bias", loading.nrows(), bias.len())?;
        if !(obs_noise_var > 0.0) {
            return Err(Error::Domain(format!(
                "observation noise variance must be positive, got {obs_noise_var}"
            )));
        }
        Ok(Self {
            loading,
            bias,
            kind,
            log_obs_noise_var: obs_noise_var.ln(),
        })
    }

    pub fn zeros(n: usize, m: usize, kind: ObsKind) -> Self {
        Self {
            loading: DMatrix::zeros(n, m),
            bias: DVector::zeros(n),
            kind,
            log_obs_noise_var: 0.0,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.loading.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.loading.ncols()
    }

    pub fn obs_noise_var(&self) -> f64 {
        self.log_obs_noise_var.exp()
    }

    pub fn linear_predictor(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("observation latent", self.latent_dim(), x.len())?;
        Ok(&self.loading * x + &self.bias)
    }

    pub fn rates(&self, x: &DVector<f64>) -> Result<Rates> {
        Ok(Rates(self.linear_predictor(x)?.map(f64::exp)))
    }
}

fn log_factorial(k: f64) -> f64 {
    (2..=(k as u64)).map(|j| (j as f64).ln()).sum()
}

pub(crate) fn validate_counts(y: &DVector<f64>) -> Result<()> {
    if let Some(v) = y.iter().find(|v| !(**v >= 0.0) || v.fract() != 0.0) {
        return Err(Error::Domain(format!(
            "Poisson observations must be non-negative integers, got {v}"
        )));
    }
    Ok(())
}

/// Log-likelihood given the linear predictor `eta = C x + b`, plus its
/// derivative with respect to `eta`. The Poisson `log y!` term is included
/// only when `with_constant` is set.
pub(crate) fn loglik_from_predictor(
    y: &DVector<f64>,
    eta: &DVector<f64>,
    kind: ObsKind,
    log_var: f64,
    with_constant: bool,
) -> (f64, DVector<f64>) {
    match kind {
        ObsKind::Poisson => {
            let mut ll = 0.0;
            let d = DVector::from_fn(y.len(), |i, _| {
                let rate = eta[i].exp();
                ll += y[i] * eta[i] - rate;
                if with_constant && y[i] > 1.0 {
                    ll -= log_factorial(y[i]);
                }
                y[i] - rate
            });
            (ll, d)
        }
        ObsKind::Gaussian => {
            let var = log_var.exp();
            let resid = y - eta;
            let n = y.len() as f64;
            let ll = -0.5 * n * ((2.0 * PI).ln() + log_var) - resid.norm_squared() / (2.0 * var);
            (ll, resid / var)
        }
    }
}

/// `log p(y | x)` under the observation model, normalizing constants included.
pub fn observation_loglik(y: &DVector<f64>, x: &DVector<f64>, params: &ObservationParams) -> Result<f64> {
    check_len("observation", params.obs_dim(), y.len())?;
    if params.kind == ObsKind::Poisson {
        validate_counts(y)?;
    }
    let eta = params.linear_predictor(x)?;
    Ok(loglik_from_predictor(y, &eta, params.kind, params.log_obs_noise_var, true).0)
}

/// Draws one observation. Poisson channels emit at most one event per bin,
/// with probability `1 - exp(-λ)`.
pub fn sample_observation<R: Rng + ?Sized>(
    x: &DVector<f64>,
    params: &ObservationParams,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let eta = params.linear_predictor(x)?;
    Ok(match params.kind {
        ObsKind::Gaussian => {
            let sd = params.obs_noise_var().sqrt();
            eta.map(|e| {
                let z: f64 = StandardNormal.sample(rng);
                e + sd * z
            })
        }
        ObsKind::Poisson => eta.map(|e| {
            let p_spike = -(-e.exp()).exp_m1();
            if rng.random::<f64>() < p_spike {
                1.0
            } else {
                0.0
            }
        }),
    })
}

/// Scales every column of the loading to unit Euclidean norm.
pub fn normalize_loading(loading: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = loading.clone();
    normalize_loading_in_place(&mut out)?;
    Ok(out)
}

pub(crate) fn normalize_loading_in_place(loading: &mut DMatrix<f64>) -> Result<()> {
    for (j, mut col) in loading.column_iter_mut().enumerate() {
        let norm = col.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Domain(format!("loading column {j} has norm {norm}")));
        }
        if norm != 1.0 {
            col /= norm;
        }
    }
    Ok(())
}
