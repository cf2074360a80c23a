//! Dual extended Kalman filter for a linear-Gaussian state space model whose
//! transition matrix drifts as a random walk.
//!
//! The state filter and the parameter filter run side by side: the state
//! filter uses the current transition estimate, and the parameter filter
//! treats `A` (vectorized column-major) as the hidden state of a second EKF.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::generative::{ObsKind, ObservationParams};

const JITTER: f64 = 1e-9;
const MAX_REPAIRS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DekfConfig {
    /// Per-step variance of the random walk on `vec(A)`. Zero freezes `A`.
    pub param_walk_var: f64,
    pub init_param_var: f64,
    pub state_noise_var: f64,
    pub init_state_var: f64,
}

impl Default for DekfConfig {
    fn default() -> Self {
        Self {
            param_walk_var: 1e-5,
            init_param_var: 0.1,
            state_noise_var: 1e-2,
            init_state_var: 1.0,
        }
    }
}

impl DekfConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.param_walk_var >= 0.0
            && self.init_param_var >= 0.0
            && self.state_noise_var >= 0.0
            && self.init_state_var > 0.0
            && [self.param_walk_var, self.init_param_var, self.state_noise_var, self.init_state_var]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid dual EKF settings: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DekfState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `vec(A)`, column-major.
    pub theta: DVector<f64>,
    pub theta_cov: DMatrix<f64>,
    pub config: DekfConfig,
}

impl DekfState {
    /// Zero state with `init_state_var * I` covariance, starting from `a0`.
    pub fn new(a0: &DMatrix<f64>, config: DekfConfig) -> Result<Self> {
        config.validate()?;
        let m = a0.nrows();
        if m == 0 || a0.ncols() != m {
            return Err(Error::Domain(format!("transition matrix must be square and non-empty, got {:?}", a0.shape())));
        }
        Ok(Self {
            mean: DVector::zeros(m),
            cov: DMatrix::identity(m, m) * config.init_state_var,
            theta: DVector::from_column_slice(a0.as_slice()),
            theta_cov: DMatrix::identity(m * m, m * m) * config.init_param_var,
            config,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transition(&self) -> DMatrix<f64> {
        let m = self.latent_dim();
        DMatrix::from_column_slice(m, m, self.theta.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DekfStep {
    pub state: DekfState,
    /// `E[y_t | y_{1:t-1}]`, formed before seeing `y_t`.
    pub prediction: DVector<f64>,
    pub innovation: DVector<f64>,
    /// Innovation covariance of the state filter.
    pub innovation_cov: DMatrix<f64>,
    /// Number of jitter additions needed to keep the covariances definite.
    pub repairs: usize,
}

/// One predict/update cycle of both filters.
pub fn dekf_step(y: &DVector<f64>, state: &DekfState, obs: &ObservationParams) -> Result<DekfStep> {
    if obs.kind != ObsKind::Gaussian {
        return Err(Error::Config("the dual EKF needs a Gaussian observation model".into()));
    }
    let m = state.latent_dim();
    check_len("dual EKF loading", m, obs.latent_dim())?;
    check_len("dual EKF observation", obs.obs_dim(), y.len())?;
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { component: "observation" });
    }
    let n = y.len();
    let c = &obs.loading;
    let r = DMatrix::identity(n, n) * obs.obs_noise_var();
    let cfg = state.config;
    let frozen = cfg.param_walk_var == 0.0;
    let mut repairs = 0;

    // time update
    let a = state.transition();
    let theta_cov_prior = &state.theta_cov + DMatrix::identity(m * m, m * m) * cfg.param_walk_var;
    let x_prior = &a * &state.mean;
    let p_prior = &a * &state.cov * a.transpose() + DMatrix::identity(m, m) * cfg.state_noise_var;

    let prediction = c * &x_prior + &obs.bias;
    let innovation = y - &prediction;
    let s = c * &p_prior * c.transpose() + &r;
    let s = symmetrize(s);
    let s_chol = chol(&s, "innovation covariance")?;

    // state update, Joseph form
    let pct = &p_prior * c.transpose();
    let gain = s_chol.solve(&pct.transpose()).transpose();
    let mean = &x_prior + &gain * &innovation;
    let ikc = DMatrix::identity(m, m) - &gain * c;
    let cov = &ikc * &p_prior * ikc.transpose() + &gain * &r * gain.transpose();
    let cov = make_spd(cov, &mut repairs, "state covariance")?;

    // parameter update: d(A x)/d vec(A) = x^T kron I
    let (theta, theta_cov) = if frozen {
        (state.theta.clone(), state.theta_cov.clone())
    } else {
        let mut h = DMatrix::zeros(n, m * m);
        for j in 0..m {
            // column block j of (x^T kron I) is x_j I
            let block = c * state.mean[j];
            h.view_mut((0, j * m), (n, m)).copy_from(&block);
        }
        let s_theta = symmetrize(&h * &theta_cov_prior * h.transpose() + &s);
        let st_chol = chol(&s_theta, "parameter innovation covariance")?;
        let ph = &theta_cov_prior * h.transpose();
        let k_theta = st_chol.solve(&ph.transpose()).transpose();
        let theta = &state.theta + &k_theta * &innovation;
        let ikh = DMatrix::identity(m * m, m * m) - &k_theta * &h;
        let theta_cov = &ikh * &theta_cov_prior * ikh.transpose() + &k_theta * &s * k_theta.transpose();
        (theta, make_spd(theta_cov, &mut repairs, "parameter covariance")?)
    };

    let next = DekfState {
        mean,
        cov,
        theta,
        theta_cov,
        config: cfg,
    };
    if !next.mean.iter().chain(next.theta.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite { component: "dual EKF estimate" });
    }
    Ok(DekfStep {
        state: next,
        prediction,
        innovation,
        innovation_cov: s,
        repairs,
    })
}

fn symmetrize(a: DMatrix<f64>) -> DMatrix<f64> {
    (&a + a.transpose()) * 0.5
}

fn chol(a: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    Cholesky::new(a.clone()).ok_or_else(|| Error::Numeric(format!("{what} is not positive definite")))
}

fn make_spd(a: DMatrix<f64>, repairs: &mut usize, what: &str) -> Result<DMatrix<f64>> {
    let mut a = symmetrize(a);
    let d = a.nrows();
    let mut jitter = JITTER;
    for _ in 0..MAX_REPAIRS {
        if Cholesky::new(a.clone()).is_some() {
            return Ok(a);
        }
        a += DMatrix::identity(d, d) * jitter;
        jitter *= 10.0;
        *repairs += 1;
    }
    Err(Error::Numeric(format!("{what} stayed indefinite after jitter")))
}

/// Runs the filter over the rows of `y` (`T x n`).
pub fn dekf_run(y: &DMatrix<f64>, init: DekfState, obs: &ObservationParams) -> Result<Vec<DekfStep>> {
    let mut state = init;
    let mut out = Vec::with_capacity(y.nrows());
    for row in y.row_iter() {
        let step = dekf_step(&row.transpose(), &state, obs)?;
        state = step.state.clone();
        out.push(step);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn rotation(decay: f64, theta: f64) -> DMatrix<f64> {
        let (s, c) = theta.sin_cos();
        DMatrix::from_row_slice(2, 2, &[c, -s, s, c]) * decay
    }

    fn normal_vec<R: Rng>(d: usize, std: f64, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(d, |_, _| std * rng.sample::<f64, _>(StandardNormal))
    }

    fn simulate(a: &DMatrix<f64>, obs: &ObservationParams, q: f64, t: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = obs.obs_dim();
        let mut x = normal_vec(2, 1.0, &mut rng);
        let mut y = DMatrix::zeros(t, n);
        for i in 0..t {
            x = a * &x + normal_vec(2, q.sqrt(), &mut rng);
            let row = &obs.loading * &x + &obs.bias + normal_vec(n, obs.obs_noise_var().sqrt(), &mut rng);
            y.set_row(i, &row.transpose());
        }
        y
    }

    fn obs(n: usize, noise_var: f64, seed: u64) -> ObservationParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        ObservationParams::new(c, DVector::zeros(n), ObsKind::Gaussian, noise_var).unwrap()
    }

    #[test]
    fn noiseless_identity_observation_is_tracked_exactly() {
        let a = rotation(0.99, 0.1);
        let o = ObservationParams::new(DMatrix::identity(2, 2), DVector::zeros(2), ObsKind::Gaussian, 1e-300).unwrap();
        let cfg = DekfConfig {
            param_walk_var: 0.0,
            ..DekfConfig::default()
        };
        let y = simulate(&a, &o, 0.01, 50, 1);
        let steps = dekf_run(&y, DekfState::new(&a, cfg).unwrap(), &o).unwrap();
        for (t, s) in steps.iter().enumerate() {
            assert!((&s.state.mean - y.row(t).transpose()).amax() < 1e-9);
        }
    }

    #[test]
    fn zero_walk_freezes_transition() {
        let a0 = rotation(0.9, 0.3);
        let o = obs(5, 0.1, 2);
        let cfg = DekfConfig {
            param_walk_var: 0.0,
            ..DekfConfig::default()
        };
        let y = simulate(&rotation(0.99, -0.2), &o, 0.01, 300, 3);
        let steps = dekf_run(&y, DekfState::new(&a0, cfg).unwrap(), &o).unwrap();
        assert_eq!(steps.last().unwrap().state.transition(), a0);
    }

    #[test]
    fn learns_transition_matrix() {
        let a = rotation(0.98, 0.2);
        let o = obs(10, 0.05, 4);
        let y = simulate(&a, &o, 0.05, 3000, 5);
        let init = DekfState::new(&DMatrix::identity(2, 2), DekfConfig::default()).unwrap();
        let steps = dekf_run(&y, init, &o).unwrap();
        let learned = steps.last().unwrap().state.transition();
        assert!((learned - a).amax() < 0.05);
    }

    fn ljung_box(x: &[f64], lags: usize) -> f64 {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let c0: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
        (1..=lags)
            .map(|k| {
                let ck: f64 = (k..x.len()).map(|i| (x[i] - mean) * (x[i - k] - mean)).sum();
                (ck / c0).powi(2) / (n - k as f64)
            })
            .sum::<f64>()
            * n
            * (n + 2.0)
    }

    #[test]
    fn exact_kalman_innovations_are_white() {
        let a = rotation(0.97, 0.25);
        // one channel, so a single test at the 5% level
        let o = obs(1, 0.2, 6);
        let q = 0.05;
        let y = simulate(&a, &o, q, 2200, 7);
        let cfg = DekfConfig {
            param_walk_var: 0.0,
            state_noise_var: q,
            ..DekfConfig::default()
        };
        let steps = dekf_run(&y, DekfState::new(&a, cfg).unwrap(), &o).unwrap();
        let critical = ChiSquared::new(20.0).unwrap().inverse_cdf(0.95);
        assert!((critical - 31.41).abs() < 0.01);
        // standardized innovations, burn-in dropped
        let series: Vec<f64> = steps[200..]
            .iter()
            .map(|s| s.innovation[0] / s.innovation_cov[(0, 0)].sqrt())
            .collect();
        assert_eq!(series.len(), 2000);
        let stat = ljung_box(&series, 20);
        assert!(stat < critical, "Q = {stat}");
    }

    #[test]
    fn covariances_stay_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let o = obs(3, 0.01, 9);
        let mut state = DekfState::new(&DMatrix::identity(2, 2), DekfConfig::default()).unwrap();
        let mut x = normal_vec(2, 1.0, &mut rng);
        for t in 0..5000 {
            let a = rotation(0.995, if t < 2500 { -0.1 } else { 0.1 });
            x = &a * &x + normal_vec(2, 0.1, &mut rng);
            let y = &o.loading * &x + normal_vec(3, 0.1, &mut rng) * rng.random_range(0.0..3.0);
            state = dekf_step(&y, &state, &o).unwrap().state;
            for cov in [&state.cov, &state.theta_cov] {
                assert_eq!(cov, &cov.transpose());
                let min = SymmetricEigen::new(cov.clone()).eigenvalues.min();
                assert!(min > 0.0, "step {t}: min eigenvalue {min}");
            }
        }
    }

    #[test]
    fn rejects_poisson_and_bad_shapes() {
        let a = DMatrix::identity(2, 2);
        let state = DekfState::new(&a, DekfConfig::default()).unwrap();
        let mut o = obs(3, 0.1, 1);
        assert!(dekf_step(&DVector::zeros(4), &state, &o).is_err());
        o.kind = ObsKind::Poisson;
        assert!(dekf_step(&DVector::zeros(3), &state, &o).is_err());
        assert!(DekfState::new(&DMatrix::zeros(2, 3), DekfConfig::default()).is_err());
        let bad = DekfConfig {
            init_state_var: 0.0,
            ..DekfConfig::default()
        };
        assert!(DekfState::new(&a, bad).is_err());
    }
}
