use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::model::ModelBundle;
use super::objective::FilterState;
use crate::error::{Error, Result};
use crate::generative::{drift, sample_observation, ObsKind};

/// Sampled futures: `latents[k]` is `T x m`, `observations[k]` is `T x n`.
/// Row `h` holds the state `h + 1` steps after the starting posterior.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub latents: Vec<DMatrix<f64>>,
    pub observations: Vec<DMatrix<f64>>,
}

impl Rollout {
    pub fn n_trials(&self) -> usize {
        self.latents.len()
    }

    pub fn horizon(&self) -> usize {
        self.latents.first().map_or(0, |x| x.nrows())
    }
}

/// Runs the learned generative model forward from `q(x_t)` without data.
///
/// `inputs` (row `h` drives step `h -> h+1`) defaults to zero input.
pub fn predict_rollout<R: Rng + ?Sized>(
    state: &FilterState,
    bundle: &ModelBundle,
    inputs: Option<&DMatrix<f64>>,
    horizon: usize,
    n_trials: usize,
    rng: &mut R,
) -> Result<Rollout> {
    if horizon == 0 || n_trials == 0 {
        return Err(Error::Domain(format!(
            "rollout needs horizon >= 1 and n_trials >= 1, got {horizon} and {n_trials}"
        )));
    }
    let dims = bundle.dims();
    let q = &state.posterior;
    crate::error::check_len("posterior", dims.m, q.dim())?;
    if let Some(u) = inputs {
        if u.nrows() < horizon || u.ncols() != dims.p {
            return Err(Error::Shape {
                context: "rollout inputs",
                expected: horizon * dims.p,
                got: u.nrows() * u.ncols(),
            });
        }
    }
    let sigma = bundle.dynamics.state_noise_var().sqrt();
    let zero_u = DVector::zeros(dims.p);
    let mut latents = Vec::with_capacity(n_trials);
    let mut observations = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let mut x = DVector::from_fn(dims.m, |i, _| {
            let e: f64 = rng.sample(StandardNormal);
            q.mean[i] + q.variance[i].sqrt() * e
        });
        let mut xs = DMatrix::zeros(horizon, dims.m);
        let mut ys = DMatrix::zeros(horizon, dims.n);
        for h in 0..horizon {
            let u = inputs.map_or_else(|| zero_u.clone(), |u| u.row(h).transpose());
            let f = drift(&x, &u, &bundle.dynamics)?;
            x = DVector::from_fn(dims.m, |i, _| {
                let e: f64 = rng.sample(StandardNormal);
                x[i] + f[i] + sigma * e
            });
            let y = sample_observation(&x, &bundle.observation, rng)?;
            xs.set_row(h, &x.transpose());
            ys.set_row(h, &y.transpose());
        }
        latents.push(xs);
        observations.push(ys);
    }
    Ok(Rollout { latents, observations })
}

/// Point forecast one step ahead of `q(x_t)`: the latent `μ + f(μ, u)` and
/// the observation mean at that latent.
pub fn one_step_prediction(
    state: &FilterState,
    bundle: &ModelBundle,
    u: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let mean = &state.posterior.mean;
    let x = mean + drift(mean, u, &bundle.dynamics)?;
    let eta = bundle.observation.linear_predictor(&x)?;
    let y = match bundle.observation.kind {
        ObsKind::Gaussian => eta,
        ObsKind::Poisson => eta.map(f64::exp),
    };
    Ok((x, y))
}
