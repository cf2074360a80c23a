//! The single-step objective
//!
//! ```text
//! L̂ = log p(y_t | x̃_t) + E_q[log p(x_t | x̃_{t-1})] + H(q(x_t)) - γσ²/2
//! ```
//!
//! with `x̃_t = μ_t + s_t^{1/2} ε_t` and `x̃_{t-1} = μ_{t-1} + s_{t-1}^{1/2} ε_{t-1}`,
//! and its exact reverse pass. The loss handed to the optimizer is `-L̂`.
//! `(μ_{t-1}, s_{t-1})` enter as constants: gradients are truncated at lag one.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::{E, PI};

use super::model::{ModelBundle, ParamBlock};
use crate::error::{check_len, Error, Result};
use crate::generative::{drift_backward, loglik_from_predictor, validate_counts, ObsKind};
use crate::numeric::{AdamConfig, DiagGaussian};
use crate::recognition::{recognition_backward, recognize_with_tape, RecognitionTape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the `γσ²/2` state-noise penalty.
    pub penalty_gamma: f64,
    pub adam: AdamConfig,
    /// Global-norm clipping threshold; `f64::INFINITY` disables clipping.
    #[serde(with = "inf_as_string")]
    pub grad_clip: f64,
    pub updates_per_step: usize,
    /// Parameter blocks excluded from optimization.
    pub frozen: Vec<ParamBlock>,
    /// Weight on the dynamics, entropy and penalty terms in the loss. Values
    /// below 1 are only meant for warm-up passes; diagnostics stay unweighted.
    pub latent_weight: f64,
    pub seed: u64,
}

/// JSON has no infinity; it is spelled `"inf"`.
mod inf_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            penalty_gamma: 1.0,
            adam: AdamConfig::default(),
            grad_clip: 10.0,
            updates_per_step: 1,
            frozen: Vec::new(),
            latent_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.penalty_gamma >= 0.0) || !self.penalty_gamma.is_finite() {
            return Err(Error::Config(format!(
                "penalty_gamma must be non-negative, got {}",
                self.penalty_gamma
            )));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!(
                "grad_clip must be positive, got {}",
                self.grad_clip
            )));
        }
        if !(self.latent_weight >= 0.0 && self.latent_weight <= 1.0) {
            return Err(Error::Config(format!(
                "latent_weight must lie in [0, 1], got {}",
                self.latent_weight
            )));
        }
        if self.updates_per_step == 0 {
            return Err(Error::Config("updates_per_step must be at least 1".into()));
        }
        self.adam.validate()
    }
}

/// Posterior summary carried from one step to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub posterior: DiagGaussian,
    pub step_index: u64,
}

impl FilterState {
    /// `μ_0 = 0`, `s_0 = 1`.
    pub fn initial(m: usize) -> Self {
        Self {
            posterior: DiagGaussian::standard(m),
            step_index: 0,
        }
    }
}

/// Per-step decomposition of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub reconstruction_ll: f64,
    pub dynamics_ll: f64,
    pub entropy: f64,
    pub penalty: f64,
    /// `reconstruction_ll + dynamics_ll + entropy - penalty`.
    pub objective: f64,
    /// Seconds spent on the whole step, forward, backward and update.
    pub wall_time: f64,
}

/// The two standard-normal draws used by one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise {
    pub current: DVector<f64>,
    pub previous: DVector<f64>,
}

impl StepNoise {
    /// Draws `ε_t` then `ε_{t-1}`.
    pub fn draw<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Self {
        let current = DVector::from_fn(m, |_, _| StandardNormal.sample(rng));
        let previous = DVector::from_fn(m, |_, _| StandardNormal.sample(rng));
        Self { current, previous }
    }

    pub fn zeros(m: usize) -> Self {
        Self {
            current: DVector::zeros(m),
            previous: DVector::zeros(m),
        }
    }
}

/// Forward record of one step; enough to replay the exact reverse pass.
#[derive(Debug, Clone)]
pub struct StepTape {
    posterior: DiagGaussian,
    recognition: RecognitionTape,
    noise: StepNoise,
    x_sample: DVector<f64>,
    x_prev_sample: DVector<f64>,
    u_prev: DVector<f64>,
    phi: DVector<f64>,
    transition_mean: DVector<f64>,
    d_eta: DVector<f64>,
    diag: StepDiagnostics,
    penalty_gamma: f64,
    latent_weight: f64,
}

impl StepTape {
    pub fn record(
        y: &DVector<f64>,
        u_prev: &DVector<f64>,
        prev: &DiagGaussian,
        bundle: &ModelBundle,
        noise: StepNoise,
        penalty_gamma: f64,
    ) -> Result<Self> {
        let dims = bundle.dims();
        check_len("observation", dims.n, y.len())?;
        check_len("input", dims.p, u_prev.len())?;
        check_len("previous posterior", dims.m, prev.dim())?;
        check_len("noise", dims.m, noise.current.len())?;
        check_len("noise", dims.m, noise.previous.len())?;
        let obs = &bundle.observation;
        if obs.kind == ObsKind::Poisson {
            validate_counts(y)?;
        }
        let dyn_params = &bundle.dynamics;

        let (posterior, recognition) = recognize_with_tape(y, u_prev, prev, &bundle.recognition)?;
        let x_sample = DVector::from_fn(dims.m, |j, _| {
            posterior.mean[j] + posterior.variance[j].sqrt() * noise.current[j]
        });
        let x_prev_sample = DVector::from_fn(dims.m, |j, _| {
            prev.mean[j] + prev.variance[j].sqrt() * noise.previous[j]
        });

        let eta = &obs.loading * &x_sample + &obs.bias;
        let (reconstruction_ll, d_eta) =
            loglik_from_predictor(y, &eta, obs.kind, obs.log_obs_noise_var, true);

        let phi = DVector::from_fn(dims.r, |i, _| {
            let d2 = (&x_prev_sample - dyn_params.centers.column(i)).norm_squared();
            (-0.5 * dyn_params.log_inverse_widths[i].exp() * d2).exp()
        });
        let transition_mean =
            &x_prev_sample + &dyn_params.weights * &phi + &dyn_params.input_map * u_prev;
        let dynamics_ll = crate::generative::transition_closed_form(
            &posterior,
            &transition_mean,
            dyn_params.log_state_noise_var,
        );
        let entropy: f64 = posterior
            .variance
            .iter()
            .map(|s| 0.5 * (2.0 * PI * E * s).ln())
            .sum();
        let penalty = 0.5 * penalty_gamma * dyn_params.state_noise_var();
        let objective = reconstruction_ll + dynamics_ll + entropy - penalty;

        for (component, v) in [
            ("reconstruction log-likelihood", reconstruction_ll),
            ("dynamics log-likelihood", dynamics_ll),
            ("entropy", entropy),
            ("state-noise penalty", penalty),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite { component });
            }
        }

        Ok(Self {
            posterior,
            recognition,
            noise,
            x_sample,
            x_prev_sample,
            u_prev: u_prev.clone(),
            phi,
            transition_mean,
            d_eta,
            diag: StepDiagnostics {
                reconstruction_ll,
                dynamics_ll,
                entropy,
                penalty,
                objective,
                wall_time: 0.0,
            },
            penalty_gamma,
            latent_weight: 1.0,
        })
    }

    /// Down-weights everything but the reconstruction term in [`Self::loss`]
    /// and [`Self::backward`].
    pub fn with_latent_weight(mut self, weight: f64) -> Self {
        self.latent_weight = weight;
        self
    }

    /// `-L̂`, or its weighted variant.
    pub fn loss(&self) -> f64 {
        let d = &self.diag;
        if self.latent_weight == 1.0 {
            -d.objective
        } else {
            -(d.reconstruction_ll + self.latent_weight * (d.dynamics_ll + d.entropy - d.penalty))
        }
    }

    pub fn diagnostics(&self) -> StepDiagnostics {
        self.diag
    }

    pub fn posterior(&self) -> &DiagGaussian {
        &self.posterior
    }

    /// Adds `scale * ∇_Θ(-L̂)` into `grad`.
    pub fn backward(&self, bundle: &ModelBundle, scale: f64, grad: &mut ModelBundle) {
        let m = self.posterior.dim();
        let obs = &bundle.observation;
        let dyn_params = &bundle.dynamics;
        // Everything below is the gradient of L̂ (ascent direction); the sign
        // flip to the loss is folded into `s`.
        let s = -scale;
        let w = self.latent_weight;

        // reconstruction
        grad.observation.loading.ger(s, &self.d_eta, &self.x_sample, 1.0);
        grad.observation.bias.axpy(s, &self.d_eta, 1.0);
        if obs.kind == ObsKind::Gaussian {
            let var = obs.obs_noise_var();
            let n = self.d_eta.len() as f64;
            // d_eta = resid / var, so ‖resid‖² = var² ‖d_eta‖²
            let sq = var * var * self.d_eta.norm_squared();
            grad.observation.log_obs_noise_var += s * (-0.5 * n + sq / (2.0 * var));
        }
        let d_x = obs.loading.tr_mul(&self.d_eta);

        // dynamics, closed-form expectation
        let var = dyn_params.state_noise_var();
        let resid = &self.posterior.mean - &self.transition_mean;
        let d_a = &resid / var;
        drift_backward(
            &self.x_prev_sample,
            &self.u_prev,
            &self.phi,
            dyn_params,
            &((s * w) * &d_a),
            &mut grad.dynamics,
        );
        grad.dynamics.log_state_noise_var += s
            * w
            * (-0.5 * m as f64
                + (resid.norm_squared() + self.posterior.variance.sum()) / (2.0 * var)
                - 0.5 * self.penalty_gamma * var);

        // posterior parameters (μ_t, s_t)
        let mut d_mean = DVector::zeros(m);
        let mut d_var = DVector::zeros(m);
        for j in 0..m {
            let sj = self.posterior.variance[j];
            d_mean[j] = s * (d_x[j] - w * d_a[j]);
            d_var[j] = s
                * (d_x[j] * self.noise.current[j] / (2.0 * sj.sqrt()) + w * (0.5 / sj - 0.5 / var));
        }
        recognition_backward(
            &self.recognition,
            &d_mean,
            &d_var,
            &bundle.recognition,
            &mut grad.recognition,
        );
    }
}

/// Loss, next state and diagnostics for one step, drawing the noise from `rng`.
pub fn step_loss<R: Rng + ?Sized>(
    y: &DVector<f64>,
    u_prev: &DVector<f64>,
    state_prev: &FilterState,
    bundle: &ModelBundle,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(f64, FilterState, StepDiagnostics)> {
    let noise = StepNoise::draw(bundle.dims().m, rng);
    let tape = StepTape::record(y, u_prev, &state_prev.posterior, bundle, noise, config.penalty_gamma)?
        .with_latent_weight(config.latent_weight);
    let next = FilterState {
        posterior: tape.posterior().clone(),
        step_index: state_prev.step_index + 1,
    };
    Ok((tape.loss(), next, tape.diagnostics()))
}

/// Loss and its exact gradient over all of Θ, using the same noise draws as
/// [`step_loss`] would from the same generator state.
pub fn grad_step_loss<R: Rng + ?Sized>(
    y: &DVector<f64>,
    u_prev: &DVector<f64>,
    state_prev: &FilterState,
    bundle: &ModelBundle,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(f64, ModelBundle)> {
    let noise = StepNoise::draw(bundle.dims().m, rng);
    let tape = StepTape::record(y, u_prev, &state_prev.posterior, bundle, noise, config.penalty_gamma)?
        .with_latent_weight(config.latent_weight);
    let mut grad = bundle.zeros_like();
    tape.backward(bundle, 1.0, &mut grad);
    Ok((tape.loss(), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::model::Dims;
    use crate::generative::ObsKind;
    use crate::numeric::{finite_diff_gradient, gaussian_entropy};
    use crate::recognition::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_bundle_hand_evaluated() {
        let dims = Dims { n: 2, m: 2, p: 1, q: 3, r: 2 };
        let bundle = ModelBundle::zeros(dims, ObsKind::Poisson, Activation::Tanh);
        let y = DVector::zeros(2);
        let prev = DiagGaussian::standard(2);
        let tape = StepTape::record(&y, &DVector::zeros(1), &prev, &bundle, StepNoise::zeros(2), 0.0).unwrap();
        let d = tape.diagnostics();
        // C = 0, b = 0: each channel has rate 1 and y = 0
        assert_eq!(d.reconstruction_ll, -2.0);
        // posterior is N(0, 1 + floor), transition mean is x̃_{t-1} = 0, σ² = 1
        let s = 1.0 + crate::recognition::VARIANCE_FLOOR;
        let dyn_expected = -(2.0 * PI).ln() - (2.0 * s) / 2.0;
        assert!((d.dynamics_ll - dyn_expected).abs() < 1e-14);
        let ent = gaussian_entropy(&[s, s]).unwrap();
        assert!((d.entropy - ent).abs() < 1e-14);
        assert!((tape.loss() + (-2.0 + dyn_expected + ent)).abs() < 1e-13);
        assert!((tape.loss() + d.reconstruction_ll + d.dynamics_ll + d.entropy - d.penalty).abs() < 1e-12);
    }

    #[test]
    fn penalty_is_additive() {
        let dims = Dims { n: 3, m: 2, p: 1, q: 4, r: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bundle = ModelBundle::init(dims, ObsKind::Gaussian, Activation::Tanh, 2.0, &mut rng).unwrap();
        bundle.dynamics.log_state_noise_var = -1.3;
        let y = DVector::from_vec(vec![0.2, -0.1, 0.4]);
        let prev = FilterState::initial(2);
        let mut c0 = TrainConfig::default();
        c0.penalty_gamma = 0.0;
        let mut c1 = c0.clone();
        c1.penalty_gamma = 3.5;
        let (l0, _, _) = step_loss(&y, &DVector::zeros(1), &prev, &bundle, &c0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let (l1, _, _) = step_loss(&y, &DVector::zeros(1), &prev, &bundle, &c1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!((l1 - l0 - 0.5 * 3.5 * (-1.3f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn seeded_loss_is_bitwise_reproducible() {
        let dims = Dims { n: 4, m: 2, p: 1, q: 5, r: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bundle = ModelBundle::init(dims, ObsKind::Poisson, Activation::Tanh, 2.0, &mut rng).unwrap();
        let y = DVector::from_vec(vec![0.0, 1.0, 0.0, 1.0]);
        let run = || {
            step_loss(&y, &DVector::zeros(1), &FilterState::initial(2), &bundle, &TrainConfig::default(), &mut ChaCha8Rng::seed_from_u64(77))
                .unwrap()
                .0
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn input_map_gradient_vanishes_without_input() {
        let dims = Dims { n: 4, m: 2, p: 2, q: 5, r: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bundle = ModelBundle::init(dims, ObsKind::Poisson, Activation::Tanh, 2.0, &mut rng).unwrap();
        let y = DVector::from_vec(vec![0.0, 1.0, 0.0, 0.0]);
        let (_, g) = grad_step_loss(&y, &DVector::zeros(2), &FilterState::initial(2), &bundle, &TrainConfig::default(), &mut rng).unwrap();
        assert!(g.block(ParamBlock::InputMap).iter().all(|v| *v == 0.0));
        // the Poisson model has no noise variance to learn
        assert_eq!(g.block(ParamBlock::ObsNoise), &[0.0]);
    }

    #[test]
    fn recognition_gradient_in_reconstruction_only_setting() {
        // W = 0 and a huge state-noise variance switch off the dynamics term's
        // pull on μ, so the recognition gradient is the chain rule through h.
        let dims = Dims { n: 3, m: 2, p: 1, q: 4, r: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bundle = ModelBundle::init(dims, ObsKind::Gaussian, Activation::Tanh, 2.0, &mut rng).unwrap();
        bundle.dynamics.log_state_noise_var = 40.0;
        let y = DVector::from_vec(vec![0.5, -0.3, 0.8]);
        let u = DVector::zeros(1);
        let prev = DiagGaussian::new(DVector::from_vec(vec![0.1, 0.2]), DVector::from_vec(vec![0.5, 0.7])).unwrap();
        let noise = StepNoise::draw(2, &mut rng);
        let tape = StepTape::record(&y, &u, &prev, &bundle, noise.clone(), 0.0).unwrap();
        let mut grad = bundle.zeros_like();
        tape.backward(&bundle, 1.0, &mut grad);
        let flat = bundle.to_flat();
        let layout = bundle.layout();
        let fd = finite_diff_gradient(
            |v| {
                let mut b = bundle.clone();
                b.set_from_flat(v).unwrap();
                StepTape::record(&y, &u, &prev, &b, noise.clone(), 0.0).unwrap().loss()
            },
            &flat,
            1e-5,
        )
        .unwrap();
        let g = grad.to_flat();
        for (block, range) in layout {
            if !ParamBlock::RECOGNITION.contains(&block) {
                continue;
            }
            for k in range {
                let scale = g[k].abs().max(fd[k].abs()).max(1e-3);
                assert!((g[k] - fd[k]).abs() < 1e-4 * scale, "{block:?}[{k}]: {} vs {}", g[k], fd[k]);
            }
        }
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (kind, weight) in [(ObsKind::Poisson, 1.0), (ObsKind::Gaussian, 1.0), (ObsKind::Poisson, 0.3)] {
            let dims = Dims { n: 5, m: 2, p: 1, q: 8, r: 4 };
            let mut bundle = ModelBundle::init(dims, kind, Activation::Tanh, 1.5, &mut rng).unwrap();
            bundle.dynamics.weights.iter_mut().for_each(|w| *w = rng.random_range(-0.5..0.5));
            bundle.dynamics.input_map.iter_mut().for_each(|w| *w = rng.random_range(-0.5..0.5));
            bundle.dynamics.log_state_noise_var = -0.7;
            bundle.observation.log_obs_noise_var = -0.4;
            let y = match kind {
                ObsKind::Poisson => DVector::from_vec(vec![0.0, 1.0, 0.0, 2.0, 1.0]),
                ObsKind::Gaussian => DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0)),
            };
            let u = DVector::from_vec(vec![0.7]);
            let prev = DiagGaussian::new(DVector::from_vec(vec![0.3, -0.6]), DVector::from_vec(vec![0.4, 0.9])).unwrap();
            let noise = StepNoise::draw(2, &mut rng);
            let tape = StepTape::record(&y, &u, &prev, &bundle, noise.clone(), 0.8)
                .unwrap()
                .with_latent_weight(weight);
            let mut grad = bundle.zeros_like();
            tape.backward(&bundle, 1.0, &mut grad);
            let fd = finite_diff_gradient(
                |v| {
                    let mut b = bundle.clone();
                    b.set_from_flat(v).unwrap();
                    StepTape::record(&y, &u, &prev, &b, noise.clone(), 0.8)
                        .unwrap()
                        .with_latent_weight(weight)
                        .loss()
                },
                &bundle.to_flat(),
                1e-5,
            )
            .unwrap();
            for (a, b) in grad.to_flat().iter().zip(&fd) {
                let scale = a.abs().max(b.abs()).max(1e-3);
                assert!((a - b).abs() < 1e-4 * scale, "{kind:?}: {a} vs {b}");
            }
        }
    }
}
