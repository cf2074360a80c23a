//! Online joint filtering: one optimizer update per arriving observation,
//! with gradients averaged across sequences stepped in lockstep.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::ModelBundle;
use super::objective::{FilterState, StepDiagnostics, StepNoise, StepTape, TrainConfig};
use crate::error::{check_len, Error, Result};
use crate::generative::normalize_loading_in_place;
use crate::numeric::{clip_global_norm, AdamState, DiagGaussian};

/// One observation stream: `T x n` observations and `T x p` inputs, where
/// row `t` of the inputs drives the transition from `t` to `t + 1`.
#[derive(Debug, Clone, Copy)]
pub struct SeqRef<'a> {
    pub observations: &'a DMatrix<f64>,
    pub inputs: &'a DMatrix<f64>,
    /// Seed of this sequence's sampling noise; derived from the run seed and
    /// the sequence index when absent.
    pub noise_seed: Option<u64>,
}

impl<'a> SeqRef<'a> {
    pub fn new(observations: &'a DMatrix<f64>, inputs: &'a DMatrix<f64>) -> Self {
        Self {
            observations,
            inputs,
            noise_seed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.observations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(y_t, u_{t-1})`, with a zero input before the first step.
    pub fn step_inputs(&self, t: usize) -> (DVector<f64>, DVector<f64>) {
        let y = self.observations.row(t).transpose();
        let u = if t == 0 {
            DVector::zeros(self.inputs.ncols())
        } else {
            self.inputs.row(t - 1).transpose()
        };
        (y, u)
    }
}

/// Posterior history, the learned model and per-step diagnostics of a run.
#[derive(Debug, Clone)]
pub struct FilterRun {
    /// `posteriors[k][t]` is `q(x_t)` for sequence `k`.
    pub posteriors: Vec<Vec<DiagGaussian>>,
    /// One entry per time index, averaged over the sequences live at that index.
    pub diagnostics: Vec<StepDiagnostics>,
    pub bundle: ModelBundle,
}

impl FilterRun {
    /// Posterior means of sequence `k` as a `T x m` matrix.
    pub fn means(&self, k: usize) -> DMatrix<f64> {
        let hist = &self.posteriors[k];
        let m = hist.first().map_or(0, |q| q.dim());
        DMatrix::from_fn(hist.len(), m, |t, j| hist[t].mean[j])
    }
}

#[derive(Debug, Clone, Copy)]
struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.start.elapsed().as_secs_f64()
        }
        #[cfg(target_arch = "wasm32")]
        {
            0.0
        }
    }
}

pub(crate) fn derive_seed(base: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Applies one clipped Adam update to `bundle` and re-normalizes the loading.
/// On error the bundle is left untouched.
fn apply_update(
    bundle: &mut ModelBundle,
    optimizer: &mut AdamState,
    mut grad: ModelBundle,
    config: &TrainConfig,
) -> Result<()> {
    for &block in &config.frozen {
        grad.block_mut(block).iter_mut().for_each(|g| *g = 0.0);
    }
    let mut flat_grad = grad.to_flat();
    clip_global_norm(&mut flat_grad, config.grad_clip);
    let mut flat = bundle.to_flat();
    optimizer.step(&mut flat, &flat_grad)?;
    let mut candidate = bundle.clone();
    candidate.set_from_flat(&flat)?;
    normalize_loading_in_place(&mut candidate.observation.loading)?;
    if !candidate.is_finite() {
        return Err(Error::NonFinite {
            component: "updated parameters",
        });
    }
    *bundle = candidate;
    Ok(())
}

/// One step of joint filtering for a single stream (Algorithm: draw noise,
/// recognize, evaluate the objective, take an optimizer step).
///
/// Returns the new posterior and the diagnostics of the last forward pass.
/// `bundle` and `optimizer` are updated in place.
pub fn filter_step<R: Rng + ?Sized>(
    y: &DVector<f64>,
    u_prev: &DVector<f64>,
    state: &FilterState,
    bundle: &mut ModelBundle,
    optimizer: &mut AdamState,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(FilterState, StepDiagnostics)> {
    let clock = Stopwatch::start();
    let m = bundle.dims().m;
    let mut last = None;
    for _ in 0..config.updates_per_step {
        let noise = StepNoise::draw(m, rng);
        let tape = StepTape::record(y, u_prev, &state.posterior, bundle, noise, config.penalty_gamma)?
            .with_latent_weight(config.latent_weight);
        let mut grad = bundle.zeros_like();
        tape.backward(bundle, 1.0, &mut grad);
        apply_update(bundle, optimizer, grad, config)?;
        last = Some(tape);
    }
    let tape = last.expect("updates_per_step >= 1");
    let mut diag = tape.diagnostics();
    diag.wall_time = clock.seconds();
    Ok((
        FilterState {
            posterior: tape.posterior().clone(),
            step_index: state.step_index + 1,
        },
        diag,
    ))
}

/// Owns the model, optimizer state and configuration across steps and passes.
#[derive(Debug, Clone)]
pub struct OnlineFilter {
    pub bundle: ModelBundle,
    pub optimizer: AdamState,
    pub config: TrainConfig,
    passes: u64,
}

impl OnlineFilter {
    pub fn new(bundle: ModelBundle, config: TrainConfig) -> Result<Self> {
        bundle.validate()?;
        config.validate()?;
        let optimizer = AdamState::new(bundle.n_params(), config.adam);
        Ok(Self {
            bundle,
            optimizer,
            config,
            passes: 0,
        })
    }

    /// Rebuilds a filter from saved parts; the optimizer must match the bundle.
    pub fn from_parts(bundle: ModelBundle, optimizer: AdamState, config: TrainConfig, passes: u64) -> Result<Self> {
        bundle.validate()?;
        config.validate()?;
        check_len("optimizer moments", bundle.n_params(), optimizer.len())?;
        Ok(Self {
            bundle,
            optimizer,
            config,
            passes,
        })
    }

    /// Completed passes; seeds the per-sequence noise of the next one.
    pub fn passes(&self) -> u64 {
        self.passes
    }

    /// Steps every live sequence once, averaging their gradients into a single
    /// update. `rngs[k]` supplies sequence `k`'s noise.
    pub fn step_batch(
        &mut self,
        steps: &[(DVector<f64>, DVector<f64>, &FilterState)],
        rngs: &mut [ChaCha8Rng],
    ) -> Result<(Vec<FilterState>, StepDiagnostics)> {
        if steps.is_empty() {
            return Err(Error::Config("step_batch needs at least one sequence".into()));
        }
        check_len("per-sequence generators", steps.len(), rngs.len())?;
        let clock = Stopwatch::start();
        let m = self.bundle.dims().m;
        let weight = 1.0 / steps.len() as f64;
        let mut tapes = Vec::with_capacity(steps.len());
        for _ in 0..self.config.updates_per_step {
            tapes.clear();
            let mut grad = self.bundle.zeros_like();
            for ((y, u, state), rng) in steps.iter().zip(rngs.iter_mut()) {
                let noise = StepNoise::draw(m, rng);
                let tape = StepTape::record(
                    y,
                    u,
                    &state.posterior,
                    &self.bundle,
                    noise,
                    self.config.penalty_gamma,
                )?
                .with_latent_weight(self.config.latent_weight);
                tape.backward(&self.bundle, weight, &mut grad);
                tapes.push(tape);
            }
            apply_update(&mut self.bundle, &mut self.optimizer, grad, &self.config)?;
        }
        let mut diag = StepDiagnostics::default();
        let mut next = Vec::with_capacity(steps.len());
        for (tape, (_, _, state)) in tapes.iter().zip(steps) {
            let d = tape.diagnostics();
            diag.reconstruction_ll += weight * d.reconstruction_ll;
            diag.dynamics_ll += weight * d.dynamics_ll;
            diag.entropy += weight * d.entropy;
            diag.penalty += weight * d.penalty;
            diag.objective += weight * d.objective;
            next.push(FilterState {
                posterior: tape.posterior().clone(),
                step_index: state.step_index + 1,
            });
        }
        diag.wall_time = clock.seconds();
        Ok((next, diag))
    }

    fn sequence_rngs(&self, sequences: &[SeqRef<'_>]) -> Vec<ChaCha8Rng> {
        sequences
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let seed = s.noise_seed.unwrap_or_else(|| {
                    derive_seed(self.config.seed, (self.passes << 32) | k as u64)
                });
                ChaCha8Rng::seed_from_u64(seed)
            })
            .collect()
    }

    fn check_sequences(&self, sequences: &[SeqRef<'_>]) -> Result<()> {
        let dims = self.bundle.dims();
        if sequences.is_empty() {
            return Err(Error::Config("no sequences to filter".into()));
        }
        for s in sequences {
            if s.observations.ncols() != dims.n || s.inputs.ncols() != dims.p {
                return Err(Error::Config(format!(
                    "sequence has {} observed and {} input dimensions, model expects n={} p={}",
                    s.observations.ncols(),
                    s.inputs.ncols(),
                    dims.n,
                    dims.p
                )));
            }
            if s.inputs.nrows() != s.observations.nrows() {
                return Err(Error::Config(format!(
                    "sequence has {} observation rows but {} input rows",
                    s.observations.nrows(),
                    s.inputs.nrows()
                )));
            }
        }
        Ok(())
    }

    /// One lockstep pass over (at most `max_len` steps of) every sequence,
    /// starting each from `μ_0 = 0, s_0 = 1`. Sequences that end early drop out.
    pub fn run_pass(
        &mut self,
        sequences: &[SeqRef<'_>],
        max_len: Option<usize>,
    ) -> Result<(Vec<Vec<DiagGaussian>>, Vec<StepDiagnostics>)> {
        self.check_sequences(sequences)?;
        let m = self.bundle.dims().m;
        let horizon = sequences.iter().map(SeqRef::len).max().unwrap_or(0);
        let horizon = max_len.map_or(horizon, |l| l.min(horizon));
        let mut rngs = self.sequence_rngs(sequences);
        self.passes += 1;
        let mut states: Vec<FilterState> = sequences.iter().map(|_| FilterState::initial(m)).collect();
        let mut posteriors: Vec<Vec<DiagGaussian>> =
            sequences.iter().map(|s| Vec::with_capacity(s.len().min(horizon))).collect();
        let mut diagnostics = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let live: Vec<usize> = (0..sequences.len()).filter(|&k| t < sequences[k].len()).collect();
            let steps: Vec<_> = live
                .iter()
                .map(|&k| {
                    let (y, u) = sequences[k].step_inputs(t);
                    (y, u, &states[k])
                })
                .collect();
            let mut live_rngs: Vec<ChaCha8Rng> = live.iter().map(|&k| rngs[k].clone()).collect();
            let (next, diag) = self.step_batch(&steps, &mut live_rngs)?;
            for ((&k, state), rng) in live.iter().zip(next).zip(live_rngs) {
                posteriors[k].push(state.posterior.clone());
                states[k] = state;
                rngs[k] = rng;
            }
            diagnostics.push(diag);
        }
        Ok((posteriors, diagnostics))
    }

    /// Several passes over the first `prefix_len` steps before going online.
    pub fn warm_start(&mut self, sequences: &[SeqRef<'_>], passes: usize, prefix_len: Option<usize>) -> Result<()> {
        for _ in 0..passes {
            self.run_pass(sequences, prefix_len)?;
        }
        Ok(())
    }

    /// Moves the RBF centers onto `points` and clears the optimizer moments of
    /// the center and width blocks.
    pub fn reseed_centers(&mut self, points: &[DVector<f64>]) -> Result<()> {
        self.bundle.dynamics.reseed_centers(points)?;
        for (block, range) in self.bundle.layout() {
            if matches!(block, super::model::ParamBlock::Centers | super::model::ParamBlock::Widths) {
                for k in range {
                    self.optimizer.first_moment[k] = 0.0;
                    self.optimizer.second_moment[k] = 0.0;
                }
            }
        }
        Ok(())
    }

    pub fn into_run(self, posteriors: Vec<Vec<DiagGaussian>>, diagnostics: Vec<StepDiagnostics>) -> FilterRun {
        FilterRun {
            posteriors,
            diagnostics,
            bundle: self.bundle,
        }
    }
}

/// A single online pass over `sequences` starting from `bundle`.
pub fn filter_online(sequences: &[SeqRef<'_>], bundle: ModelBundle, config: TrainConfig) -> Result<FilterRun> {
    let mut filter = OnlineFilter::new(bundle, config)?;
    let (posteriors, diagnostics) = filter.run_pass(sequences, None)?;
    Ok(filter.into_run(posteriors, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::model::{Dims, ParamBlock};
    use crate::generative::ObsKind;
    use crate::recognition::Activation;

    fn setup(kind: ObsKind) -> (ModelBundle, DMatrix<f64>, DMatrix<f64>) {
        let dims = Dims { n: 6, m: 2, p: 1, q: 8, r: 5 };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let bundle = ModelBundle::init(dims, kind, Activation::Tanh, 2.0, &mut rng).unwrap();
        let t = 40;
        let y = DMatrix::from_fn(t, 6, |i, j| match kind {
            ObsKind::Poisson => ((i * 7 + j * 3) % 5 == 0) as u8 as f64,
            ObsKind::Gaussian => ((i as f64) * 0.3 + j as f64).sin(),
        });
        let u = DMatrix::from_fn(t, 1, |i, _| if i % 10 < 5 { 1.0 } else { -1.0 });
        (bundle, y, u)
    }

    #[test]
    fn zero_learning_rate_keeps_bundle() {
        let (bundle, y, u) = setup(ObsKind::Gaussian);
        let mut config = TrainConfig::default();
        config.adam.learning_rate = 0.0;
        let run = filter_online(&[SeqRef::new(&y, &u)], bundle.clone(), config).unwrap();
        assert!((run.bundle.to_flat().iter().zip(bundle.to_flat()))
            .all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn single_sequence_matches_repeated_filter_step() {
        let (bundle, y, u) = setup(ObsKind::Poisson);
        let config = TrainConfig {
            adam: crate::numeric::AdamConfig {
                learning_rate: 1e-2,
                ..Default::default()
            },
            ..TrainConfig::default()
        };
        let mut seq = SeqRef::new(&y, &u);
        seq.noise_seed = Some(99);
        let run = filter_online(&[seq], bundle.clone(), config.clone()).unwrap();

        let mut b = bundle;
        let mut opt = AdamState::new(b.n_params(), config.adam);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut state = FilterState::initial(2);
        for t in 0..y.nrows() {
            let (yt, ut) = seq.step_inputs(t);
            let (next, diag) = filter_step(&yt, &ut, &state, &mut b, &mut opt, &config, &mut rng).unwrap();
            assert_eq!(next.posterior, run.posteriors[0][t]);
            assert_eq!(diag.objective, run.diagnostics[t].objective);
            state = next;
        }
        assert_eq!(b, run.bundle);
    }

    #[test]
    fn duplicated_sequence_matches_single() {
        let (bundle, y, u) = setup(ObsKind::Gaussian);
        let mut seq = SeqRef::new(&y, &u);
        seq.noise_seed = Some(5);
        let config = TrainConfig::default();
        let one = filter_online(&[seq], bundle.clone(), config.clone()).unwrap();
        let two = filter_online(&[seq, seq], bundle, config).unwrap();
        for (a, b) in one.bundle.to_flat().iter().zip(two.bundle.to_flat()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn ragged_sequences_drop_out() {
        let (bundle, y, u) = setup(ObsKind::Gaussian);
        let y_short = y.rows(0, 15).into_owned();
        let u_short = u.rows(0, 15).into_owned();
        let run = filter_online(
            &[SeqRef::new(&y, &u), SeqRef::new(&y_short, &u_short)],
            bundle,
            TrainConfig::default(),
        )
        .unwrap();
        assert_eq!(run.posteriors[0].len(), 40);
        assert_eq!(run.posteriors[1].len(), 15);
        assert_eq!(run.diagnostics.len(), 40);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let (bundle, y, u) = setup(ObsKind::Gaussian);
        let y_bad = DMatrix::zeros(10, 3);
        let u_bad = DMatrix::zeros(10, 1);
        let err = filter_online(&[SeqRef::new(&y, &u), SeqRef::new(&y_bad, &u_bad)], bundle, TrainConfig::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn loading_columns_stay_normalized_and_frozen_blocks_stay_put() {
        let (bundle, y, u) = setup(ObsKind::Poisson);
        let config = TrainConfig {
            frozen: vec![ParamBlock::DynWeights, ParamBlock::Bias],
            adam: crate::numeric::AdamConfig {
                learning_rate: 0.05,
                ..Default::default()
            },
            ..TrainConfig::default()
        };
        let mut b = bundle.clone();
        let mut opt = AdamState::new(b.n_params(), config.adam);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = FilterState::initial(2);
        let seq = SeqRef::new(&y, &u);
        for t in 0..y.nrows() {
            let (yt, ut) = seq.step_inputs(t);
            state = filter_step(&yt, &ut, &state, &mut b, &mut opt, &config, &mut rng).unwrap().0;
            for col in b.observation.loading.column_iter() {
                assert!((col.norm() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(b.block(ParamBlock::DynWeights), bundle.block(ParamBlock::DynWeights));
        assert_eq!(b.block(ParamBlock::Bias), bundle.block(ParamBlock::Bias));
        assert_ne!(b.block(ParamBlock::HiddenWeights), bundle.block(ParamBlock::HiddenWeights));
    }

    #[test]
    fn failed_step_leaves_bundle_unchanged() {
        let (mut bundle, _, _) = setup(ObsKind::Poisson);
        let before = bundle.clone();
        let mut opt = AdamState::new(bundle.n_params(), Default::default());
        let y = DVector::from_element(6, -1.0);
        let r = filter_step(
            &y,
            &DVector::zeros(1),
            &FilterState::initial(2),
            &mut bundle,
            &mut opt,
            &TrainConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(r.is_err());
        assert_eq!(bundle, before);
    }

    #[test]
    fn seeded_runs_are_bitwise_identical() {
        let (bundle, y, u) = setup(ObsKind::Poisson);
        let seqs = [SeqRef::new(&y, &u), SeqRef::new(&y, &u)];
        let a = filter_online(&seqs, bundle.clone(), TrainConfig::default()).unwrap();
        let b = filter_online(&seqs, bundle, TrainConfig::default()).unwrap();
        let bits = |r: &FilterRun| r.bundle.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
