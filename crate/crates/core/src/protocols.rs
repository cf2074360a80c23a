//! Benchmark recipes: fixed simulation, observation and training settings for
//! each test system, and the measurements taken on the fitted model.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::analysis::{default_seeds, find_fixed_points, prediction_rmse, FixedPoint, FixedPointConfig, Stability};
use crate::dekf::{dekf_run, DekfConfig, DekfState};
use crate::error::{Error, Result};
use crate::experiment::{aligned_rmse, fit_with, generate, initial_bundle, stack_rows, FitSpec, ObservationSpec};
use crate::filter::{
    one_step_prediction, predict_rollout, Dims, FilterState, ModelBundle, OnlineFilter, ParamBlock, StepDiagnostics, TrainConfig,
};
use crate::generative::{normalize_loading, ObsKind, ObservationParams};
use crate::numeric::DiagGaussian;
use crate::recognition::Activation;
use crate::simulate::{generate_observations, random_loading, simulate, SimSpec, System, Trajectory, MAX_SPIKE_RATE};

/// Everything needed to regenerate a data set and fit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub sim: SimSpec,
    pub observation: ObservationSpec,
    pub fit: FitSpec,
    /// Model latent dimension.
    pub m: usize,
}

pub const PRESETS: [&str; 7] = ["ring", "fhn", "lorenz", "lds", "ring-full", "fhn-full", "lorenz-full"];

pub fn preset(name: &str) -> Result<Recipe> {
    match name {
        "ring" => Ok(ring_recipe()),
        "fhn" => Ok(fhn_recipe()),
        "lorenz" => Ok(lorenz_recipe()),
        "lds" => Ok(lds_recipe()),
        "ring-full" => Ok(full_scale(ring_recipe(), 100, 1000)),
        "fhn-full" => Ok(full_scale(fhn_recipe(), 100, 1000)),
        "lorenz-full" => Ok(full_scale(lorenz_recipe(), 216, 1000)),
        other => Err(Error::Config(format!("unknown preset {other:?}, expected one of {PRESETS:?}"))),
    }
}

/// The desk-scale recipe at the full published sizes: more and longer
/// sequences, 200 observed channels.
fn full_scale(mut recipe: Recipe, sequences: usize, steps: usize) -> Recipe {
    recipe.sim.n_sequences = sequences;
    recipe.sim.steps = steps;
    recipe.observation.n = 200;
    recipe
}

pub fn ring_recipe() -> Recipe {
    let mut fit = FitSpec::default();
    fit.passes = 20;
    fit.train.penalty_gamma = 0.003;
    Recipe {
        sim: SimSpec {
            system: System::Ring {
                tau_r: 1.0,
                r0: 1.0,
                tau_phi: 1.0,
                input_magnitude: 0.3,
                start_radius: (0.2, 2.0),
            },
            noise_std: 0.005,
            n_sequences: 20,
            steps: 500,
            dt: 0.1,
            seed: 1,
        },
        observation: ObservationSpec::default(),
        fit,
        m: 2,
    }
}

/// Simulates twice the training length; the second half is the forecast target.
pub fn fhn_recipe() -> Recipe {
    let mut fit = FitSpec::default();
    fit.passes = 120;
    fit.train.penalty_gamma = 1000.0;
    fit.train.adam.learning_rate = 3e-4;
    Recipe {
        sim: SimSpec {
            system: System::fhn(),
            noise_std: 0.002,
            n_sequences: 20,
            steps: 2000,
            dt: 0.5,
            seed: 1,
        },
        observation: ObservationSpec {
            kind: ObsKind::Gaussian,
            gain: 1.0,
            noise_var: 0.01,
            ..ObservationSpec::default()
        },
        fit,
        m: 2,
    }
}

/// Trains on the first 1000 steps; 2000 more are held out.
pub fn lorenz_recipe() -> Recipe {
    let mut fit = FitSpec::default();
    fit.passes = 60;
    fit.train.penalty_gamma = 300.0;
    fit.model.activation = Activation::Relu;
    Recipe {
        sim: SimSpec {
            system: System::lorenz(),
            noise_std: 0.01,
            n_sequences: 50,
            steps: 3000,
            dt: 0.01,
            seed: 1,
        },
        observation: ObservationSpec {
            kind: ObsKind::Gaussian,
            gain: 0.05,
            noise_var: 1e-3,
            ..ObservationSpec::default()
        },
        fit,
        m: 3,
    }
}

/// `passes` here are warm-up passes over the first 1500 steps, before the
/// single streaming pass.
pub fn lds_recipe() -> Recipe {
    let mut fit = FitSpec::default();
    fit.passes = 40;
    fit.train.penalty_gamma = 100.0;
    fit.train.frozen = ParamBlock::OBSERVATION.to_vec();
    fit.model.activation = Activation::Relu;
    fit.model.fa_init = false;
    fit.model.reseed_centers = false;
    Recipe {
        sim: SimSpec {
            system: System::switching_lds(),
            noise_std: 0.1,
            n_sequences: 1,
            steps: 4000,
            dt: 1.0,
            seed: 1,
        },
        observation: ObservationSpec {
            n: 20,
            kind: ObsKind::Gaussian,
            gain: 1.0,
            noise_var: 1e-4,
            seed: 3,
            ..ObservationSpec::default()
        },
        fit,
        m: 2,
    }
}

fn head(tr: &Trajectory, len: usize) -> Trajectory {
    Trajectory {
        latents: tr.latents.rows(0, len).into_owned(),
        observations: tr.observations.rows(0, len).into_owned(),
        inputs: tr.inputs.rows(0, len).into_owned(),
        dt: tr.dt,
    }
}

fn column_std(x: &DMatrix<f64>) -> Vec<f64> {
    (0..x.ncols()).map(|j| x.column(j).variance().sqrt()).collect()
}

/// Level of each objective term late in training relative to the distance
/// it travelled. Means are taken per pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub term: String,
    pub last_mean: f64,
    pub previous_mean: f64,
    pub range: f64,
    /// `|last_mean - previous_mean| / range`.
    pub relative_change: f64,
}

/// Compares the mean over the final 10% of steps with the 10% before, for
/// reconstruction, dynamics and entropy. `range` is the spread of per-pass means.
pub fn plateau(diagnostics: &[StepDiagnostics], pass_len: usize) -> Result<Vec<Plateau>> {
    let total = diagnostics.len();
    if pass_len == 0 || total < 2 * pass_len || total < 20 {
        return Err(Error::Domain(format!("plateau needs at least two passes, got {total} steps of {pass_len}")));
    }
    let tenth = total / 10;
    let terms: [(&str, fn(&StepDiagnostics) -> f64); 3] = [
        ("reconstruction", |d| d.reconstruction_ll),
        ("dynamics", |d| d.dynamics_ll),
        ("entropy", |d| d.entropy),
    ];
    let mean = |s: &[StepDiagnostics], f: fn(&StepDiagnostics) -> f64| s.iter().map(f).sum::<f64>() / s.len() as f64;
    Ok(terms
        .iter()
        .map(|&(name, f)| {
            let per_pass: Vec<f64> = diagnostics.chunks(pass_len).map(|c| mean(c, f)).collect();
            let hi = per_pass.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = per_pass.iter().cloned().fold(f64::INFINITY, f64::min);
            let last_mean = mean(&diagnostics[total - tenth..], f);
            let previous_mean = mean(&diagnostics[total - 2 * tenth..total - tenth], f);
            let range = hi - lo;
            Plateau {
                term: name.to_string(),
                last_mean,
                previous_mean,
                range,
                relative_change: (last_mean - previous_mean).abs() / range.max(f64::MIN_POSITIVE),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RingReport {
    /// Latent RMSE after the best affine alignment to the true ring.
    pub latent_rmse: f64,
    /// Fixed points of the learned field, in model coordinates.
    /// `fixed_point_radii` holds their distance from the origin after alignment.
    pub fixed_points: Vec<FixedPoint>,
    pub fixed_point_radii: Vec<f64>,
    /// Fixed points with radius within 0.3 of the ring.
    pub on_ring: usize,
    /// Unstable fixed points within radius 0.3 of the origin.
    pub unstable_center: usize,
    pub plateau: Vec<Plateau>,
    pub state_noise_var: f64,
}

pub fn ring_report(recipe: &Recipe) -> Result<RingReport> {
    let data = generate(&recipe.sim, &recipe.observation)?;
    let tr = &data.trajectories;
    let fit = fit_with(tr, recipe.m, recipe.observation.kind, &recipe.fit, |_, _, _| {})?;
    let (map, latent_rmse) = aligned_rmse(&fit.posteriors, tr)?;
    let means = fit.stacked_means();
    let points: Vec<DVector<f64>> = means.row_iter().map(|r| r.transpose()).collect();
    let bounds: Vec<(f64, f64)> = (0..means.ncols()).map(|j| (means.column(j).min(), means.column(j).max())).collect();
    let seeds = default_seeds(&bounds, &vec![15; bounds.len()], &points)?;
    let found = find_fixed_points(&fit.filter.bundle.dynamics, &seeds, &FixedPointConfig::default())?;
    let radii: Vec<f64> = found
        .iter()
        .map(|fp| map.apply_point(&DVector::from_vec(fp.location.clone())).norm())
        .collect();
    let on_ring = radii.iter().filter(|r| (*r - 1.0).abs() < 0.3).count();
    let unstable_center = found
        .iter()
        .zip(&radii)
        .filter(|(fp, r)| **r < 0.3 && fp.stability == Stability::Unstable)
        .count();
    Ok(RingReport {
        latent_rmse,
        fixed_points: found,
        fixed_point_radii: radii,
        on_ring,
        unstable_center,
        plateau: plateau(&fit.diagnostics, recipe.sim.steps)?,
        state_noise_var: fit.filter.bundle.dynamics.state_noise_var(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FhnReport {
    /// Mean over sequences of the trial-averaged RMSE 100 steps ahead.
    pub rmse_h100: f64,
    /// Error of always predicting the truth's mean: `sqrt` of the mean
    /// per-coordinate variance of the held-out truth.
    pub truth_std: f64,
    /// Per-coordinate std of the rollout latents over their last 500 steps,
    /// averaged over trials and sequences, in model coordinates.
    pub rollout_std: Vec<f64>,
    /// The same after mapping onto true coordinates.
    pub rollout_std_mapped: Vec<f64>,
    pub truth_coordinate_std: Vec<f64>,
    pub latent_rmse: f64,
}

/// Fits the first half of each sequence, then forecasts the second half
/// from each final posterior.
pub fn fhn_report(recipe: &Recipe, trials: usize) -> Result<FhnReport> {
    let data = generate(&recipe.sim, &recipe.observation)?;
    let train_len = recipe.sim.steps / 2;
    let horizon = recipe.sim.steps - train_len;
    if horizon < 500 {
        return Err(Error::Config("fhn forecast needs at least 1000 simulated steps".into()));
    }
    let train: Vec<Trajectory> = data.trajectories.iter().map(|t| head(t, train_len)).collect();
    let fit = fit_with(&train, recipe.m, recipe.observation.kind, &recipe.fit, |_, _, _| {})?;
    let (map, latent_rmse) = aligned_rmse(&fit.posteriors, &train)?;
    let held: Vec<DMatrix<f64>> = data.trajectories.iter().map(|t| t.latents.rows(train_len, horizon).into_owned()).collect();
    let pooled = stack_rows(&held.iter().collect::<Vec<_>>());
    let truth_coordinate_std = column_std(&pooled);
    let truth_std = (truth_coordinate_std.iter().map(|s| s * s).sum::<f64>() / truth_coordinate_std.len() as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.fit.train.seed.wrapping_add(9));
    let m = recipe.m;
    let mut h100 = 0.0;
    let mut raw = vec![0.0; m];
    let mut mapped_std = vec![0.0; truth_coordinate_std.len()];
    let states = fit.final_states();
    let tail = |x: &DMatrix<f64>, j: usize| x.view((x.nrows() - 500, j), (500, 1)).variance().sqrt();
    for (state, truth) in states.iter().zip(&held) {
        let roll = predict_rollout(state, &fit.filter.bundle, None, horizon, trials, &mut rng)?;
        let mapped: Vec<DMatrix<f64>> = roll.latents.iter().map(|x| map.apply(x)).collect();
        h100 += prediction_rmse(&mapped, truth)?.mean[99.min(horizon - 1)];
        for x in &roll.latents {
            for (j, s) in raw.iter_mut().enumerate() {
                *s += tail(x, j);
            }
        }
        for x in &mapped {
            for (j, s) in mapped_std.iter_mut().enumerate() {
                *s += tail(x, j);
            }
        }
    }
    let runs = (states.len() * trials) as f64;
    Ok(FhnReport {
        rmse_h100: h100 / states.len() as f64,
        truth_std,
        rollout_std: raw.iter().map(|s| s / runs).collect(),
        rollout_std_mapped: mapped_std.iter().map(|s| s / runs).collect(),
        truth_coordinate_std,
        latent_rmse,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LorenzReport {
    /// `rmse[k][d]`: error 50 steps after reset `k` on coordinate `d`, pooled
    /// over sequences and trials.
    pub rmse_h50: Vec<Vec<f64>>,
    /// Per-coordinate std of the true attractor.
    pub attractor_std: Vec<f64>,
    pub latent_rmse: f64,
}

pub const LORENZ_TRAIN: usize = 1000;
pub const LORENZ_RESET_EVERY: usize = 500;

/// Fits the first 1000 steps; the remainder is forecast in 500-step segments,
/// each started from the true state mapped into model coordinates.
pub fn lorenz_report(recipe: &Recipe, trials: usize) -> Result<LorenzReport> {
    const H: usize = 50;
    let data = generate(&recipe.sim, &recipe.observation)?;
    if recipe.sim.steps < LORENZ_TRAIN + LORENZ_RESET_EVERY {
        return Err(Error::Config("lorenz forecast needs at least 1500 simulated steps".into()));
    }
    let train: Vec<Trajectory> = data.trajectories.iter().map(|t| head(t, LORENZ_TRAIN)).collect();
    let fit = fit_with(&train, recipe.m, recipe.observation.kind, &recipe.fit, |_, _, _| {})?;
    let (map, latent_rmse) = aligned_rmse(&fit.posteriors, &train)?;
    let inverse = map
        .linear
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numeric("alignment map is singular".into()))?;
    let all = stack_rows(&data.trajectories.iter().map(|t| &t.latents).collect::<Vec<_>>());
    let attractor_std = column_std(&all);
    let d = attractor_std.len();
    let resets = (recipe.sim.steps - LORENZ_TRAIN) / LORENZ_RESET_EVERY;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.fit.train.seed.wrapping_add(9));
    let mut sq = vec![vec![0.0; d]; resets];
    for tr in &data.trajectories {
        for (k, acc) in sq.iter_mut().enumerate() {
            let start = LORENZ_TRAIN - 1 + k * LORENZ_RESET_EVERY;
            let z = &inverse * (tr.latents.row(start).transpose() - &map.offset);
            let state = FilterState {
                posterior: DiagGaussian {
                    mean: z,
                    variance: DVector::zeros(recipe.m),
                },
                step_index: 0,
            };
            let roll = predict_rollout(&state, &fit.filter.bundle, None, H, trials, &mut rng)?;
            for x in &roll.latents {
                let p = map.apply_point(&x.row(H - 1).transpose());
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += (p[j] - tr.latents[(start + H, j)]).powi(2);
                }
            }
        }
    }
    let count = (data.trajectories.len() * trials) as f64;
    Ok(LorenzReport {
        rmse_h50: sq.iter().map(|e| e.iter().map(|v| (v / count).sqrt()).collect()).collect(),
        attractor_std,
        latent_rmse,
    })
}

/// One-step observation error around a change in the dynamics, after a
/// causal 10-step moving average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchResponse {
    /// Median over the 500 steps before the switch.
    pub before: f64,
    /// Maximum over the 50 steps from the switch.
    pub peak: f64,
    /// Median over steps 400 to 500 after the switch.
    pub recovered: f64,
    /// Median from step 500 after the switch to the end.
    pub after: f64,
}

pub const SWITCH_SMOOTHING: usize = 10;

impl SwitchResponse {
    pub fn from_errors(errors: &[f64], switch_at: usize) -> Result<Self> {
        if switch_at < 500 || errors.len() < switch_at + 501 {
            return Err(Error::Domain(format!(
                "switch response needs 500 steps on each side, got switch {switch_at} of {}",
                errors.len()
            )));
        }
        let w = SWITCH_SMOOTHING;
        let smooth: Vec<f64> = (0..errors.len())
            .map(|t| {
                let a = (t + 1).saturating_sub(w);
                errors[a..=t].iter().sum::<f64>() / (t + 1 - a) as f64
            })
            .collect();
        let median = |s: &[f64]| {
            let mut v = s.to_vec();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        Ok(Self {
            before: median(&smooth[switch_at - 500..switch_at]),
            peak: smooth[switch_at..switch_at + 50].iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            recovered: median(&smooth[switch_at + 400..switch_at + 500]),
            after: median(&smooth[switch_at + 500..]),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LdsReport {
    pub switch_at: usize,
    pub vjf: SwitchResponse,
    pub dekf: SwitchResponse,
    /// Per-step RMS one-step observation error.
    pub vjf_errors: Vec<f64>,
    pub dekf_errors: Vec<f64>,
}

const LDS_WARM_PREFIX: usize = 1500;

/// Both filters see the same observations through the true, unit-column
/// loading. The dual EKF starts from `A = I`; the variational filter is warmed
/// up on a prefix and then streams the whole sequence once.
pub fn lds_report(recipe: &Recipe) -> Result<LdsReport> {
    let switch_at = match recipe.sim.system {
        System::SwitchingLds { switch_at, .. } => switch_at,
        _ => return Err(Error::Config("the lds recipe needs a switching-lds system".into())),
    };
    let obs_spec = &recipe.observation;
    if obs_spec.kind != ObsKind::Gaussian {
        return Err(Error::Config("the lds comparison needs Gaussian observations".into()));
    }
    let mut tr = simulate(&recipe.sim)?.remove(0);
    let n = obs_spec.n;
    let m = recipe.m;
    let mut rng = ChaCha8Rng::seed_from_u64(obs_spec.seed);
    let loading = normalize_loading(&random_loading(n, m, obs_spec.gain, &mut rng))?;
    let obs = ObservationParams::new(loading, DVector::zeros(n), ObsKind::Gaussian, obs_spec.noise_var)?;
    tr.observations = generate_observations(&tr.latents, &obs, MAX_SPIKE_RATE, &mut rng)?.0;

    let dekf_config = DekfConfig {
        state_noise_var: recipe.sim.noise_std.powi(2),
        ..DekfConfig::default()
    };
    let dekf = dekf_run(&tr.observations, DekfState::new(&DMatrix::identity(m, m), dekf_config)?, &obs)?;
    let dekf_errors: Vec<f64> = dekf.iter().map(|s| (s.innovation.norm_squared() / n as f64).sqrt()).collect();

    let mut bundle = initial_bundle(std::slice::from_ref(&tr), m, ObsKind::Gaussian, &recipe.fit, recipe.fit.train.seed.wrapping_add(5))?;
    bundle.observation = obs;
    let mut filter = OnlineFilter::new(bundle, recipe.fit.train.clone())?;
    let seq = tr.as_seq();
    filter.warm_start(std::slice::from_ref(&seq), recipe.fit.passes, Some(LDS_WARM_PREFIX.min(tr.len())))?;
    let mut state = FilterState::initial(m);
    let mut rngs = vec![ChaCha8Rng::seed_from_u64(recipe.fit.train.seed.wrapping_add(11))];
    let mut vjf_errors = Vec::with_capacity(tr.len());
    for t in 0..tr.len() {
        let (y, u) = seq.step_inputs(t);
        let (_, y_hat) = one_step_prediction(&state, &filter.bundle, &u)?;
        vjf_errors.push(((&y - y_hat).norm_squared() / n as f64).sqrt());
        let (next, _) = filter.step_batch(&[(y, u, &state)], &mut rngs)?;
        state = next.into_iter().next().expect("one sequence in, one state out");
    }
    Ok(LdsReport {
        switch_at,
        vjf: SwitchResponse::from_errors(&vjf_errors, switch_at)?,
        dekf: SwitchResponse::from_errors(&dekf_errors, switch_at)?,
        vjf_errors,
        dekf_errors,
    })
}

/// Settings for the per-step timing benchmark on a simulated spike stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingSpec {
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub r: usize,
    /// Untimed steps before measuring.
    pub warmup: usize,
    pub steps: usize,
    /// Steps per block; blocks are replayed from snapshots in shuffled order.
    pub block: usize,
    /// Each step keeps its fastest time over this many replays.
    pub rounds: usize,
    pub seed: u64,
}

impl Default for TimingSpec {
    fn default() -> Self {
        Self {
            n: 200,
            m: 2,
            q: 100,
            r: 20,
            warmup: 500,
            steps: 5000,
            block: 100,
            rounds: 3,
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub spec: TimingSpec,
    pub median_ms: f64,
    pub mean_ms: f64,
    /// Least-squares slope of step time against step index.
    pub slope_ms_per_step: f64,
    /// 95% interval for the slope, with errors clustered by block.
    pub slope_ci: [f64; 2],
    pub times_ms: Vec<f64>,
}

/// Slope of `y` against its index and its standard error clustered on
/// consecutive runs of `cluster` points.
pub fn slope_with_cluster_se(y: &[f64], cluster: usize) -> (f64, f64) {
    let n = y.len() as f64;
    let t_mean = (n - 1.0) / 2.0;
    let y_mean = y.iter().sum::<f64>() / n;
    let sxx: f64 = (0..y.len()).map(|t| (t as f64 - t_mean).powi(2)).sum();
    let sxy: f64 = y.iter().enumerate().map(|(t, v)| (t as f64 - t_mean) * (v - y_mean)).sum();
    let slope = sxy / sxx;
    let score: Vec<f64> = y
        .iter()
        .enumerate()
        .map(|(t, v)| (t as f64 - t_mean) * (v - y_mean - slope * (t as f64 - t_mean)))
        .collect();
    let g = score.len().div_ceil(cluster) as f64;
    let meat: f64 = score.chunks(cluster).map(|c| c.iter().sum::<f64>().powi(2)).sum();
    (slope, (meat * g / (g - 1.0)).sqrt() / sxx)
}

/// Times every step of a long run. The run is first played once, saving a
/// snapshot at each block start; blocks are then timed in random order so
/// slow drift of the machine does not line up with the step index.
pub fn timing_report(spec: &TimingSpec) -> Result<TimingReport> {
    if spec.block == 0 || spec.rounds == 0 || spec.steps < 3 * spec.block {
        return Err(Error::Config("timing needs block >= 1, rounds >= 1 and at least three blocks".into()));
    }
    let sim = SimSpec {
        system: System::ring(),
        noise_std: 0.01,
        n_sequences: 1,
        steps: spec.warmup + spec.steps,
        dt: 0.1,
        seed: spec.seed,
    };
    let obs = ObservationSpec {
        n: spec.n,
        seed: spec.seed,
        ..ObservationSpec::default()
    };
    let mut data = generate(&sim, &obs)?;
    let tr = data.trajectories.remove(0);
    let dims = Dims {
        n: spec.n,
        m: spec.m,
        p: 1,
        q: spec.q,
        r: spec.r,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let bundle = ModelBundle::init(dims, ObsKind::Poisson, Activation::Tanh, 2.0, &mut rng)?;
    let mut filter = OnlineFilter::new(bundle, TrainConfig::default())?;
    let seq = tr.as_seq();
    let mut state = FilterState::initial(spec.m);
    let mut rngs = vec![ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(2))];
    let mut snapshots = Vec::with_capacity(spec.steps.div_ceil(spec.block));
    for t in 0..spec.warmup + spec.steps {
        if t >= spec.warmup && (t - spec.warmup) % spec.block == 0 {
            snapshots.push((filter.clone(), state.clone(), rngs.clone()));
        }
        let (y, u) = seq.step_inputs(t);
        state = filter.step_batch(&[(y, u, &state)], &mut rngs)?.0.remove(0);
    }
    let mut times = vec![f64::INFINITY; spec.steps];
    let mut order: Vec<usize> = (0..snapshots.len()).collect();
    for _ in 0..spec.rounds {
        order.shuffle(&mut rng);
        for &b in &order {
            let (mut f, mut st, mut r) = snapshots[b].clone();
            for i in b * spec.block..((b + 1) * spec.block).min(spec.steps) {
                let (y, u) = seq.step_inputs(spec.warmup + i);
                let (next, diag) = f.step_batch(&[(y, u, &st)], &mut r)?;
                st = next.into_iter().next().expect("one sequence in, one state out");
                times[i] = times[i].min(diag.wall_time * 1e3);
            }
        }
    }
    let (slope, se) = slope_with_cluster_se(&times, spec.block);
    let clusters = spec.steps.div_ceil(spec.block) as f64;
    let crit = StudentsT::new(0.0, 1.0, clusters - 1.0)
        .map_err(|e| Error::Numeric(e.to_string()))?
        .inverse_cdf(0.975);
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(TimingReport {
        spec: spec.clone(),
        median_ms: sorted[spec.steps / 2],
        mean_ms: times.iter().sum::<f64>() / spec.steps as f64,
        slope_ms_per_step: slope,
        slope_ci: [slope - crit * se, slope + crit * se],
        times_ms: times,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESETS {
            let r = preset(name).unwrap();
            r.sim.validate().unwrap();
            r.fit.validate().unwrap();
            assert_eq!(r.sim.system.latent_dim(), r.m);
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn recipe_json_round_trip() {
        let r = lorenz_recipe();
        let back: Recipe = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn cluster_slope_recovers_a_trend() {
        let y: Vec<f64> = (0..1000).map(|t| 2.0 + 0.01 * t as f64 + if t % 2 == 0 { 0.1 } else { -0.1 }).collect();
        let (slope, se) = slope_with_cluster_se(&y, 50);
        assert!((slope - 0.01).abs() < 1e-4);
        assert!(se < 1e-3);
        let flat: Vec<f64> = (0..1000).map(|t| if (t / 7) % 2 == 0 { 1.0 } else { 1.2 }).collect();
        let (slope, se) = slope_with_cluster_se(&flat, 50);
        assert!(slope.abs() < 2.0 * se.max(1e-12) + 1e-5);
    }

    #[test]
    fn small_timing_run() {
        let spec = TimingSpec { n: 10, q: 8, r: 4, warmup: 10, steps: 60, block: 10, rounds: 2, ..TimingSpec::default() };
        let r = timing_report(&spec).unwrap();
        assert_eq!(r.times_ms.len(), 60);
        assert!(r.times_ms.iter().all(|t| t.is_finite() && *t >= 0.0));
        assert!(r.slope_ci[0] <= r.slope_ms_per_step && r.slope_ms_per_step <= r.slope_ci[1]);
        assert!(timing_report(&TimingSpec { steps: 20, ..spec }).is_err());
    }

    #[test]
    fn switch_response_on_step_profile() {
        let mut e = vec![1.0; 2000];
        for v in &mut e[1000..1030] {
            *v = 11.0;
        }
        let s = SwitchResponse::from_errors(&e, 1000).unwrap();
        assert_eq!(s.before, 1.0);
        assert!((s.peak - 11.0).abs() < 1e-12);
        assert_eq!(s.recovered, 1.0);
        assert_eq!(s.after, 1.0);
        assert!(SwitchResponse::from_errors(&e, 100).is_err());
    }

    #[test]
    fn plateau_of_flat_and_trending_series() {
        let mk = |f: &dyn Fn(usize) -> f64| -> Vec<StepDiagnostics> {
            (0..1000)
                .map(|i| StepDiagnostics {
                    reconstruction_ll: f(i),
                    dynamics_ll: f(i),
                    entropy: f(i),
                    ..Default::default()
                })
                .collect()
        };
        let settled = mk(&|i| (-(i as f64) / 50.0).exp());
        assert!(plateau(&settled, 100).unwrap().iter().all(|p| p.relative_change < 0.05));
        let linear = mk(&|i| i as f64);
        assert!(plateau(&linear, 100).unwrap().iter().all(|p| p.relative_change > 0.05));
        assert!(plateau(&settled[..100], 100).is_err());
    }
}
