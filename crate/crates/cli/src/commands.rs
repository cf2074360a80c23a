//! The subcommands. Each collects its artifacts in memory and writes them
//! together with a manifest at the end.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use vjf_core::analysis::{default_seeds, find_fixed_points, prediction_rmse, velocity_grid, AffineMap, PhasePortrait};
use vjf_core::experiment::{aligned_rmse, fit, generate, stacked_means};
use vjf_core::filter::{predict_rollout, FilterState, OnlineFilter, SeqRef, StepDiagnostics};
use vjf_core::io::{
    read_trajectory_bin, read_trajectory_csv, write_diagnostics_csv, write_posterior_csv, write_table,
    write_trajectory_bin, write_trajectory_csv, Checkpoint,
};
use vjf_core::numeric::DiagGaussian;
use vjf_core::protocols::{lds_report, timing_report};
use vjf_core::simulate::{System, Trajectory};

use crate::config::{Command, RunConfig, Settings};
use crate::failure::Failure;

/// Per-step time reported for the reference implementation at the same sizes.
pub const REFERENCE_MS_PER_STEP: f64 = 1.1;

type Outcome<T> = Result<T, Failure>;

#[derive(Default)]
pub struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    fn write_with(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Vec<u8>) -> vjf_core::Result<()>) -> Outcome<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.add(name, buf);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: impl Into<String>, value: &T) -> Outcome<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Numeric(e.to_string()))?;
        text.push('\n');
        self.add(name, text.into_bytes());
        Ok(())
    }
}

#[derive(Serialize)]
struct ArtifactEntry<'a> {
    path: &'a str,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize)]
struct Seeds {
    sim: u64,
    observation: u64,
    train: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config_hash: String,
    seeds: Seeds,
    config: &'a Settings,
    artifacts: Vec<ArtifactEntry<'a>>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// The configuration with the output directory removed, so reruns into
/// another directory hash the same.
fn portable(config: &RunConfig) -> RunConfig {
    let mut c = config.clone();
    c.settings.output.dir = None;
    c
}

pub fn config_hash(config: &RunConfig) -> String {
    let text = serde_json::to_string(&portable(config)).expect("config serializes");
    sha256_hex(text.as_bytes())
}

fn finish(config: &RunConfig, artifacts: &Artifacts) -> Outcome<()> {
    let dir = config.output_dir();
    fs::create_dir_all(&dir)?;
    for (name, bytes) in &artifacts.files {
        fs::write(dir.join(name), bytes)?;
    }
    let s = &config.settings;
    let portable = portable(config);
    let manifest = Manifest {
        tool: "vjf",
        version: env!("CARGO_PKG_VERSION"),
        command: config.command.name(),
        config_hash: config_hash(config),
        seeds: Seeds {
            sim: s.sim.seed,
            observation: s.observation.seed,
            train: s.fit.train.seed,
        },
        config: &portable.settings,
        artifacts: artifacts
            .files
            .iter()
            .map(|(name, bytes)| ArtifactEntry {
                path: name,
                bytes: bytes.len(),
                sha256: sha256_hex(bytes),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::Numeric(e.to_string()))?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

/// Runs `config` and writes its artifacts. Returns a one-line summary.
pub fn run(config: &RunConfig) -> Outcome<String> {
    let mut artifacts = Artifacts::default();
    let summary = match config.command {
        Command::Simulate => simulate(config, &mut artifacts)?,
        Command::Filter => filter(config, &mut artifacts)?,
        Command::Predict => predict(config, &mut artifacts)?,
        Command::Portrait => portrait(config, &mut artifacts)?,
        Command::Eval => eval(config, &mut artifacts)?,
        Command::Bench => bench(config, &mut artifacts)?,
    };
    finish(config, &artifacts)?;
    Ok(format!("{summary}; {} files in {}", artifacts.files.len() + 1, config.output_dir().display()))
}

fn seq_name(prefix: &str, k: usize, ext: &str) -> String {
    format!("{prefix}_{k:03}.{ext}")
}

fn read_trajectory(path: &Path, dt: f64) -> Outcome<Trajectory> {
    let file = fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let tr = if path.extension().is_some_and(|e| e == "bin") {
        read_trajectory_bin(reader)?
    } else {
        read_trajectory_csv(reader, dt)?
    };
    if tr.is_empty() {
        return Err(Failure::Config {
            key: None,
            message: format!("{} holds no rows", path.display()),
        });
    }
    Ok(tr)
}

/// Trajectories from `input.trajectories`, or simulated. The flag tells
/// whether true latents are available.
fn load_data(config: &RunConfig) -> Outcome<(Vec<Trajectory>, bool)> {
    let s = &config.settings;
    if s.input.trajectories.is_empty() {
        return Ok((generate(&s.sim, &s.observation)?.trajectories, true));
    }
    let data: Vec<Trajectory> = s
        .input
        .trajectories
        .iter()
        .map(|p| read_trajectory(p, s.sim.dt))
        .collect::<Outcome<_>>()?;
    let shape = |t: &Trajectory| (t.latents.ncols(), t.observations.ncols(), t.inputs.ncols());
    if let Some((i, _)) = data.iter().enumerate().find(|(_, t)| shape(t) != shape(&data[0])) {
        return Err(Failure::Config {
            key: Some(format!("input.trajectories[{i}]")),
            message: format!("dimensions {:?} differ from the first file's {:?}", shape(&data[i]), shape(&data[0])),
        });
    }
    let truth = data[0].latents.ncols() > 0;
    Ok((data, truth))
}

fn diagnostics_for_output(config: &RunConfig, diagnostics: &[StepDiagnostics]) -> Vec<StepDiagnostics> {
    let mut d = diagnostics.to_vec();
    if !config.settings.output.timing {
        d.iter_mut().for_each(|x| x.wall_time = 0.0);
    }
    d
}

fn simulate(config: &RunConfig, artifacts: &mut Artifacts) -> Outcome<String> {
    let s = &config.settings;
    let data = generate(&s.sim, &s.observation)?;
    for (k, tr) in data.trajectories.iter().enumerate() {
        artifacts.write_with(seq_name("trajectory", k, "csv"), |b| write_trajectory_csv(b, tr))?;
        if s.output.binary {
            artifacts.write_with(seq_name("trajectory", k, "bin"), |b| write_trajectory_bin(b, tr))?;
        }
    }
    Ok(format!(
        "simulated {} sequences of {} steps of {}",
        data.trajectories.len(),
        s.sim.steps,
        s.sim.system.name()
    ))
}

/// Trained filter with the last pass's posteriors and all diagnostics.
struct Trained {
    filter: OnlineFilter,
    posteriors: Vec<Vec<DiagGaussian>>,
    diagnostics: Vec<StepDiagnostics>,
}

impl Trained {
    fn final_states(&self) -> Vec<FilterState> {
        self.posteriors
            .iter()
            .map(|p| FilterState {
                posterior: p.last().cloned().expect("sequences are non-empty"),
                step_index: p.len() as u64,
            })
            .collect()
    }
}

fn train(config: &RunConfig, data: &[Trajectory]) -> Outcome<Trained> {
    let s = &config.settings;
    if let Some(path) = &s.input.checkpoint {
        let mut filter = load_checkpoint(path)?.to_filter()?;
        let seqs: Vec<SeqRef<'_>> = data.iter().map(Trajectory::as_seq).collect();
        let mut posteriors = Vec::new();
        let mut diagnostics = Vec::new();
        for _ in 0..s.fit.passes {
            let (p, d) = filter.run_pass(&seqs, None)?;
            posteriors = p;
            diagnostics.extend(d);
        }
        return Ok(Trained {
            filter,
            posteriors,
            diagnostics,
        });
    }
    let run = fit(data, config.latent_dim(), s.observation.kind, &s.fit)?;
    Ok(Trained {
        filter: run.filter,
        posteriors: run.posteriors,
        diagnostics: run.diagnostics,
    })
}

fn load_checkpoint(path: &Path) -> Outcome<Checkpoint> {
    let text = fs::read_to_string(path)?;
    Checkpoint::from_json(&text).map_err(|e| Failure::Config {
        key: Some("input.checkpoint".into()),
        message: e.to_string(),
    })
}

#[derive(Serialize)]
struct FilterSummary {
    sequences: usize,
    passes: u64,
    state_noise_var: f64,
    /// Mean per-step objective over the last pass.
    final_objective: f64,
    /// RMSE between aligned posterior means and true latents, when known.
    latent_rmse: Option<f64>,
}

fn filter(config: &RunConfig, artifacts: &mut Artifacts) -> Outcome<String> {
    let (data, truth) = load_data(config)?;
    let run = train(config, &data)?;
    let states = run.final_states();
    artifacts.add(
        "checkpoint.json",
        Checkpoint::from_filter(&run.filter, &states).to_json()?.into_bytes(),
    );
    let diagnostics = diagnostics_for_output(config, &run.diagnostics);
    artifacts.write_with("diagnostics.csv", |b| write_diagnostics_csv(b, &diagnostics))?;
    for (k, p) in run.posteriors.iter().enumerate() {
        artifacts.write_with(seq_name("posterior", k, "csv"), |b| write_posterior_csv(b, p))?;
    }
    let last_pass = data.iter().map(Trajectory::len).max().unwrap_or(0).min(run.diagnostics.len());
    let tail = &run.diagnostics[run.diagnostics.len() - last_pass..];
    let latent_rmse = if truth && data[0].latents.ncols() > 0 {
        Some(aligned_rmse(&run.posteriors, &data)?.1)
    } else {
        None
    };
    let summary = FilterSummary {
        sequences: data.len(),
        passes: run.filter.passes(),
        state_noise_var: run.filter.bundle.dynamics.state_noise_var(),
        final_objective: tail.iter().map(|d| d.objective).sum::<f64>() / tail.len().max(1) as f64,
        latent_rmse,
    };
    artifacts.json("summary.json", &summary)?;
    Ok(match latent_rmse {
        Some(r) => format!("filtered {} sequences, aligned latent RMSE {r:.4}", data.len()),
        None => format!("filtered {} sequences", data.len()),
    })
}

fn head(tr: &Trajectory, len: usize) -> Trajectory {
    Trajectory {
        latents: tr.latents.rows(0, len).into_owned(),
        observations: tr.observations.rows(0, len).into_owned(),
        inputs: tr.inputs.rows(0, len).into_owned(),
        dt: tr.dt,
    }
}

fn rollout_table(rollouts: &[DMatrix<f64>]) -> (Vec<String>, Vec<Vec<f64>>) {
    let m = rollouts.first().map_or(0, |x| x.ncols());
    let header = ["trial", "h"]
        .iter()
        .map(|s| s.to_string())
        .chain((1..=m).map(|j| format!("x_{j}")))
        .collect();
    let rows = rollouts
        .iter()
        .enumerate()
        .flat_map(|(k, x)| {
            x.row_iter()
                .enumerate()
                .map(move |(h, r)| [k as f64, (h + 1) as f64].into_iter().chain(r.iter().copied()).collect())
        })
        .collect();
    (header, rows)
}

fn predict(config: &RunConfig, artifacts: &mut Artifacts) -> Outcome<String> {
    let s = &config.settings;
    let mut rng = ChaCha8Rng::seed_from_u64(s.fit.train.seed.wrapping_add(9));
    if let (Some(path), true) = (&s.input.checkpoint, s.input.trajectories.is_empty()) {
        // Forecast from the states saved with the model, in model coordinates.
        let ck = load_checkpoint(path)?;
        let bundle = ck.bundle()?;
        if ck.states.is_empty() {
            return Err(Failure::Config {
                key: Some("input.checkpoint".into()),
                message: "checkpoint holds no filter states to forecast from".into(),
            });
        }
        for (k, saved) in ck.states.iter().enumerate() {
            let roll = predict_rollout(&saved.to_state()?, &bundle, None, s.predict.horizon, s.predict.trials, &mut rng)?;
            let (header, rows) = rollout_table(&roll.latents);
            artifacts.write_with(seq_name("rollout", k, "csv"), |b| write_table(b, &header, rows))?;
        }
        return Ok(format!("forecast {} sequences {} steps ahead", ck.states.len(), s.predict.horizon));
    }
    let (data, truth) = load_data(config)?;
    let len = data.iter().map(Trajectory::len).min().unwrap_or(0);
    let train_len = s.predict.train_steps.unwrap_or(len / 2).min(len.saturating_sub(1));
    if train_len == 0 {
        return Err(Failure::Config {
            key: Some("predict.train_steps".into()),
            message: "sequences are too short to split into filtering and forecast parts".into(),
        });
    }
    let horizon = s.predict.horizon.min(len - train_len);
    let train_part: Vec<Trajectory> = data.iter().map(|t| head(t, train_len)).collect();
    let run = train(config, &train_part)?;
    let states = run.final_states();
    artifacts.add(
        "checkpoint.json",
        Checkpoint::from_filter(&run.filter, &states).to_json()?.into_bytes(),
    );
    let map: Option<AffineMap> = if truth { Some(aligned_rmse(&run.posteriors, &train_part)?.0) } else { None };
    let mut mean_curve = vec![0.0; horizon];
    for (k, (state, tr)) in states.iter().zip(&data).enumerate() {
        let roll = predict_rollout(state, &run.filter.bundle, None, horizon, s.predict.trials, &mut rng)?;
        let latents: Vec<DMatrix<f64>> = match &map {
            Some(m) => roll.latents.iter().map(|x| m.apply(x)).collect(),
            None => roll.latents,
        };
        let (header, rows) = rollout_table(&latents);
        artifacts.write_with(seq_name("rollout", k, "csv"), |b| write_table(b, &header, rows))?;
        if truth {
            let target = tr.latents.rows(train_len, horizon).into_owned();
            let curve = prediction_rmse(&latents, &target)?;
            for (acc, v) in mean_curve.iter_mut().zip(&curve.mean) {
                *acc += v / states.len() as f64;
            }
            let header = vec!["h".to_string(), "rmse".into(), "stderr".into()];
            let rows = (0..horizon).map(|h| vec![(h + 1) as f64, curve.mean[h], curve.stderr[h]]);
            artifacts.write_with(seq_name("rmse", k, "csv"), |b| write_table(b, &header, rows))?;
        }
    }
    if !truth {
        return Ok(format!("forecast {} sequences {horizon} steps ahead", states.len()));
    }
    let header = vec!["h".to_string(), "rmse".into()];
    let rows = mean_curve.iter().enumerate().map(|(h, v)| vec![(h + 1) as f64, *v]);
    artifacts.write_with("rmse_mean.csv", |b| write_table(b, &header, rows))?;
    Ok(format!(
        "forecast {} sequences {horizon} steps ahead; mean RMSE at h=1 {:.4}, h={horizon} {:.4}",
        states.len(),
        mean_curve[0],
        mean_curve[horizon - 1]
    ))
}

fn extent(points: &DMatrix<f64>, margin: f64) -> Vec<(f64, f64)> {
    (0..points.ncols())
        .map(|j| {
            let (lo, hi) = (points.column(j).min(), points.column(j).max());
            let pad = (margin * (hi - lo)).max(1e-3);
            (lo - pad, hi + pad)
        })
        .collect()
}

const MAX_GRID_POINTS: usize = 1_000_000;

fn portrait(config: &RunConfig, artifacts: &mut Artifacts) -> Outcome<String> {
    let s = &config.settings;
    let (bundle, means) = match (&s.input.checkpoint, s.input.trajectories.is_empty()) {
        (Some(path), true) => {
            let ck = load_checkpoint(path)?;
            let bundle = ck.bundle()?;
            let centers = bundle.dynamics.centers.transpose();
            (bundle, centers)
        }
        _ => {
            let (data, _) = load_data(config)?;
            let run = train(config, &data)?;
            let means = stacked_means(&run.posteriors);
            artifacts.add(
                "checkpoint.json",
                Checkpoint::from_filter(&run.filter, &run.final_states()).to_json()?.into_bytes(),
            );
            (run.filter.bundle, means)
        }
    };
    let m = bundle.dims().m;
    let bounds = s.portrait.bounds.clone().unwrap_or_else(|| extent(&means, s.portrait.margin));
    if bounds.len() != m {
        return Err(Failure::Config {
            key: Some("portrait.bounds".into()),
            message: format!("model has {m} latent dimensions, bounds give {}", bounds.len()),
        });
    }
    let resolution = vec![s.portrait.resolution; m];
    if resolution.iter().try_fold(1usize, |acc, r| acc.checked_mul(*r)).is_none_or(|n| n > MAX_GRID_POINTS) {
        return Err(Failure::Config {
            key: Some("portrait.resolution".into()),
            message: format!("{}^{m} lattice points exceed {MAX_GRID_POINTS}", s.portrait.resolution),
        });
    }
    let grid = velocity_grid(&bundle.dynamics, &bounds, &resolution)?;
    let points: Vec<DVector<f64>> = means.row_iter().map(|r| r.transpose()).collect();
    let seed_res = vec![s.portrait.resolution.min(15); m];
    let seeds = default_seeds(&bounds, &seed_res, &points)?;
    let fixed_points = find_fixed_points(&bundle.dynamics, &seeds, &s.portrait.fixed_points)?;
    let portrait = PhasePortrait { grid, fixed_points };
    artifacts.write_with("velocity_grid.csv", |b| portrait.write_grid_csv(b))?;
    let mut fp = portrait.fixed_points_json()?;
    fp.push('\n');
    artifacts.add("fixed_points.json", fp.into_bytes());
    Ok(format!(
        "velocity field on {} points, {} fixed points",
        portrait.grid.points.len(),
        portrait.fixed_points.len()
    ))
}

const SWITCH_MARGIN: usize = 500;

#[derive(Serialize)]
struct EvalSummary<'a> {
    switch_at: usize,
    vjf: &'a vjf_core::protocols::SwitchResponse,
    dekf: &'a vjf_core::protocols::SwitchResponse,
    /// vjf's post-recovery median error over the dual EKF's.
    post_recovery_ratio: f64,
}

fn eval(config: &RunConfig, artifacts: &mut Artifacts) -> Outcome<String> {
    let sim = &config.settings.sim;
    let System::SwitchingLds { switch_at, .. } = sim.system else {
        return Err(Failure::Config {
            key: Some("sim.system.kind".into()),
            message: format!("eval compares filters on a switching-lds stream, got {}", sim.system.name()),
        });
    };
    if switch_at < SWITCH_MARGIN || sim.steps < switch_at + SWITCH_MARGIN + 1 {
        return Err(Failure::Config {
            key: Some(if switch_at < SWITCH_MARGIN { "sim.system.switch_at" } else { "sim.steps" }.into()),
            message: format!("need {SWITCH_MARGIN} steps on each side of the switch at {switch_at}, got {} steps", sim.steps),
        });
    }
    let report = lds_report(&config.recipe())?;
    let header = vec!["t".to_string(), "vjf".into(), "dekf".into()];
    let rows = report
        .vjf_errors
        .iter()
        .zip(&report.dekf_errors)
        .enumerate()
        .map(|(t, (a, b))| vec![t as f64, *a, *b]);
    artifacts.write_with("errors.csv", |b| write_table(b, &header, rows))?;
    let ratio = report.vjf.after / report.dekf.after;
    artifacts.json(
        "eval.json",
        &EvalSummary {
            switch_at: report.switch_at,
            vjf: &report.vjf,
            dekf: &report.dekf,
            post_recovery_ratio: ratio,
        },
    )?;
    Ok(format!(
        "one-step RMSE after the switch: vjf {:.4}, dekf {:.4} (ratio {ratio:.2})",
        report.vjf.after, report.dekf.after
    ))
}

#[derive(Serialize)]
struct BenchSummary<'a> {
    spec: &'a vjf_core::protocols::TimingSpec,
    median_ms: f64,
    mean_ms: f64,
    slope_ms_per_step: f64,
    slope_ci: [f64; 2],
    slope_ci_contains_zero: bool,
    reference_ms_per_step: f64,
}

fn bench(config: &RunConfig, artifacts: &mut Artifacts) -> Outcome<String> {
    let r = timing_report(&config.settings.bench)?;
    let flat = r.slope_ci[0] <= 0.0 && 0.0 <= r.slope_ci[1];
    artifacts.json(
        "bench.json",
        &BenchSummary {
            spec: &r.spec,
            median_ms: r.median_ms,
            mean_ms: r.mean_ms,
            slope_ms_per_step: r.slope_ms_per_step,
            slope_ci: r.slope_ci,
            slope_ci_contains_zero: flat,
            reference_ms_per_step: REFERENCE_MS_PER_STEP,
        },
    )?;
    let header = vec!["step".to_string(), "ms".into()];
    let rows = r.times_ms.iter().enumerate().map(|(t, v)| vec![t as f64, *v]);
    artifacts.write_with("bench_times.csv", |b| write_table(b, &header, rows))?;
    Ok(format!(
        "median {:.3} ms/step (reference {REFERENCE_MS_PER_STEP} ms), slope {:.2e} ms/step, 95% CI [{:.2e}, {:.2e}]",
        r.median_ms, r.slope_ms_per_step, r.slope_ci[0], r.slope_ci[1]
    ))
}
