//! Run configuration: a TOML document merged over a preset, then flags.
//!
//! Precedence, lowest first: preset defaults, the document, `--set` pairs,
//! dedicated flags. The output directory falls back to `$VJF_OUTPUT_DIR`
//! and then `vjf-out`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use vjf_core::analysis::FixedPointConfig;
use vjf_core::experiment::{FitSpec, ObservationSpec};
use vjf_core::protocols::{self, Recipe, TimingSpec};
use vjf_core::simulate::{SimSpec, System};

use crate::failure::Failure;

pub const OUTPUT_ENV: &str = "VJF_OUTPUT_DIR";
pub const DEFAULT_OUTPUT: &str = "vjf-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Simulate,
    Filter,
    Predict,
    Portrait,
    Eval,
    Bench,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Filter => "filter",
            Command::Predict => "predict",
            Command::Portrait => "portrait",
            Command::Eval => "eval",
            Command::Bench => "bench",
        }
    }

    fn default_preset(self) -> &'static str {
        match self {
            Command::Eval => "lds",
            _ => "ring",
        }
    }
}

/// Existing data to use instead of simulating.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputSpec {
    /// Trajectory files, `.csv` or `.bin`.
    pub trajectories: Vec<PathBuf>,
    /// A saved filter to start from.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSpec {
    pub horizon: usize,
    pub trials: usize,
    /// Steps of each simulated sequence used for filtering; the rest is the
    /// forecast target. Defaults to half.
    pub train_steps: Option<usize>,
}

impl Default for PredictSpec {
    fn default() -> Self {
        Self {
            horizon: 200,
            trials: 20,
            train_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PortraitSpec {
    /// Lattice points per axis.
    pub resolution: usize,
    /// Box per latent axis; defaults to the posterior means' extent plus `margin`.
    pub bounds: Option<Vec<(f64, f64)>>,
    /// Fraction of the extent added on each side.
    pub margin: f64,
    pub fixed_points: FixedPointConfig,
}

impl Default for PortraitSpec {
    fn default() -> Self {
        Self {
            resolution: 25,
            bounds: None,
            margin: 0.1,
            fixed_points: FixedPointConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: Option<PathBuf>,
    /// Also write binary trajectories.
    pub binary: bool,
    /// Record per-step wall time in diagnostics; otherwise `wall_ms` is 0 so
    /// reruns are byte-identical.
    pub timing: bool,
}

/// Everything a subcommand reads from the document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub preset: String,
    /// When set, replaces the simulation, observation and training seeds by
    /// `seed`, `seed + 1` and `seed + 2`.
    #[serde(default)]
    pub seed: Option<u64>,
    pub sim: SimSpec,
    pub observation: ObservationSpec,
    pub fit: FitSpec,
    #[serde(default)]
    pub input: InputSpec,
    #[serde(default)]
    pub predict: PredictSpec,
    #[serde(default)]
    pub portrait: PortraitSpec,
    #[serde(default)]
    pub bench: TimingSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    #[serde(flatten)]
    pub settings: Settings,
}

impl RunConfig {
    pub fn output_dir(&self) -> PathBuf {
        self.settings
            .output
            .dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
    }

    /// Latent dimension of the model.
    pub fn latent_dim(&self) -> usize {
        self.settings.fit.model.m.unwrap_or_else(|| self.settings.sim.system.latent_dim())
    }

    pub fn recipe(&self) -> Recipe {
        let s = &self.settings;
        Recipe {
            sim: s.sim.clone(),
            observation: s.observation.clone(),
            fit: s.fit.clone(),
            m: self.latent_dim(),
        }
    }
}

/// Command-line values layered over the document.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// `key.path=value` pairs; the value is read as TOML, or as a bare string.
    pub set: Vec<String>,
    pub inputs: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub binary: bool,
    pub timing: bool,
}

fn config_error(key: impl Into<String>, message: impl Into<String>) -> Failure {
    Failure::Config {
        key: Some(key.into()),
        message: message.into(),
    }
}

fn parse_value(text: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_owned()))
}

fn insert_path(table: &mut Table, path: &str, value: Value) -> Result<(), Failure> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_error(path, "empty key in path"));
    }
    let mut node = table;
    for (i, key) in keys[..keys.len() - 1].iter().enumerate() {
        let entry = node
            .entry(key.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| config_error(keys[..=i].join("."), "is not a table"))?;
    }
    node.insert(keys[keys.len() - 1].to_owned(), value);
    Ok(())
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn default_system(kind: &str) -> Option<System> {
    match kind {
        "ring" => Some(System::ring()),
        "fhn" => Some(System::fhn()),
        "lorenz" => Some(System::lorenz()),
        "switching-lds" => Some(System::switching_lds()),
        "bistable" => Some(System::bistable()),
        _ => None,
    }
}

fn preset_for_kind(kind: &str) -> Option<&'static str> {
    match kind {
        "ring" => Some("ring"),
        "fhn" => Some("fhn"),
        "lorenz" => Some("lorenz"),
        "switching-lds" => Some("lds"),
        _ => None,
    }
}

fn to_table<T: Serialize>(value: &T) -> Table {
    Table::try_from(value).expect("settings serialize to TOML")
}

/// Builds and validates the configuration for `command`.
pub fn parse_config(command: Command, document: Option<&str>, overrides: &Overrides) -> Result<RunConfig, Failure> {
    let mut doc: Table = match document {
        Some(text) => toml::from_str(text).map_err(|e| Failure::Config {
            key: None,
            message: format!("invalid configuration document: {}", e.message()),
        })?,
        None => Table::new(),
    };
    for pair in &overrides.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| config_error(pair.clone(), "`--set` expects KEY=VALUE"))?;
        insert_path(&mut doc, key.trim(), parse_value(value.trim()))?;
    }
    if let Some(p) = &overrides.preset {
        doc.insert("preset".into(), Value::String(p.clone()));
    }
    if let Some(seed) = overrides.seed {
        let seed = i64::try_from(seed).map_err(|_| config_error("seed", "must be below 2^63"))?;
        doc.insert("seed".into(), Value::Integer(seed));
    }
    let path_value = |p: &Path| Value::String(p.to_string_lossy().into_owned());
    if let Some(out) = &overrides.out {
        insert_path(&mut doc, "output.dir", path_value(out))?;
    }
    if !overrides.inputs.is_empty() {
        let list = overrides.inputs.iter().map(|p| path_value(p)).collect();
        insert_path(&mut doc, "input.trajectories", Value::Array(list))?;
    }
    if let Some(c) = &overrides.checkpoint {
        insert_path(&mut doc, "input.checkpoint", path_value(c))?;
    }
    if overrides.binary {
        insert_path(&mut doc, "output.binary", Value::Boolean(true))?;
    }
    if overrides.timing {
        insert_path(&mut doc, "output.timing", Value::Boolean(true))?;
    }

    let doc_kind = doc
        .get("sim")
        .and_then(|s| s.get("system"))
        .and_then(|s| s.get("kind"))
        .and_then(Value::as_str)
        .map(str::to_owned);
    let preset = match doc.get("preset") {
        Some(Value::String(p)) => p.clone(),
        Some(_) => return Err(config_error("preset", "must be a string")),
        None => doc_kind
            .as_deref()
            .and_then(preset_for_kind)
            .unwrap_or(command.default_preset())
            .to_owned(),
    };
    let recipe = protocols::preset(&preset).map_err(|e| config_error("preset", e.to_string()))?;
    let mut base = Table::new();
    base.insert("preset".into(), Value::String(preset));
    base.insert("sim".into(), Value::Table(to_table(&recipe.sim)));
    base.insert("observation".into(), Value::Table(to_table(&recipe.observation)));
    let mut fit = recipe.fit.clone();
    if let Some(kind) = &doc_kind {
        if kind != recipe.sim.system.name() {
            let system = default_system(kind)
                .ok_or_else(|| config_error("sim.system.kind", format!("unknown system {kind:?}")))?;
            insert_path(&mut base, "sim.system", Value::Table(to_table(&system)))?;
            fit.model.m = None;
        } else {
            fit.model.m = Some(recipe.m);
        }
    } else {
        fit.model.m = Some(recipe.m);
    }
    base.insert("fit".into(), Value::Table(to_table(&fit)));
    merge(&mut base, doc);

    let mut settings: Settings = serde_path_to_error::deserialize(Value::Table(base)).map_err(|e| {
        let path = e.path().to_string();
        Failure::Config {
            key: (path != ".").then_some(path),
            message: e.into_inner().to_string(),
        }
    })?;
    if settings.output.dir.is_none() {
        settings.output.dir = Some(
            std::env::var_os(OUTPUT_ENV)
                .filter(|v| !v.is_empty())
                .map_or_else(|| PathBuf::from(DEFAULT_OUTPUT), PathBuf::from),
        );
    }
    if let Some(seed) = settings.seed {
        settings.sim.seed = seed;
        settings.observation.seed = seed.wrapping_add(1);
        settings.fit.train.seed = seed.wrapping_add(2);
    }
    let config = RunConfig { command, settings };
    validate(&config)?;
    Ok(config)
}

fn validate(config: &RunConfig) -> Result<(), Failure> {
    let s = &config.settings;
    let core = |key: &str, r: vjf_core::Result<()>| r.map_err(|e| config_error(key, e.to_string()));
    if s.observation.n == 0 {
        return Err(config_error("observation.n", "`n` must be at least 1, got 0"));
    }
    if !(s.observation.gain > 0.0) || !(s.observation.noise_var > 0.0) || !(s.observation.target_rate > 0.0) {
        return Err(config_error("observation", "`gain`, `noise_var` and `target_rate` must be positive"));
    }
    core("sim", s.sim.validate())?;
    core("fit", s.fit.validate())?;
    if config.latent_dim() == 0 {
        return Err(config_error("fit.model.m", "`m` must be at least 1"));
    }
    if s.predict.horizon == 0 || s.predict.trials == 0 {
        return Err(config_error("predict", "`horizon` and `trials` must be at least 1"));
    }
    if let Some(t) = s.predict.train_steps {
        if t == 0 || t >= s.sim.steps {
            return Err(config_error(
                "predict.train_steps",
                format!("must lie between 1 and sim.steps - 1 = {}, got {t}", s.sim.steps - 1),
            ));
        }
    }
    if s.portrait.resolution < 2 {
        return Err(config_error("portrait.resolution", "must be at least 2"));
    }
    if !(s.portrait.margin >= 0.0) {
        return Err(config_error("portrait.margin", "must be non-negative"));
    }
    if !(s.portrait.fixed_points.tol > 0.0) {
        return Err(config_error("portrait.fixed_points.tol", "must be positive"));
    }
    if let Some(b) = &s.portrait.bounds {
        if b.len() != config.latent_dim() {
            return Err(config_error(
                "portrait.bounds",
                format!("needs one interval per latent dimension ({}), got {}", config.latent_dim(), b.len()),
            ));
        }
        if b.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(config_error("portrait.bounds", "every interval needs lo < hi"));
        }
    }
    if s.bench.n == 0 || s.bench.m == 0 || s.bench.q == 0 || s.bench.r == 0 {
        return Err(config_error("bench", "`n`, `m`, `q` and `r` must be at least 1"));
    }
    for (i, p) in s.input.trajectories.iter().enumerate() {
        if !p.is_file() {
            return Err(config_error(format!("input.trajectories[{i}]"), format!("{} does not exist", p.display())));
        }
    }
    if let Some(p) = &s.input.checkpoint {
        if !p.is_file() {
            return Err(config_error("input.checkpoint", format!("{} does not exist", p.display())));
        }
    }
    Ok(())
}
