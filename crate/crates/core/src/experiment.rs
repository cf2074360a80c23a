//! Simulate, observe, fit: the end-to-end recipe shared by the command line,
//! the browser demo and the acceptance runs.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{affine_align, AffineMap};
use crate::error::{Error, Result};
use crate::filter::{init_loading_fa, Dims, FilterState, ModelBundle, OnlineFilter, SeqRef, StepDiagnostics, TrainConfig};
use crate::generative::{ObsKind, ObservationParams};
use crate::numeric::DiagGaussian;
use crate::recognition::Activation;
use crate::simulate::{generate_observations, random_loading, simulate, SimSpec, Trajectory, MAX_SPIKE_RATE};

/// How simulated latents are turned into observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationSpec {
    pub n: usize,
    pub kind: ObsKind,
    /// Row norm of the random loading.
    pub gain: f64,
    /// Gaussian channel noise variance.
    pub noise_var: f64,
    /// Upper bound on the mean spike probability per bin.
    pub target_rate: f64,
    pub seed: u64,
}

impl Default for ObservationSpec {
    fn default() -> Self {
        Self {
            n: 50,
            kind: ObsKind::Poisson,
            gain: 10.0,
            noise_var: 0.01,
            target_rate: MAX_SPIKE_RATE,
            seed: 1,
        }
    }
}

/// Model sizes and initialization choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub m: Option<usize>,
    pub q: usize,
    pub r: usize,
    pub activation: Activation,
    /// Half-width of the box the RBF centers are first drawn in.
    pub center_box: f64,
    /// Initialize the loading by factor analysis of the observations.
    pub fa_init: bool,
    /// Move the RBF centers onto the posterior means after the first pass.
    pub reseed_centers: bool,
    /// Multiplies the basis width chosen when centers are reseeded.
    pub width_scale: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            m: None,
            q: 100,
            r: 20,
            activation: Activation::Tanh,
            center_box: 2.0,
            fa_init: true,
            reseed_centers: true,
            width_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSpec {
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// Passes over the whole sequence set.
    pub passes: usize,
}

impl Default for FitSpec {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            passes: 1,
        }
    }
}

impl FitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 {
            return Err(Error::Config("`passes` must be at least 1".into()));
        }
        if !(self.model.width_scale > 0.0 && self.model.width_scale.is_finite()) {
            return Err(Error::Config(format!("`width_scale` must be positive, got {}", self.model.width_scale)));
        }
        if self.model.q == 0 || self.model.r == 0 || self.model.m == Some(0) {
            return Err(Error::Config("`q`, `r` and `m` must be at least 1".into()));
        }
        self.train.validate()
    }
}

/// Simulated trajectories with observations filled in, and the map used.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub observation: ObservationParams,
}

impl Dataset {
    pub fn sequences(&self) -> Vec<SeqRef<'_>> {
        self.trajectories.iter().map(Trajectory::as_seq).collect()
    }
}

pub fn stack_rows(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        out.view_mut((at, 0), b.shape()).copy_from(*b);
        at += b.nrows();
    }
    out
}

/// Simulates `sim` and draws observations for every sequence. For spikes the
/// bias is calibrated once on all latents together.
pub fn generate(sim: &SimSpec, obs: &ObservationSpec) -> Result<Dataset> {
    let mut trajectories = simulate(sim)?;
    let m = sim.system.latent_dim();
    if obs.n == 0 {
        return Err(Error::Config("observation `n` must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(obs.seed);
    let loading = random_loading(obs.n, m, obs.gain, &mut rng);
    let base = ObservationParams::new(loading, DVector::zeros(obs.n), obs.kind, obs.noise_var)?;
    let all = stack_rows(&trajectories.iter().map(|t| &t.latents).collect::<Vec<_>>());
    let (_, used) = generate_observations(&all, &base, obs.target_rate, &mut rng)?;
    for tr in trajectories.iter_mut() {
        tr.observations = generate_observations(&tr.latents, &used, obs.target_rate, &mut rng)?.0;
    }
    Ok(Dataset {
        trajectories,
        observation: used,
    })
}

/// Result of [`fit`]: the trained filter and the last pass's posteriors.
pub struct Fit {
    pub filter: OnlineFilter,
    pub posteriors: Vec<Vec<DiagGaussian>>,
    /// Diagnostics of every pass, concatenated.
    pub diagnostics: Vec<StepDiagnostics>,
}

impl Fit {
    /// Final posterior of each sequence.
    pub fn final_states(&self) -> Vec<FilterState> {
        self.posteriors
            .iter()
            .map(|p| FilterState {
                posterior: p.last().cloned().unwrap_or_else(|| DiagGaussian::standard(self.filter.bundle.dims().m)),
                step_index: p.len() as u64,
            })
            .collect()
    }

    /// Posterior means of all sequences stacked, `sum(T_k) x m`.
    pub fn stacked_means(&self) -> DMatrix<f64> {
        stacked_means(&self.posteriors)
    }
}

pub fn stacked_means(posteriors: &[Vec<DiagGaussian>]) -> DMatrix<f64> {
    let m = posteriors.iter().flatten().next().map_or(0, DiagGaussian::dim);
    let rows: Vec<&DiagGaussian> = posteriors.iter().flatten().collect();
    DMatrix::from_fn(rows.len(), m, |i, j| rows[i].mean[j])
}

/// Builds the initial bundle for `trajectories`, with the loading taken from
/// factor analysis when requested.
pub fn initial_bundle(trajectories: &[Trajectory], m: usize, kind: ObsKind, spec: &FitSpec, seed: u64) -> Result<ModelBundle> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::Config("no sequences to fit".into()))?;
    let dims = Dims {
        n: first.observations.ncols(),
        m,
        p: first.inputs.ncols(),
        q: spec.model.q,
        r: spec.model.r,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bundle = ModelBundle::init(dims, kind, spec.model.activation, spec.model.center_box, &mut rng)?;
    if spec.model.fa_init {
        let ys = stack_rows(&trajectories.iter().map(|t| &t.observations).collect::<Vec<_>>());
        if ys.nrows() >= 10 * m && m <= dims.n {
            let fa = init_loading_fa(&ys, m, kind, &mut rng)?;
            bundle.observation.loading = fa.loading;
            bundle.observation.bias = fa.bias;
        }
    }
    Ok(bundle)
}

/// Trains a fresh model on `trajectories` for `spec.passes` passes.
pub fn fit(trajectories: &[Trajectory], m: usize, kind: ObsKind, spec: &FitSpec) -> Result<Fit> {
    fit_with(trajectories, m, kind, spec, |_, _, _| {})
}

/// [`fit`] with a callback after every pass: `(pass, posteriors, diagnostics)`.
pub fn fit_with(
    trajectories: &[Trajectory],
    m: usize,
    kind: ObsKind,
    spec: &FitSpec,
    mut on_pass: impl FnMut(usize, &[Vec<DiagGaussian>], &[StepDiagnostics]),
) -> Result<Fit> {
    let mut trainer = Trainer::new(trajectories, m, kind, spec)?;
    let mut diagnostics = Vec::new();
    let mut posteriors = Vec::new();
    for pass in 0..spec.passes {
        let (post, diag) = trainer.pass(trajectories)?;
        on_pass(pass, &post, &diag);
        diagnostics.extend(diag);
        posteriors = post;
    }
    Ok(Fit {
        filter: trainer.filter,
        posteriors,
        diagnostics,
    })
}

/// A fresh model trained one pass at a time, for callers that interleave
/// passes with other work.
pub struct Trainer {
    pub filter: OnlineFilter,
    model: ModelSpec,
}

impl Trainer {
    pub fn new(trajectories: &[Trajectory], m: usize, kind: ObsKind, spec: &FitSpec) -> Result<Self> {
        spec.validate()?;
        let bundle = initial_bundle(trajectories, m, kind, spec, spec.train.seed)?;
        Ok(Self {
            filter: OnlineFilter::new(bundle, spec.train.clone())?,
            model: spec.model.clone(),
        })
    }

    /// One pass over `trajectories`, which should be the ones given to [`Trainer::new`].
    pub fn pass(&mut self, trajectories: &[Trajectory]) -> Result<(Vec<Vec<DiagGaussian>>, Vec<StepDiagnostics>)> {
        let seqs: Vec<SeqRef<'_>> = trajectories.iter().map(Trajectory::as_seq).collect();
        let first = self.filter.passes() == 0;
        let (post, diag) = self.filter.run_pass(&seqs, None)?;
        if first && self.model.reseed_centers {
            let points: Vec<DVector<f64>> = post.iter().flatten().map(|q| q.mean.clone()).collect();
            self.filter.reseed_centers(&points)?;
            let shift = 2.0 * self.model.width_scale.ln();
            self.filter.bundle.dynamics.log_inverse_widths.add_scalar_mut(-shift);
        }
        Ok((post, diag))
    }
}

/// Affine map from posterior means onto the true latents, and the RMSE per
/// coordinate after mapping.
pub fn aligned_rmse(posteriors: &[Vec<DiagGaussian>], trajectories: &[Trajectory]) -> Result<(AffineMap, f64)> {
    let means = stacked_means(posteriors);
    let truth = stack_rows(&trajectories.iter().map(|t| &t.latents).collect::<Vec<_>>());
    let map = affine_align(&means, &truth)?;
    Ok((map.clone(), map.residual_rms))
}
