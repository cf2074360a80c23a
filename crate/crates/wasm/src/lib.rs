//! Browser bindings: simulate a system, train on it a pass at a time, then
//! draw the learned velocity field and forecasts. Everything is returned as
//! JSON in the coordinates of the true latent state.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use vjf_core::analysis::{default_seeds, find_fixed_points, velocity_grid, AffineMap, FixedPointConfig};
use vjf_core::experiment::{aligned_rmse, generate, stacked_means, Trainer};
use vjf_core::filter::{predict_rollout, FilterState};
use vjf_core::numeric::DiagGaussian;
use vjf_core::protocols::preset;
use vjf_core::simulate::Trajectory;
use vjf_core::{Error, Result};

type Point = [f64; 2];

fn xy(v: &[f64]) -> Point {
    [v[0], v.get(1).copied().unwrap_or(0.0)]
}

fn rows_xy(rows: impl Iterator<Item = Vec<f64>>) -> Vec<Point> {
    rows.map(|r| xy(&r)).collect()
}

#[derive(Serialize)]
struct Truth {
    dt: f64,
    dims: usize,
    sequences: Vec<Vec<Point>>,
}

#[derive(Serialize)]
struct Progress {
    pass: u64,
    objective: f64,
    rmse: f64,
    /// Aligned posterior means of every sequence.
    means: Vec<Vec<Point>>,
}

#[derive(Serialize)]
struct Arrow {
    at: Point,
    v: Point,
}

#[derive(Serialize)]
struct Fixed {
    at: Point,
    class: vjf_core::analysis::Stability,
}

#[derive(Serialize)]
struct Portrait {
    arrows: Vec<Arrow>,
    fixed_points: Vec<Fixed>,
}

#[derive(Serialize)]
struct Forecast {
    start: Point,
    rollouts: Vec<Vec<Point>>,
}

/// Simulated data and a model trained on it.
pub struct Session {
    data: Vec<Trajectory>,
    trainer: Trainer,
    posteriors: Vec<Vec<DiagGaussian>>,
    map: Option<AffineMap>,
    rng: ChaCha8Rng,
}

impl Session {
    pub fn new(preset_name: &str, seed: u64, sequences: usize, steps: usize) -> Result<Self> {
        let mut recipe = preset(preset_name)?;
        recipe.sim.n_sequences = sequences;
        recipe.sim.steps = steps;
        recipe.sim.seed = seed;
        recipe.observation.seed = seed.wrapping_add(1);
        recipe.fit.train.seed = seed.wrapping_add(2);
        let data = generate(&recipe.sim, &recipe.observation)?.trajectories;
        let trainer = Trainer::new(&data, recipe.m, recipe.observation.kind, &recipe.fit)?;
        Ok(Self {
            data,
            trainer,
            posteriors: Vec::new(),
            map: None,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(9)),
        })
    }

    pub fn truth_json(&self) -> String {
        let truth = Truth {
            dt: self.data[0].dt,
            dims: self.data[0].latents.ncols(),
            sequences: self
                .data
                .iter()
                .map(|t| rows_xy(t.latents.row_iter().map(|r| r.iter().copied().collect())))
                .collect(),
        };
        serde_json::to_string(&truth).expect("serializes")
    }

    fn map(&self) -> Result<&AffineMap> {
        self.map
            .as_ref()
            .ok_or_else(|| Error::Domain("train at least one pass first".into()))
    }

    pub fn train_json(&mut self, passes: usize) -> Result<String> {
        let mut objective = 0.0;
        for _ in 0..passes.max(1) {
            let (post, diag) = self.trainer.pass(&self.data)?;
            objective = diag.iter().map(|d| d.objective).sum::<f64>() / diag.len().max(1) as f64;
            self.posteriors = post;
        }
        let (map, rmse) = aligned_rmse(&self.posteriors, &self.data)?;
        let means = self
            .posteriors
            .iter()
            .map(|seq| seq.iter().map(|q| xy(map.apply_point(&q.mean).as_slice())).collect())
            .collect();
        self.map = Some(map);
        let progress = Progress {
            pass: self.trainer.filter.passes(),
            objective,
            rmse,
            means,
        };
        Ok(serde_json::to_string(&progress).expect("serializes"))
    }

    /// Velocity field and fixed points of a two-dimensional model.
    pub fn portrait_json(&self, resolution: usize) -> Result<String> {
        let map = self.map()?;
        let dynamics = &self.trainer.filter.bundle.dynamics;
        if dynamics.latent_dim() != 2 {
            return Err(Error::Domain("the portrait needs a two-dimensional latent space".into()));
        }
        let means = stacked_means(&self.posteriors);
        let bounds: Vec<(f64, f64)> = (0..2)
            .map(|j| {
                let (lo, hi) = (means.column(j).min(), means.column(j).max());
                let pad = 0.15 * (hi - lo) + 1e-3;
                (lo - pad, hi + pad)
            })
            .collect();
        let grid = velocity_grid(dynamics, &bounds, &[resolution, resolution])?;
        let arrows = grid
            .points
            .iter()
            .zip(&grid.velocities)
            .map(|(x, v)| Arrow {
                at: xy(map.apply_point(x).as_slice()),
                v: xy((&map.linear * v).as_slice()),
            })
            .collect();
        let points: Vec<DVector<f64>> = means.row_iter().map(|r| r.transpose()).collect();
        let seeds = default_seeds(&bounds, &[12, 12], &points)?;
        let fixed_points = find_fixed_points(dynamics, &seeds, &FixedPointConfig::default())?
            .into_iter()
            .map(|fp| Fixed {
                at: xy(map.apply_point(&DVector::from_vec(fp.location)).as_slice()),
                class: fp.stability,
            })
            .collect();
        Ok(serde_json::to_string(&Portrait { arrows, fixed_points }).expect("serializes"))
    }

    /// Sampled futures of the first sequence from its last filtered state.
    pub fn forecast_json(&mut self, horizon: usize, trials: usize) -> Result<String> {
        let map = self.map()?.clone();
        let last = self.posteriors[0].last().cloned().expect("sequences are non-empty");
        let start = xy(map.apply_point(&last.mean).as_slice());
        let state = FilterState {
            posterior: last,
            step_index: self.posteriors[0].len() as u64,
        };
        let roll = predict_rollout(&state, &self.trainer.filter.bundle, None, horizon, trials, &mut self.rng)?;
        let rollouts = roll
            .latents
            .iter()
            .map(|x| rows_xy(map.apply(x).row_iter().map(|r| r.iter().copied().collect())))
            .collect();
        Ok(serde_json::to_string(&Forecast { start, rollouts }).expect("serializes"))
    }
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(preset: &str, seed: u32, sequences: u32, steps: u32) -> std::result::Result<Demo, JsError> {
        Session::new(preset, seed.into(), sequences as usize, steps as usize)
            .map(Demo)
            .map_err(js)
    }

    pub fn truth(&self) -> String {
        self.0.truth_json()
    }

    pub fn train(&mut self, passes: u32) -> std::result::Result<String, JsError> {
        self.0.train_json(passes as usize).map_err(js)
    }

    pub fn portrait(&self, resolution: u32) -> std::result::Result<String, JsError> {
        self.0.portrait_json(resolution as usize).map_err(js)
    }

    pub fn forecast(&mut self, horizon: u32, trials: u32) -> std::result::Result<String, JsError> {
        self.0.forecast_json(horizon as usize, trials as usize).map_err(js)
    }
}
