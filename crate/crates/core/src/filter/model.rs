use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::generative::{DynamicsParams, ObsKind, ObservationParams};
use crate::recognition::{init_recognition, Activation, RecognitionParams};

/// Model dimensions: observations, latents, inputs, hidden units, basis functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub q: usize,
    pub r: usize,
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        for (name, d) in [("n", self.n), ("m", self.m), ("p", self.p), ("q", self.q), ("r", self.r)] {
            if d == 0 {
                return Err(Error::Config(format!("dimension `{name}` must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Named slices of the flat parameter vector, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamBlock {
    Loading,
    Bias,
    ObsNoise,
    DynWeights,
    Centers,
    Widths,
    InputMap,
    StateNoise,
    HiddenWeights,
    HiddenBias,
    OutputWeights,
    OutputBias,
}

impl ParamBlock {
    pub const ALL: [ParamBlock; 12] = [
        ParamBlock::Loading,
        ParamBlock::Bias,
        ParamBlock::ObsNoise,
        ParamBlock::DynWeights,
        ParamBlock::Centers,
        ParamBlock::Widths,
        ParamBlock::InputMap,
        ParamBlock::StateNoise,
        ParamBlock::HiddenWeights,
        ParamBlock::HiddenBias,
        ParamBlock::OutputWeights,
        ParamBlock::OutputBias,
    ];

    pub const OBSERVATION: [ParamBlock; 3] = [ParamBlock::Loading, ParamBlock::Bias, ParamBlock::ObsNoise];

    pub const RECOGNITION: [ParamBlock; 4] = [
        ParamBlock::HiddenWeights,
        ParamBlock::HiddenBias,
        ParamBlock::OutputWeights,
        ParamBlock::OutputBias,
    ];
}

/// Every learnable parameter: observation map, dynamics and recognition network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub observation: ObservationParams,
    pub dynamics: DynamicsParams,
    pub recognition: RecognitionParams,
}

impl ModelBundle {
    pub fn zeros(dims: Dims, kind: ObsKind, activation: Activation) -> Self {
        let Dims { n, m, p, q, r } = dims;
        Self {
            observation: ObservationParams::zeros(n, m, kind),
            dynamics: DynamicsParams::zeros(m, r, p),
            recognition: RecognitionParams::zeros(n, m, p, q, activation),
        }
    }

    /// Random initialization: unit-norm random loading, zero bias, RBF centers
    /// in `[-center_box, center_box]^m`, fan-in scaled recognition weights.
    pub fn init<R: Rng + ?Sized>(
        dims: Dims,
        kind: ObsKind,
        activation: Activation,
        center_box: f64,
        rng: &mut R,
    ) -> Result<Self> {
        dims.validate()?;
        let Dims { n, m, p, q, r } = dims;
        let mut loading = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        crate::generative::normalize_loading_in_place(&mut loading)?;
        Ok(Self {
            observation: ObservationParams {
                loading,
                bias: DVector::zeros(n),
                kind,
                log_obs_noise_var: 0.0,
            },
            dynamics: DynamicsParams::init(m, r, p, center_box, rng)?,
            recognition: init_recognition(n, m, p, q, activation, rng)?,
        })
    }

    pub fn dims(&self) -> Dims {
        Dims {
            n: self.observation.obs_dim(),
            m: self.dynamics.latent_dim(),
            p: self.dynamics.input_dim(),
            q: self.recognition.hidden_dim(),
            r: self.dynamics.n_basis(),
        }
    }

    /// Checks that the three parts agree on every dimension.
    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        d.validate()?;
        let ok = self.observation.latent_dim() == d.m
            && self.observation.bias.len() == d.n
            && self.dynamics.centers.shape() == (d.m, d.r)
            && self.dynamics.log_inverse_widths.len() == d.r
            && self.dynamics.input_map.nrows() == d.m
            && self.recognition.latent_dim() == d.m
            && self.recognition.output_weights.shape() == (2 * d.m, d.q)
            && self.recognition.input_len() == d.n + d.p + 2 * d.m;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent model dimensions {d:?}")))
        }
    }

    /// A zero-valued bundle of the same shape, used to accumulate gradients.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims(), self.observation.kind, self.recognition.activation)
    }

    pub fn block_len(&self, block: ParamBlock) -> usize {
        let Dims { n, m, p, q, r } = self.dims();
        match block {
            ParamBlock::Loading => n * m,
            ParamBlock::Bias => n,
            ParamBlock::ObsNoise | ParamBlock::StateNoise => 1,
            ParamBlock::DynWeights | ParamBlock::Centers => m * r,
            ParamBlock::Widths => r,
            ParamBlock::InputMap => m * p,
            ParamBlock::HiddenWeights => q * (n + p + 2 * m),
            ParamBlock::HiddenBias => q,
            ParamBlock::OutputWeights => 2 * m * q,
            ParamBlock::OutputBias => 2 * m,
        }
    }

    /// Index range of each block within [`ModelBundle::to_flat`].
    pub fn layout(&self) -> Vec<(ParamBlock, Range<usize>)> {
        let mut start = 0;
        ParamBlock::ALL
            .iter()
            .map(|&b| {
                let len = self.block_len(b);
                let range = start..start + len;
                start += len;
                (b, range)
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        ParamBlock::ALL.iter().map(|&b| self.block_len(b)).sum()
    }

    pub fn block(&self, block: ParamBlock) -> &[f64] {
        match block {
            ParamBlock::Loading => self.observation.loading.as_slice(),
            ParamBlock::Bias => self.observation.bias.as_slice(),
            ParamBlock::ObsNoise => std::slice::from_ref(&self.observation.log_obs_noise_var),
            ParamBlock::DynWeights => self.dynamics.weights.as_slice(),
            ParamBlock::Centers => self.dynamics.centers.as_slice(),
            ParamBlock::Widths => self.dynamics.log_inverse_widths.as_slice(),
            ParamBlock::InputMap => self.dynamics.input_map.as_slice(),
            ParamBlock::StateNoise => std::slice::from_ref(&self.dynamics.log_state_noise_var),
            ParamBlock::HiddenWeights => self.recognition.hidden_weights.as_slice(),
            ParamBlock::HiddenBias => self.recognition.hidden_bias.as_slice(),
            ParamBlock::OutputWeights => self.recognition.output_weights.as_slice(),
            ParamBlock::OutputBias => self.recognition.output_bias.as_slice(),
        }
    }

    pub fn block_mut(&mut self, block: ParamBlock) -> &mut [f64] {
        match block {
            ParamBlock::Loading => self.observation.loading.as_mut_slice(),
            ParamBlock::Bias => self.observation.bias.as_mut_slice(),
            ParamBlock::ObsNoise => std::slice::from_mut(&mut self.observation.log_obs_noise_var),
            ParamBlock::DynWeights => self.dynamics.weights.as_mut_slice(),
            ParamBlock::Centers => self.dynamics.centers.as_mut_slice(),
            ParamBlock::Widths => self.dynamics.log_inverse_widths.as_mut_slice(),
            ParamBlock::InputMap => self.dynamics.input_map.as_mut_slice(),
            ParamBlock::StateNoise => std::slice::from_mut(&mut self.dynamics.log_state_noise_var),
            ParamBlock::HiddenWeights => self.recognition.hidden_weights.as_mut_slice(),
            ParamBlock::HiddenBias => self.recognition.hidden_bias.as_mut_slice(),
            ParamBlock::OutputWeights => self.recognition.output_weights.as_mut_slice(),
            ParamBlock::OutputBias => self.recognition.output_bias.as_mut_slice(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for b in ParamBlock::ALL {
            out.extend_from_slice(self.block(b));
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        crate::error::check_len("flat parameter vector", self.n_params(), flat.len())?;
        let mut start = 0;
        for b in ParamBlock::ALL {
            let dst = self.block_mut(b);
            let len = dst.len();
            dst.copy_from_slice(&flat[start..start + len]);
            start += len;
        }
        Ok(())
    }

    /// `self += scale * other`, block by block.
    pub fn axpy(&mut self, scale: f64, other: &ModelBundle) {
        for b in ParamBlock::ALL {
            for (d, s) in self.block_mut(b).iter_mut().zip(other.block(b)) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, scale: f64) {
        for b in ParamBlock::ALL {
            self.block_mut(b).iter_mut().for_each(|v| *v *= scale);
        }
    }

    pub fn is_finite(&self) -> bool {
        ParamBlock::ALL
            .iter()
            .all(|&b| self.block(b).iter().all(|v| v.is_finite()))
    }
}
