//! Recognition network: a one-hidden-layer perceptron mapping the new
//! observation, the previous input and the previous posterior to the next
//! diagonal-Gaussian posterior.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numeric::DiagGaussian;

/// Added to every output variance so the entropy stays bounded.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Relu => a.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }
}

/// Weights of the recognition network. Also the container for its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct RecognitionParams {
    /// `q x (n + p + 2m)`.
    pub hidden_weights: DMatrix<f64>,
    pub hidden_bias: DVector<f64>,
    /// `2m x q`; the first `m` rows produce the mean, the rest the log-variance.
    pub output_weights: DMatrix<f64>,
    pub output_bias: DVector<f64>,
    pub activation: Activation,
}

impl RecognitionParams {
    pub fn zeros(n: usize, m: usize, p: usize, q: usize, activation: Activation) -> Self {
        Self {
            hidden_weights: DMatrix::zeros(q, n + p + 2 * m),
            hidden_bias: DVector::zeros(q),
            output_weights: DMatrix::zeros(2 * m, q),
            output_bias: DVector::zeros(2 * m),
            activation,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.output_bias.len() / 2
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_bias.len()
    }

    pub fn input_len(&self) -> usize {
        self.hidden_weights.ncols()
    }
}

/// Fan-in scaled Gaussian weights, zero biases.
pub fn init_recognition<R: Rng + ?Sized>(
    n: usize,
    m: usize,
    p: usize,
    q: usize,
    activation: Activation,
    rng: &mut R,
) -> Result<RecognitionParams> {
    for (name, d) in [("n", n), ("m", m), ("p", p), ("q", q)] {
        if d == 0 {
            return Err(Error::Domain(format!("recognition dimension {name} must be at least 1")));
        }
    }
    let mut params = RecognitionParams::zeros(n, m, p, q, activation);
    let fan_in = (n + p + 2 * m) as f64;
    let hidden = Normal::new(0.0, 1.0 / fan_in.sqrt()).expect("positive scale");
    params.hidden_weights.iter_mut().for_each(|w| *w = hidden.sample(rng));
    let output = Normal::new(0.0, 1.0 / (q as f64).sqrt()).expect("positive scale");
    params.output_weights.iter_mut().for_each(|w| *w = output.sample(rng));
    Ok(params)
}

/// Forward-pass record used by the reverse pass.
#[derive(Debug, Clone)]
pub(crate) struct RecognitionTape {
    pub input: DVector<f64>,
    pub pre: DVector<f64>,
    pub hidden: DVector<f64>,
    /// `exp` of the log-variance head, before the floor is added.
    pub raw_variance: DVector<f64>,
}

fn encode_input(
    y: &DVector<f64>,
    u_prev: &DVector<f64>,
    q_prev: &DiagGaussian,
    params: &RecognitionParams,
) -> Result<DVector<f64>> {
    let m = params.latent_dim();
    check_len("recognition previous posterior", m, q_prev.dim())?;
    check_len(
        "recognition input length",
        params.input_len(),
        y.len() + u_prev.len() + 2 * m,
    )?;
    let mut z = DVector::zeros(params.input_len());
    let mut k = 0;
    for v in y.iter().chain(u_prev.iter()).chain(q_prev.mean.iter()) {
        z[k] = *v;
        k += 1;
    }
    for s in q_prev.variance.iter() {
        z[k] = s.ln();
        k += 1;
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            component: "recognition input",
        });
    }
    Ok(z)
}

pub(crate) fn recognize_with_tape(
    y: &DVector<f64>,
    u_prev: &DVector<f64>,
    q_prev: &DiagGaussian,
    params: &RecognitionParams,
) -> Result<(DiagGaussian, RecognitionTape)> {
    let input = encode_input(y, u_prev, q_prev, params)?;
    let pre = &params.hidden_weights * &input + &params.hidden_bias;
    let hidden = pre.map(|a| params.activation.apply(a));
    let out = &params.output_weights * &hidden + &params.output_bias;
    let m = params.latent_dim();
    let mean = out.rows(0, m).into_owned();
    let raw_variance = out.rows(m, m).map(f64::exp);
    let variance = raw_variance.add_scalar(VARIANCE_FLOOR);
    if mean.iter().chain(variance.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            component: "recognition output",
        });
    }
    Ok((
        DiagGaussian { mean, variance },
        RecognitionTape {
            input,
            pre,
            hidden,
            raw_variance,
        },
    ))
}

/// Next posterior `(μ_t, s_t)` from `(y_t, u_{t-1}, μ_{t-1}, s_{t-1})`.
pub fn recognize(
    y: &DVector<f64>,
    u_prev: &DVector<f64>,
    q_prev: &DiagGaussian,
    params: &RecognitionParams,
) -> Result<DiagGaussian> {
    recognize_with_tape(y, u_prev, q_prev, params).map(|(q, _)| q)
}

/// Reverse pass: accumulates into `grad` the parameter gradient of a scalar
/// whose derivatives with respect to the output mean and variance are given.
/// Returns the gradient with respect to the encoded input vector.
pub(crate) fn recognition_backward(
    tape: &RecognitionTape,
    d_mean: &DVector<f64>,
    d_variance: &DVector<f64>,
    params: &RecognitionParams,
    grad: &mut RecognitionParams,
) -> DVector<f64> {
    let m = params.latent_dim();
    let mut d_out = DVector::zeros(2 * m);
    for j in 0..m {
        d_out[j] = d_mean[j];
        d_out[m + j] = d_variance[j] * tape.raw_variance[j];
    }
    grad.output_bias += &d_out;
    grad.output_weights.ger(1.0, &d_out, &tape.hidden, 1.0);
    let mut d_pre = params.output_weights.tr_mul(&d_out);
    for ((d, &a), &h) in d_pre.iter_mut().zip(tape.pre.iter()).zip(tape.hidden.iter()) {
        *d *= params.activation.derivative(a, h);
    }
    grad.hidden_bias += &d_pre;
    grad.hidden_weights.ger(1.0, &d_pre, &tape.input, 1.0);
    params.hidden_weights.tr_mul(&d_pre)
}
