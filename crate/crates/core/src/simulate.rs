//! Ground-truth systems integrated with Euler–Maruyama, and observation
//! generation on top of their latent paths.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::derive_seed;
use crate::generative::{sample_observation, ObsKind, ObservationParams};

/// Upper bound on the mean spike probability per bin.
pub const MAX_SPIKE_RATE: f64 = 0.04;

/// The simulated system and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum System {
    Ring {
        #[serde(default = "one")]
        tau_r: f64,
        #[serde(default = "one")]
        r0: f64,
        #[serde(default = "one")]
        tau_phi: f64,
        /// Magnitude of the per-sequence tangent input; its sign is random.
        #[serde(default = "one")]
        input_magnitude: f64,
        /// Initial radius is drawn uniformly from this interval.
        #[serde(default = "ring_start_radius")]
        start_radius: (f64, f64),
    },
    Fhn {
        #[serde(default = "fhn_a")]
        a: f64,
        #[serde(default = "fhn_b")]
        b: f64,
        #[serde(default = "fhn_c")]
        c: f64,
        #[serde(default = "fhn_i")]
        input: f64,
    },
    Lorenz {
        #[serde(default = "lorenz_sigma")]
        sigma: f64,
        #[serde(default = "lorenz_rho")]
        rho: f64,
        #[serde(default = "lorenz_beta")]
        beta: f64,
        /// Steps integrated and dropped before recording.
        #[serde(default = "lorenz_transient")]
        transient: usize,
    },
    SwitchingLds {
        #[serde(default = "lds_decay")]
        decay: f64,
        /// Rotation angle per step, in radians.
        #[serde(default = "lds_theta")]
        theta: f64,
        #[serde(default = "lds_switch")]
        switch_at: usize,
        /// Norm of the state kick applied at the switch.
        #[serde(default = "one")]
        kick_norm: f64,
        /// Extra rotation added to the second regime.
        #[serde(default)]
        parameter_kick: f64,
    },
    Bistable {
        /// Standard deviation of the per-sequence constant input.
        #[serde(default)]
        input_std: f64,
        #[serde(default = "bistable_start")]
        start_half_width: f64,
    },
}

fn one() -> f64 {
    1.0
}
fn ring_start_radius() -> (f64, f64) {
    (0.2, 2.0)
}
fn fhn_a() -> f64 {
    -0.1
}
fn fhn_b() -> f64 {
    0.01
}
fn fhn_c() -> f64 {
    0.02
}
fn fhn_i() -> f64 {
    0.1
}
fn lorenz_sigma() -> f64 {
    10.0
}
fn lorenz_rho() -> f64 {
    28.0
}
fn lorenz_beta() -> f64 {
    8.0 / 3.0
}
fn lorenz_transient() -> usize {
    500
}
fn lds_decay() -> f64 {
    0.995
}
fn lds_theta() -> f64 {
    0.1
}
fn lds_switch() -> usize {
    2000
}
fn bistable_start() -> f64 {
    0.5
}

impl System {
    pub fn ring() -> Self {
        System::Ring {
            tau_r: 1.0,
            r0: 1.0,
            tau_phi: 1.0,
            input_magnitude: 1.0,
            start_radius: ring_start_radius(),
        }
    }

    pub fn fhn() -> Self {
        System::Fhn {
            a: fhn_a(),
            b: fhn_b(),
            c: fhn_c(),
            input: fhn_i(),
        }
    }

    pub fn lorenz() -> Self {
        System::Lorenz {
            sigma: lorenz_sigma(),
            rho: lorenz_rho(),
            beta: lorenz_beta(),
            transient: lorenz_transient(),
        }
    }

    pub fn switching_lds() -> Self {
        System::SwitchingLds {
            decay: lds_decay(),
            theta: lds_theta(),
            switch_at: lds_switch(),
            kick_norm: 1.0,
            parameter_kick: 0.0,
        }
    }

    pub fn bistable() -> Self {
        System::Bistable {
            input_std: 0.0,
            start_half_width: bistable_start(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            System::Ring { .. } => "ring",
            System::Fhn { .. } => "fhn",
            System::Lorenz { .. } => "lorenz",
            System::SwitchingLds { .. } => "switching-lds",
            System::Bistable { .. } => "bistable",
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            System::Lorenz { .. } => 3,
            _ => 2,
        }
    }

    /// Continuous-time velocity; for the LDS, the one-step increment of the
    /// first regime.
    pub fn velocity(&self, x: &[f64], u: f64) -> Vec<f64> {
        match *self {
            System::Ring { tau_r, r0, tau_phi, .. } => ring_velocity(x[0], x[1], u, tau_r, r0, tau_phi).to_vec(),
            System::Fhn { a, b, c, input } => {
                let (v, w) = (x[0], x[1]);
                vec![v * (a - v) * (v - 1.0) - w + input + u, b * v - c * w]
            }
            System::Lorenz { sigma, rho, beta, .. } => vec![
                sigma * (x[1] - x[0]),
                x[0] * (rho - x[2]) - x[1],
                x[0] * x[1] - beta * x[2],
            ],
            System::SwitchingLds { decay, theta, .. } => {
                let a = spiral(decay, -theta);
                let next = a * Vector2::new(x[0], x[1]);
                vec![next[0] - x[0], next[1] - x[1]]
            }
            System::Bistable { .. } => vec![x[0] - x[0].powi(3) + u, -x[1]],
        }
    }
}

fn ring_velocity(x: f64, y: f64, input: f64, tau_r: f64, r0: f64, tau_phi: f64) -> [f64; 2] {
    let r = x.hypot(y);
    let radial = (r0 - r) / (tau_r * r);
    [radial * x - input * y / tau_phi, radial * y + input * x / tau_phi]
}

/// `decay * R(theta)`, counter-clockwise for positive `theta`.
pub fn spiral(decay: f64, theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c) * decay
}

/// What to simulate, how long, and from which seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub system: System,
    /// Standard deviation of the additive state noise per step.
    pub noise_std: f64,
    pub n_sequences: usize,
    pub steps: usize,
    pub dt: f64,
    pub seed: u64,
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("`dt` must be positive, got {}", self.dt)));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("`noise_std` must be non-negative, got {}", self.noise_std)));
        }
        if self.n_sequences == 0 || self.steps == 0 {
            return Err(Error::Config("`n_sequences` and `steps` must be at least 1".into()));
        }
        match self.system {
            System::Ring { tau_r, tau_phi, start_radius: (lo, hi), .. } => {
                if !(tau_r > 0.0 && tau_phi > 0.0) {
                    return Err(Error::Config("ring time constants must be positive".into()));
                }
                if !(lo > 0.0 && hi >= lo) {
                    return Err(Error::Config(format!(
                        "ring `start_radius` must satisfy 0 < lo <= hi, got ({lo}, {hi})"
                    )));
                }
            }
            System::SwitchingLds { decay, theta, parameter_kick, .. } => {
                for (name, a) in [("regime 1", spiral(decay, -theta)), ("regime 2", spiral(decay, theta + parameter_kick))] {
                    let radius = a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
                    if radius >= 1.0 {
                        return Err(Error::Config(format!(
                            "switching-lds {name} has spectral radius {radius} >= 1"
                        )));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Latents `T x m`, observations `T x n`, inputs `T x p` of one sequence.
/// Row `t` of the inputs drives the step from `t` to `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub latents: DMatrix<f64>,
    pub observations: DMatrix<f64>,
    pub inputs: DMatrix<f64>,
    pub dt: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.latents.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_seq(&self) -> crate::filter::SeqRef<'_> {
        crate::filter::SeqRef::new(&self.observations, &self.inputs)
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Integrates `steps` Euler–Maruyama steps from `x0` with a constant input.
fn integrate(
    system: &System,
    x0: Vec<f64>,
    u: f64,
    spec: &SimSpec,
    skip: usize,
    rng: &mut ChaCha8Rng,
) -> DMatrix<f64> {
    let m = x0.len();
    let mut x = x0;
    let mut out = DMatrix::zeros(spec.steps, m);
    for k in 0..skip + spec.steps {
        if k >= skip {
            for j in 0..m {
                out[(k - skip, j)] = x[j];
            }
        }
        let v = system.velocity(&x, u);
        for j in 0..m {
            x[j] += spec.dt * v[j] + spec.noise_std * normal(rng);
        }
    }
    out
}

fn sequence_rng(spec: &SimSpec, k: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, k as u64))
}

fn trajectory(latents: DMatrix<f64>, inputs: DMatrix<f64>, dt: f64) -> Trajectory {
    let t = latents.nrows();
    Trajectory {
        latents,
        observations: DMatrix::zeros(t, 0),
        inputs,
        dt,
    }
}

/// Ring attractor in Cartesian coordinates. Half the sequences (rounded
/// up) turn counter-clockwise, in shuffled order.
pub fn simulate_ring(spec: &SimSpec) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    let System::Ring { input_magnitude, start_radius: (lo, hi), .. } = spec.system else {
        return Err(Error::Config(format!("expected ring, got {}", spec.system.name())));
    };
    let mut signs: Vec<f64> = (0..spec.n_sequences).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
    signs.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, u64::MAX)));
    Ok((0..spec.n_sequences)
        .map(|k| {
            let mut rng = sequence_rng(spec, k);
            let r = if hi > lo { rng.random_range(lo..hi) } else { lo };
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let u = signs[k] * input_magnitude;
            let x = integrate(&spec.system, vec![r * phase.cos(), r * phase.sin()], u, spec, 0, &mut rng);
            trajectory(x, DMatrix::from_element(spec.steps, 1, u), spec.dt)
        })
        .collect())
}

/// Ring integration from an explicit start; the origin is rejected.
pub fn simulate_ring_from(spec: &SimSpec, start: [f64; 2], input: f64) -> Result<Trajectory> {
    spec.validate()?;
    if !matches!(spec.system, System::Ring { .. }) {
        return Err(Error::Config(format!("expected ring, got {}", spec.system.name())));
    }
    if start[0].hypot(start[1]) == 0.0 {
        return Err(Error::Domain("ring start at r = 0 has no defined phase".into()));
    }
    let mut rng = sequence_rng(spec, 0);
    let x = integrate(&spec.system, start.to_vec(), input, spec, 0, &mut rng);
    Ok(trajectory(x, DMatrix::from_element(spec.steps, 1, input), spec.dt))
}

/// FitzHugh–Nagumo relaxation oscillator with zero external input recorded.
pub fn simulate_fhn(spec: &SimSpec) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    if !matches!(spec.system, System::Fhn { .. }) {
        return Err(Error::Config(format!("expected fhn, got {}", spec.system.name())));
    }
    Ok((0..spec.n_sequences)
        .map(|k| {
            let mut rng = sequence_rng(spec, k);
            let x0 = vec![rng.random_range(-0.4..1.2), rng.random_range(-0.1..0.5)];
            let x = integrate(&spec.system, x0, 0.0, spec, 0, &mut rng);
            trajectory(x, DMatrix::zeros(spec.steps, 1), spec.dt)
        })
        .collect())
}

/// Lorenz system from starts on an evenly spaced lattice, transient dropped.
pub fn simulate_lorenz(spec: &SimSpec) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    let System::Lorenz { transient, .. } = spec.system else {
        return Err(Error::Config(format!("expected lorenz, got {}", spec.system.name())));
    };
    let side = (spec.n_sequences as f64).cbrt().ceil() as usize;
    let lattice = |i: usize, lo: f64, hi: f64| {
        if side == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (side - 1) as f64
        }
    };
    Ok((0..spec.n_sequences)
        .map(|k| {
            let mut rng = sequence_rng(spec, k);
            let (i, j, l) = (k % side, (k / side) % side, k / (side * side));
            let x0 = vec![lattice(i, -15.0, 15.0), lattice(j, -20.0, 20.0), lattice(l, 5.0, 45.0)];
            let x = integrate(&spec.system, x0, 0.0, spec, transient, &mut rng);
            trajectory(x, DMatrix::zeros(spec.steps, 1), spec.dt)
        })
        .collect())
}

/// Spiral-in linear system: clockwise until `switch_at`, then counter-clockwise
/// with a state kick. `dt` is unused; the map is already discrete.
pub fn simulate_switching_lds(spec: &SimSpec) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    let System::SwitchingLds { decay, theta, switch_at, kick_norm, parameter_kick } = spec.system else {
        return Err(Error::Config(format!("expected switching-lds, got {}", spec.system.name())));
    };
    let a1 = spiral(decay, -theta);
    let a2 = spiral(decay, theta + parameter_kick);
    Ok((0..spec.n_sequences)
        .map(|k| {
            let mut rng = sequence_rng(spec, k);
            let mut x = Vector2::new(normal(&mut rng), normal(&mut rng));
            let mut out = DMatrix::zeros(spec.steps, 2);
            for t in 0..spec.steps {
                out[(t, 0)] = x[0];
                out[(t, 1)] = x[1];
                let a = if t + 1 < switch_at { a1 } else { a2 };
                x = a * x + Vector2::new(normal(&mut rng), normal(&mut rng)) * spec.noise_std;
                if t + 1 == switch_at {
                    let dir = rng.random_range(0.0..std::f64::consts::TAU);
                    x += Vector2::new(dir.cos(), dir.sin()) * kick_norm;
                }
            }
            trajectory(out, DMatrix::zeros(spec.steps, 1), spec.dt)
        })
        .collect())
}

/// Double well in `x`, linear decay in `y`; each sequence has a constant input.
pub fn simulate_bistable(spec: &SimSpec) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    let System::Bistable { input_std, start_half_width } = spec.system else {
        return Err(Error::Config(format!("expected bistable, got {}", spec.system.name())));
    };
    Ok((0..spec.n_sequences)
        .map(|k| {
            let mut rng = sequence_rng(spec, k);
            let h = start_half_width;
            let x0 = if h > 0.0 {
                vec![rng.random_range(-h..h), rng.random_range(-h..h)]
            } else {
                vec![0.0, 0.0]
            };
            let u = input_std * normal(&mut rng);
            let x = integrate(&spec.system, x0, u, spec, 0, &mut rng);
            trajectory(x, DMatrix::from_element(spec.steps, 1, u), spec.dt)
        })
        .collect())
}

/// Dispatches on the system named in `spec`.
pub fn simulate(spec: &SimSpec) -> Result<Vec<Trajectory>> {
    match spec.system {
        System::Ring { .. } => simulate_ring(spec),
        System::Fhn { .. } => simulate_fhn(spec),
        System::Lorenz { .. } => simulate_lorenz(spec),
        System::SwitchingLds { .. } => simulate_switching_lds(spec),
        System::Bistable { .. } => simulate_bistable(spec),
    }
}

/// A random `n x m` loading whose rows have norm `gain` (for spikes this is
/// the tuning concentration of each channel).
pub fn random_loading<R: Rng + ?Sized>(n: usize, m: usize, gain: f64, rng: &mut R) -> DMatrix<f64> {
    let mut c = DMatrix::from_fn(n, m, |_, _| normal(rng));
    for mut row in c.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row *= gain / norm;
        }
    }
    c
}

/// Mean spike probability `1 - exp(-exp(eta + shift))` over all entries.
fn mean_spike_prob(eta: &DMatrix<f64>, shift: f64) -> f64 {
    eta.iter().map(|&e| -(-(e + shift).exp()).exp_m1()).sum::<f64>() / eta.len() as f64
}

/// Samples observations for every row of `latents` (`T x m`).
///
/// For the Poisson kind, the bias is first shifted down so the expected mean
/// spike probability per bin is at most `target_rate` (itself at most
/// [`MAX_SPIKE_RATE`]). Returns the samples and the parameters actually used.
pub fn generate_observations<R: Rng + ?Sized>(
    latents: &DMatrix<f64>,
    params: &ObservationParams,
    target_rate: f64,
    rng: &mut R,
) -> Result<(DMatrix<f64>, ObservationParams)> {
    if latents.ncols() != params.latent_dim() {
        return Err(Error::Shape {
            context: "latents vs loading",
            expected: params.latent_dim(),
            got: latents.ncols(),
        });
    }
    let mut params = params.clone();
    if params.kind == ObsKind::Poisson {
        if !(target_rate > 0.0 && target_rate <= MAX_SPIKE_RATE) {
            return Err(Error::Domain(format!(
                "spike rate target must lie in (0, {MAX_SPIKE_RATE}], got {target_rate}"
            )));
        }
        let eta = latents * params.loading.transpose()
            + DMatrix::from_fn(latents.nrows(), params.obs_dim(), |_, j| params.bias[j]);
        if mean_spike_prob(&eta, 0.0) > target_rate {
            // mean rate is increasing in the shift; bisect on it
            let (mut lo, mut hi) = (-1.0, 0.0);
            while mean_spike_prob(&eta, lo) > target_rate {
                lo *= 2.0;
                if lo < -1e4 {
                    return Err(Error::Numeric("cannot reach the spike rate target".into()));
                }
            }
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if mean_spike_prob(&eta, mid) > target_rate {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            params.bias.add_scalar_mut(lo);
        }
    }
    let mut y = DMatrix::zeros(latents.nrows(), params.obs_dim());
    for t in 0..latents.nrows() {
        let x = latents.row(t).transpose();
        y.set_row(t, &sample_observation(&DVector::from(x), &params, rng)?.transpose());
    }
    Ok((y, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(system: System, noise: f64, steps: usize, dt: f64) -> SimSpec {
        SimSpec {
            system,
            noise_std: noise,
            n_sequences: 1,
            steps,
            dt,
            seed: 7,
        }
    }

    #[test]
    fn ring_on_circle_stays_there() {
        let s = spec(System::ring(), 0.0, 1000, 0.1);
        let tr = simulate_ring_from(&s, [0.6, 0.8], 0.0).unwrap();
        for row in tr.latents.row_iter() {
            assert!((row.norm() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn ring_radius_decays_like_closed_form() {
        let dt = 0.001;
        let s = spec(System::ring(), 0.0, 1001, dt);
        let tr = simulate_ring_from(&s, [2.0, 0.0], 0.0).unwrap();
        let mut prev = f64::INFINITY;
        for (k, row) in tr.latents.row_iter().enumerate() {
            let r = row.norm();
            assert!(r < prev && r > 1.0);
            prev = r;
            let exact = 1.0 + (-(k as f64) * dt).exp();
            assert!((r - exact).abs() < 5.0 * dt);
        }
    }

    #[test]
    fn ring_phase_advances_at_input_rate() {
        // On the circle the radial term vanishes and each Euler step is a
        // rotation by atan(I dt) scaled by sqrt(1 + (I dt)^2).
        let (dt, input) = (0.01, 0.7);
        let s = spec(System::ring(), 0.0, 50, dt);
        let tr = simulate_ring_from(&s, [1.0, 0.0], input).unwrap();
        for k in 1..50 {
            let phase = tr.latents[(k, 1)].atan2(tr.latents[(k, 0)]);
            let prev = tr.latents[(k - 1, 1)].atan2(tr.latents[(k - 1, 0)]);
            let step = (phase - prev + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
            assert!((step - input * dt).abs() < 1e-4);
        }
    }

    #[test]
    fn ring_origin_start_rejected() {
        let s = spec(System::ring(), 0.0, 10, 0.1);
        assert!(simulate_ring_from(&s, [0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn ring_signs_are_balanced() {
        let mut s = spec(System::ring(), 0.005, 5, 0.1);
        s.n_sequences = 10;
        let trs = simulate_ring(&s).unwrap();
        let positive = trs.iter().filter(|t| t.inputs[(0, 0)] > 0.0).count();
        assert_eq!(positive, 5);
    }

    #[test]
    fn fhn_fixed_point() {
        let v = System::fhn().velocity(&[0.5, 0.25], 0.0);
        assert!(v[0].abs() < 1e-15 && v[1].abs() < 1e-15);
    }

    #[test]
    fn fhn_settles_on_limit_cycle() {
        let s = spec(System::fhn(), 0.0, 20000, 0.5);
        let tr = simulate_fhn(&s).unwrap().remove(0);
        let v: Vec<f64> = tr.latents.column(0).iter().copied().collect();
        let peaks: Vec<f64> = (1..v.len() - 1)
            .filter(|&k| k > 5000 && v[k] > v[k - 1] && v[k] >= v[k + 1])
            .map(|k| v[k])
            .collect();
        assert!(peaks.len() >= 3);
        for w in peaks.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-3);
        }
    }

    #[test]
    fn lorenz_equilibria() {
        let sys = System::lorenz();
        assert_eq!(sys.velocity(&[0.0, 0.0, 0.0], 0.0), vec![0.0, 0.0, 0.0]);
        let q = 72f64.sqrt();
        for s in [1.0, -1.0] {
            let v = sys.velocity(&[s * q, s * q, 27.0], 0.0);
            assert!(v.iter().all(|d| d.abs() < 1e-12));
        }
        assert!((q - 8.4853).abs() < 1e-4);
    }

    #[test]
    fn lorenz_separates_and_stays_in_box() {
        let mut s = spec(System::lorenz(), 0.0, 3000, 0.01);
        s.system = System::Lorenz {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            transient: 0,
        };
        let sys = s.system.clone();
        let mut a = vec![1.0, 1.0, 20.0];
        let mut b = vec![1.0 + 1e-9, 1.0, 20.0];
        let mut max_sep: f64 = 0.0;
        for _ in 0..s.steps {
            let (va, vb) = (sys.velocity(&a, 0.0), sys.velocity(&b, 0.0));
            for j in 0..3 {
                a[j] += s.dt * va[j];
                b[j] += s.dt * vb[j];
            }
            let sep = (0..3).map(|j| (a[j] - b[j]).powi(2)).sum::<f64>().sqrt();
            max_sep = max_sep.max(sep);
        }
        assert!(max_sep > 1.0);

        let mut s = spec(System::lorenz(), 0.0, 1000, 0.01);
        s.n_sequences = 8;
        for tr in simulate_lorenz(&s).unwrap() {
            for row in tr.latents.row_iter() {
                assert!(row[0].abs() < 30.0 && row[1].abs() < 30.0 && row[2] > 0.0 && row[2] < 60.0);
            }
        }
    }

    #[test]
    fn lds_spiral_in_and_flip() {
        let a1 = spiral(0.995, -0.1);
        let a2 = spiral(0.995, 0.1);
        for a in [a1, a2] {
            for z in a.complex_eigenvalues().iter() {
                assert!((z.norm() - 0.995).abs() < 1e-12);
            }
        }
        let s = spec(System::switching_lds(), 0.0, 4000, 1.0);
        let tr = simulate_switching_lds(&s).unwrap().remove(0);
        let x = &tr.latents;
        let cross = |t: usize| x[(t, 0)] * x[(t + 1, 1)] - x[(t, 1)] * x[(t + 1, 0)];
        for t in 0..1998 {
            assert!(x.row(t + 1).norm() < x.row(t).norm());
            assert!(cross(t) < 0.0);
        }
        for t in 2000..3998 {
            assert!(cross(t) > 0.0);
        }
    }

    #[test]
    fn lds_unstable_regime_rejected() {
        let mut s = spec(System::switching_lds(), 0.1, 10, 1.0);
        s.system = System::SwitchingLds {
            decay: 1.0,
            theta: 0.1,
            switch_at: 5,
            kick_norm: 1.0,
            parameter_kick: 0.0,
        };
        assert!(matches!(simulate(&s), Err(Error::Config(_))));
    }

    #[test]
    fn lds_noisy_state_bounded() {
        let s = spec(System::switching_lds(), 0.1, 20000, 1.0);
        let tr = simulate_switching_lds(&s).unwrap().remove(0);
        let max = tr.latents.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
        assert!(max < 10.0);
    }

    #[test]
    fn bistable_equilibria_and_convergence() {
        let sys = System::bistable();
        for p in [[1.0, 0.0], [-1.0, 0.0], [0.0, 0.0]] {
            assert_eq!(sys.velocity(&p, 0.0), vec![0.0, 0.0]);
        }
        let mut s = spec(System::bistable(), 0.0, 2000, 0.05);
        s.n_sequences = 20;
        for tr in simulate_bistable(&s).unwrap() {
            let x0 = tr.latents[(0, 0)];
            let end = tr.latents.row(1999);
            if x0 > 0.0 {
                assert!((end[0] - 1.0).abs() < 1e-6 && end[1].abs() < 1e-6);
            } else {
                assert!((end[0] + 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bistable_splits_evenly_under_noise() {
        let s = SimSpec {
            system: System::Bistable {
                input_std: 0.0,
                start_half_width: 0.0,
            },
            noise_std: 0.1,
            n_sequences: 500,
            steps: 400,
            dt: 0.05,
            seed: 3,
        };
        let right = simulate_bistable(&s).unwrap().iter().filter(|t| t.latents[(399, 0)] > 0.0).count();
        assert!((200..=300).contains(&right), "{right}");
    }

    #[test]
    fn doubling_length_extends() {
        let mut s = spec(System::fhn(), 0.002, 300, 0.5);
        let short = simulate(&s).unwrap().remove(0);
        s.steps = 600;
        let long = simulate(&s).unwrap().remove(0);
        assert_eq!(short.latents, long.latents.rows(0, 300).into_owned());
    }

    #[test]
    fn gaussian_observations_without_noise_are_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(30, 2, |_, _| normal(&mut rng));
        let c = random_loading(5, 2, 1.0, &mut rng);
        let b = DVector::from_fn(5, |i, _| i as f64);
        let mut p = ObservationParams::new(c.clone(), b.clone(), ObsKind::Gaussian, 1.0).unwrap();
        p.log_obs_noise_var = f64::NEG_INFINITY;
        let (y, _) = generate_observations(&x, &p, MAX_SPIKE_RATE, &mut rng).unwrap();
        for t in 0..30 {
            let expect = &c * x.row(t).transpose() + &b;
            assert_eq!(y.row(t).transpose(), expect);
        }
    }

    #[test]
    fn spike_rate_is_capped() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = spec(System::ring(), 0.005, 1000, 0.1);
        s.n_sequences = 1;
        let tr = simulate_ring(&s).unwrap().remove(0);
        let c = random_loading(200, 2, 3.0, &mut rng);
        let p = ObservationParams::new(c, DVector::from_element(200, 1.0), ObsKind::Poisson, 1.0).unwrap();
        let (y, used) = generate_observations(&tr.latents, &p, MAX_SPIKE_RATE, &mut rng).unwrap();
        assert_eq!(y.shape(), (1000, 200));
        assert!(y.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(y.mean() <= MAX_SPIKE_RATE * 1.1, "{}", y.mean());
        assert!(used.bias[0] < 1.0);
        assert!(generate_observations(&tr.latents, &p, 0.5, &mut rng).is_err());
    }
}
