//! Interpreting a fitted model: velocity fields, fixed points, alignment to
//! ground truth, posterior densities and prediction error curves.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};
use crate::generative::{autonomous_drift, dynamics_jacobian, rbf_features, DynamicsParams};

/// Lattice points and the autonomous velocity at each.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityGrid {
    pub points: Vec<DVector<f64>>,
    pub velocities: Vec<DVector<f64>>,
}

fn check_box(bounds: &[(f64, f64)], resolution: &[usize], m: usize) -> Result<()> {
    crate::error::check_len("box dimensions", m, bounds.len())?;
    crate::error::check_len("resolution dimensions", m, resolution.len())?;
    for (&(lo, hi), &k) in bounds.iter().zip(resolution) {
        if !(lo < hi) || k < 2 {
            return Err(Error::Domain(format!(
                "grid needs lo < hi and resolution >= 2, got ({lo}, {hi}) with {k}"
            )));
        }
    }
    Ok(())
}

/// Every lattice point of the box, first coordinate varying fastest.
pub fn lattice(bounds: &[(f64, f64)], resolution: &[usize]) -> Result<Vec<DVector<f64>>> {
    check_box(bounds, resolution, bounds.len())?;
    let total: usize = resolution.iter().product();
    Ok((0..total)
        .map(|mut flat| {
            DVector::from_fn(bounds.len(), |j, _| {
                let k = flat % resolution[j];
                flat /= resolution[j];
                let (lo, hi) = bounds[j];
                lo + (hi - lo) * k as f64 / (resolution[j] - 1) as f64
            })
        })
        .collect())
}

/// Evaluates `W φ(x)` on a regular lattice over `bounds`.
pub fn velocity_grid(dynamics: &DynamicsParams, bounds: &[(f64, f64)], resolution: &[usize]) -> Result<VelocityGrid> {
    check_box(bounds, resolution, dynamics.latent_dim())?;
    let points = lattice(bounds, resolution)?;
    let velocities = points
        .iter()
        .map(|x| autonomous_drift(x, dynamics))
        .collect::<Result<Vec<_>>>()?;
    Ok(VelocityGrid { points, velocities })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stability {
    Stable,
    Unstable,
    Saddle,
    Marginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub location: Vec<f64>,
    /// `‖W φ(x*)‖` at the reported location.
    pub residual: f64,
    #[serde(rename = "class")]
    pub stability: Stability,
    /// Jacobian eigenvalues as `[re, im]` pairs.
    pub eigenvalues: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointConfig {
    /// Residual a root must reach to be kept.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Classify with the map `x + W φ(x)` instead of the flow.
    #[serde(default)]
    pub discrete: bool,
}

fn default_tol() -> f64 {
    1e-6
}
fn default_max_iter() -> usize {
    100
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            max_iter: default_max_iter(),
            discrete: false,
        }
    }
}

const CLASS_EPS: f64 = 1e-10;
const MIN_SUPPORT: f64 = 1e-3;

/// Classifies a Jacobian of the flow by the signs of its eigenvalues' real
/// parts, or of `|λ| - 1` for `I + J` when `discrete`.
pub fn classify(jacobian: &DMatrix<f64>, discrete: bool) -> (Stability, Vec<Complex<f64>>) {
    let m = jacobian.nrows();
    let eig: Vec<Complex<f64>> = if discrete {
        (jacobian + DMatrix::identity(m, m)).complex_eigenvalues().iter().copied().collect()
    } else {
        jacobian.complex_eigenvalues().iter().copied().collect()
    };
    let signed: Vec<f64> = eig
        .iter()
        .map(|z| if discrete { z.norm() - 1.0 } else { z.re })
        .collect();
    let neg = signed.iter().filter(|&&s| s < -CLASS_EPS).count();
    let pos = signed.iter().filter(|&&s| s > CLASS_EPS).count();
    let class = if neg == m {
        Stability::Stable
    } else if pos == m {
        Stability::Unstable
    } else if neg > 0 && pos > 0 {
        Stability::Saddle
    } else {
        Stability::Marginal
    };
    (class, eig)
}

fn residual(x: &DVector<f64>, dynamics: &DynamicsParams) -> Result<(DVector<f64>, f64)> {
    let g = autonomous_drift(x, dynamics)?;
    let r = g.norm();
    Ok((g, r))
}

/// Newton iterations with backtracking, falling back to gradient descent on
/// `‖g‖² / 2` when the Newton direction fails to reduce the residual.
fn solve_from(seed: &DVector<f64>, dynamics: &DynamicsParams, config: &FixedPointConfig) -> Result<Option<DVector<f64>>> {
    let mut x = seed.clone();
    let (mut g, mut r) = residual(&x, dynamics)?;
    for _ in 0..config.max_iter {
        if r < config.tol {
            break;
        }
        let jac = dynamics_jacobian(&x, dynamics)?;
        let mut moved = false;
        if let Some(step) = jac.clone().lu().solve(&(-&g)) {
            let mut alpha = 1.0;
            for _ in 0..30 {
                let cand = &x + alpha * &step;
                let (gc, rc) = residual(&cand, dynamics)?;
                if rc.is_finite() && rc < r {
                    (x, g, r) = (cand, gc, rc);
                    moved = true;
                    break;
                }
                alpha *= 0.5;
            }
        }
        if !moved {
            let dir = -(jac.transpose() * &g);
            if dir.norm() == 0.0 {
                break;
            }
            let mut alpha = r / dir.norm();
            for _ in 0..50 {
                let cand = &x + alpha * &dir;
                let (gc, rc) = residual(&cand, dynamics)?;
                if rc.is_finite() && rc < r {
                    (x, g, r) = (cand, gc, rc);
                    moved = true;
                    break;
                }
                alpha *= 0.5;
            }
        }
        if !moved {
            break;
        }
    }
    if r >= config.tol {
        return Ok(None);
    }
    // far from every center the field decays to zero without a real root
    let support = rbf_features(&x, dynamics)?.max();
    Ok((support >= MIN_SUPPORT).then_some(x))
}

/// Multi-start root finding on `W φ(x) = 0`. Roots closer than `10 tol` are
/// merged, keeping the smaller residual. So are roots within `10 tol / σ_min`
/// of each other, σ_min being the smallest singular value of the Jacobian,
/// when the field at their midpoint is also below `tol`: in a flat region
/// one root is only located to about that precision. That radius is capped at
/// a tenth of the narrowest basis function's length scale. The output is
/// sorted by location.
/// Points where every basis function is below `1e-3` are not reported.
pub fn find_fixed_points(dynamics: &DynamicsParams, seeds: &[DVector<f64>], config: &FixedPointConfig) -> Result<Vec<FixedPoint>> {
    if !(config.tol > 0.0) {
        return Err(Error::Domain(format!("fixed point tolerance must be positive, got {}", config.tol)));
    }
    let mut roots = Vec::new();
    for seed in seeds {
        crate::error::check_len("fixed point seed", dynamics.latent_dim(), seed.len())?;
        if let Some(x) = solve_from(seed, dynamics, config)? {
            let r = residual(&x, dynamics)?.1;
            roots.push((x, r));
        }
    }
    roots.sort_by(|a, b| {
        a.1.total_cmp(&b.1)
            .then_with(|| a.0.iter().zip(b.0.iter()).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal))
    });
    let narrowest = dynamics.log_inverse_widths.max();
    let length_cap = 0.1 * (-0.5 * narrowest).exp();
    // (root, residual, merge radius)
    let mut kept: Vec<(DVector<f64>, f64, f64)> = Vec::new();
    for (x, r) in roots {
        let mut duplicate = false;
        for (k, _, radius) in &kept {
            let gap = (k - &x).norm();
            if gap < 10.0 * config.tol || (gap < *radius && residual(&((k + &x) * 0.5), dynamics)?.1 < config.tol) {
                duplicate = true;
                break;
            }
        }
        if !duplicate {
            let sigma_min = dynamics_jacobian(&x, dynamics)?.singular_values().min();
            let radius = (10.0 * config.tol / sigma_min.min(1.0)).min(length_cap);
            kept.push((x, r, radius));
        }
    }
    kept.sort_by(|a, b| {
        a.0.iter().zip(b.0.iter()).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    kept.into_iter()
        .map(|(x, r, _)| {
            let (stability, eig) = classify(&dynamics_jacobian(&x, dynamics)?, config.discrete);
            Ok(FixedPoint {
                location: x.iter().copied().collect(),
                residual: r,
                stability,
                eigenvalues: eig.iter().map(|z| [z.re, z.im]).collect(),
            })
        })
        .collect()
}

/// Default seeds: the lattice plus up to 100 evenly subsampled posterior means.
pub fn default_seeds(bounds: &[(f64, f64)], resolution: &[usize], means: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let mut seeds = lattice(bounds, resolution)?;
    if !means.is_empty() {
        let stride = means.len().div_ceil(100);
        seeds.extend(means.iter().step_by(stride).cloned());
    }
    Ok(seeds)
}

/// `reference ≈ inferred · linearᵀ + offset`, fitted by least squares.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub linear: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub residual_rms: f64,
    /// Condition number of the linear part.
    pub condition: f64,
}

impl AffineMap {
    /// Maps each row of `points`.
    pub fn apply(&self, points: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = points * self.linear.transpose();
        for mut row in out.row_iter_mut() {
            row += self.offset.transpose();
        }
        out
    }

    pub fn apply_point(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.linear * x + &self.offset
    }
}

/// Least-squares affine map taking `inferred` rows onto `reference` rows.
pub fn affine_align(inferred: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<AffineMap> {
    let (t, m) = inferred.shape();
    if reference.nrows() != t {
        return Err(Error::Shape {
            context: "affine_align rows",
            expected: t,
            got: reference.nrows(),
        });
    }
    if t <= m + 1 {
        return Err(Error::Domain(format!("affine_align needs more than {} points, got {t}", m + 1)));
    }
    let mut design = DMatrix::from_element(t, m + 1, 1.0);
    design.view_mut((0, 0), (t, m)).copy_from(inferred);
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let design_condition = smax / smin;
    if !(smin > 0.0) || design_condition > 1e12 {
        return Err(Error::Numeric(format!(
            "rank-deficient alignment design: singular values {:?}, condition {design_condition:e}",
            svd.singular_values.as_slice()
        )));
    }
    let coef = svd
        .solve(reference, 0.0)
        .map_err(|e| Error::Numeric(format!("alignment solve failed: {e}")))?;
    let linear = coef.rows(0, m).transpose();
    let offset = coef.row(m).transpose();
    let resid = &design * &coef - reference;
    let residual_rms = (resid.norm_squared() / (t * reference.ncols()) as f64).sqrt();
    let sv = linear.singular_values();
    let condition = sv.max() / sv.min();
    Ok(AffineMap {
        linear,
        offset,
        residual_rms,
        condition,
    })
}

/// Root mean square distance between two equally shaped point sets.
pub fn rmse(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            context: "rmse",
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(((a - b).norm_squared() / a.len() as f64).sqrt())
}

/// Per-horizon mean and standard error across trials of the RMSE over dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseCurve {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

pub fn prediction_rmse(predicted: &[DMatrix<f64>], truth: &DMatrix<f64>) -> Result<RmseCurve> {
    if predicted.is_empty() {
        return Err(Error::Domain("prediction_rmse needs at least one trial".into()));
    }
    let (t, d) = truth.shape();
    for p in predicted {
        if p.shape() != (t, d) {
            return Err(Error::Shape {
                context: "predicted trial",
                expected: t * d,
                got: p.len(),
            });
        }
    }
    let k = predicted.len() as f64;
    let mut mean = vec![0.0; t];
    let mut stderr = vec![0.0; t];
    for h in 0..t {
        let per_trial: Vec<f64> = predicted
            .iter()
            .map(|p| ((p.row(h) - truth.row(h)).norm_squared() / d as f64).sqrt())
            .collect();
        let mu = per_trial.iter().sum::<f64>() / k;
        mean[h] = mu;
        if predicted.len() > 1 {
            let var = per_trial.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (k - 1.0);
            stderr[h] = (var / k).sqrt();
        }
    }
    Ok(RmseCurve { mean, stderr })
}

/// Normalized 2-D histogram of the first two coordinates; points outside
/// the box are dropped. Entry `(i, j)` counts bin `i` of dim 1, `j` of dim 2.
pub fn posterior_density(means: &[DVector<f64>], bounds: [(f64, f64); 2], resolution: [usize; 2]) -> Result<DMatrix<f64>> {
    if means.is_empty() {
        return Err(Error::Domain("posterior_density needs at least one point".into()));
    }
    for (&(lo, hi), &k) in bounds.iter().zip(&resolution) {
        if !(lo < hi) || k == 0 {
            return Err(Error::Domain(format!("bad histogram box ({lo}, {hi}) with {k} bins")));
        }
    }
    let mut hist = DMatrix::zeros(resolution[0], resolution[1]);
    let bin = |v: f64, (lo, hi): (f64, f64), k: usize| -> Option<usize> {
        if v < lo || v > hi {
            return None;
        }
        Some((((v - lo) / (hi - lo) * k as f64) as usize).min(k - 1))
    };
    let mut total = 0.0;
    for x in means {
        if x.len() < 2 {
            return Err(Error::Shape {
                context: "posterior_density point",
                expected: 2,
                got: x.len(),
            });
        }
        if let (Some(i), Some(j)) = (bin(x[0], bounds[0], resolution[0]), bin(x[1], bounds[1], resolution[1])) {
            hist[(i, j)] += 1.0;
            total += 1.0;
        }
    }
    if total == 0.0 {
        return Err(Error::Domain("no point falls inside the histogram box".into()));
    }
    Ok(hist / total)
}

/// A velocity grid with its fixed points, ready for export.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePortrait {
    pub grid: VelocityGrid,
    pub fixed_points: Vec<FixedPoint>,
}

impl PhasePortrait {
    /// Grid as CSV with columns `x_1..x_m, v_1..v_m`.
    pub fn write_grid_csv<W: Write>(&self, out: W) -> Result<()> {
        let m = self.grid.points.first().map_or(0, |p| p.len());
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<String> = (1..=m)
            .map(|j| format!("x_{j}"))
            .chain((1..=m).map(|j| format!("v_{j}")))
            .collect();
        w.write_record(&header)?;
        for (x, v) in self.grid.points.iter().zip(&self.grid.velocities) {
            w.write_record(x.iter().chain(v.iter()).map(|f| format!("{f:?}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn fixed_points_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.fixed_points)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn dense_linear_fit(target: impl Fn(&DVector<f64>) -> DVector<f64>) -> DynamicsParams {
        // RBF regression of a known field on a 9x9 lattice of centers.
        let pts = lattice(&[(-2.0, 2.0), (-2.0, 2.0)], &[9, 9]).unwrap();
        let r = pts.len();
        let mut d = DynamicsParams::zeros(2, r, 1);
        for (i, c) in pts.iter().enumerate() {
            d.centers.set_column(i, c);
        }
        d.log_inverse_widths.fill((2.0f64).ln());
        let train = lattice(&[(-2.0, 2.0), (-2.0, 2.0)], &[25, 25]).unwrap();
        let phi = DMatrix::from_fn(train.len(), r, |k, i| {
            let diff = &train[k] - d.centers.column(i);
            (-0.5 * 2.0 * diff.norm_squared()).exp()
        });
        let tgt = DMatrix::from_fn(train.len(), 2, |k, j| target(&train[k])[j]);
        let reg = phi.tr_mul(&phi) + DMatrix::identity(r, r) * 1e-8;
        let w = reg.cholesky().unwrap().solve(&phi.tr_mul(&tgt));
        d.weights = w.transpose();
        d
    }

    #[test]
    fn zero_field() {
        let d = DynamicsParams::zeros(2, 4, 1);
        let g = velocity_grid(&d, &[(-1.0, 1.0), (0.0, 2.0)], &[3, 4]).unwrap();
        assert_eq!(g.points.len(), 12);
        assert!(g.velocities.iter().all(|v| v.iter().all(|&c| c == 0.0)));
        for p in &g.points {
            assert!((-1.0..=1.0).contains(&p[0]) && (0.0..=2.0).contains(&p[1]));
        }
        assert!(velocity_grid(&d, &[(1.0, 1.0), (0.0, 2.0)], &[3, 4]).is_err());
        assert!(velocity_grid(&d, &[(0.0, 1.0), (0.0, 2.0)], &[1, 4]).is_err());
    }

    #[test]
    fn fitted_linear_field_points_inward() {
        let d = dense_linear_fit(|x| -x);
        let g = velocity_grid(&d, &[(-1.5, 1.5), (-1.5, 1.5)], &[11, 11]).unwrap();
        for (x, v) in g.points.iter().zip(&g.velocities) {
            if x.norm() < 0.2 {
                continue;
            }
            let rel = (v + x).norm() / x.norm();
            assert!(rel < 0.1, "{x} {v}");
        }
    }

    #[test]
    fn bistable_fit_has_three_fixed_points() {
        let d = dense_linear_fit(|x| DVector::from_vec(vec![x[0] - x[0].powi(3), -x[1]]));
        let seeds = lattice(&[(-1.8, 1.8), (-1.5, 1.5)], &[7, 5]).unwrap();
        let fps = find_fixed_points(&d, &seeds, &FixedPointConfig::default()).unwrap();
        let near = |p: [f64; 2], class: Stability| {
            fps.iter().any(|f| {
                ((f.location[0] - p[0]).powi(2) + (f.location[1] - p[1]).powi(2)).sqrt() < 0.1 && f.stability == class
            })
        };
        assert!(near([1.0, 0.0], Stability::Stable));
        assert!(near([-1.0, 0.0], Stability::Stable));
        assert!(near([0.0, 0.0], Stability::Saddle));
        for f in &fps {
            let x = DVector::from_vec(f.location.clone());
            assert!(autonomous_drift(&x, &d).unwrap().norm() < 1e-6);
        }
        let mut reversed = seeds.clone();
        reversed.reverse();
        let again = find_fixed_points(&d, &reversed, &FixedPointConfig::default()).unwrap();
        assert_eq!(again.len(), fps.len());
        for (a, b) in again.iter().zip(&fps) {
            let dist: f64 = a.location.iter().zip(&b.location).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            assert!(dist < 1e-5);
        }
    }

    #[test]
    fn zero_field_seeds_are_marginal_points() {
        let d = DynamicsParams::zeros(2, 3, 1);
        let seeds = vec![DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![1.0, 1.0])];
        let fps = find_fixed_points(&d, &seeds, &FixedPointConfig::default()).unwrap();
        assert_eq!(fps.len(), 2);
        assert!(fps.iter().all(|f| f.stability == Stability::Marginal && f.residual == 0.0));
    }

    #[test]
    fn no_roots_gives_empty_list() {
        let mut d = DynamicsParams::zeros(1, 1, 1);
        d.weights[(0, 0)] = 1.0;
        d.log_inverse_widths[0] = (0.01f64).ln();
        let seeds = vec![DVector::from_vec(vec![0.5])];
        assert!(find_fixed_points(&d, &seeds, &FixedPointConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn classification_conventions() {
        let j = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 2.0]);
        assert_eq!(classify(&j, false).0, Stability::Saddle);
        let j = DMatrix::from_row_slice(2, 2, &[-0.5, 3.0, -3.0, -0.5]);
        assert_eq!(classify(&j, false).0, Stability::Stable);
        // a fast spiral is stable as a flow but not as an Euler map
        assert_eq!(classify(&j, true).0, Stability::Unstable);
        let j = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.3]);
        assert_eq!(classify(&j, false).0, Stability::Unstable);
        // similarity transforms preserve the class
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.5, 3.0]);
        let moved = &p * &j * p.clone().try_inverse().unwrap();
        assert_eq!(classify(&moved, false).0, Stability::Unstable);
    }

    #[test]
    fn align_identity_and_known_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(200, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = affine_align(&x, &x).unwrap();
        assert!((&a.linear - DMatrix::identity(2, 2)).amax() < 1e-10);
        assert!(a.offset.amax() < 1e-10);
        assert!(a.residual_rms < 1e-10);

        let theta: f64 = 0.7;
        let rot = DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]);
        let v = DVector::from_vec(vec![0.3, -1.2]);
        let mut inferred = &x * rot.transpose();
        for mut row in inferred.row_iter_mut() {
            row += v.transpose();
        }
        let a = affine_align(&inferred, &x).unwrap();
        let rinv = rot.clone().try_inverse().unwrap();
        assert!((&a.linear - &rinv).amax() < 1e-8);
        assert!((&a.offset + &rinv * &v).amax() < 1e-8);
        assert!((a.condition - 1.0).abs() < 1e-8);
        assert!(rmse(&a.apply(&inferred), &x).unwrap() < 1e-8);
    }

    #[test]
    fn align_noise_level_and_degenerate_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(5000, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noisy = x.map(|v| v + 0.01 * rng.sample::<f64, StandardNormal>(StandardNormal));
        let a = affine_align(&noisy, &x).unwrap();
        assert!((a.residual_rms - 0.01).abs() < 0.001);

        let flat = DMatrix::from_fn(50, 2, |i, j| if j == 0 { i as f64 } else { 2.0 * i as f64 });
        assert!(matches!(affine_align(&flat, &x.rows(0, 50).into_owned()), Err(Error::Numeric(_))));
        assert!(affine_align(&x.rows(0, 3).into_owned(), &x.rows(0, 3).into_owned()).is_err());
    }

    #[test]
    fn rmse_curve_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = DMatrix::from_fn(5, 1000, |_, _| rng.sample::<f64, _>(StandardNormal));
        let c = prediction_rmse(&[truth.clone(), truth.clone()], &truth).unwrap();
        assert!(c.mean.iter().chain(&c.stderr).all(|&v| v == 0.0));
        let noisy: Vec<_> = (0..3)
            .map(|_| truth.map(|v| v + rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let c = prediction_rmse(&noisy, &truth).unwrap();
        assert!(c.mean.iter().all(|&v| (v - 1.0).abs() < 0.05));
        let single = prediction_rmse(&noisy[..1], &truth).unwrap();
        assert!(single.stderr.iter().all(|&v| v == 0.0));
        assert!(prediction_rmse(&[DMatrix::zeros(4, 1000)], &truth).is_err());
    }

    #[test]
    fn density_properties() {
        let same = vec![DVector::from_vec(vec![0.3, 0.3]); 10];
        let h = posterior_density(&same, [(0.0, 1.0), (0.0, 1.0)], [20, 20]).unwrap();
        assert_eq!(h.max(), 1.0);
        assert!((h.sum() - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let uniform: Vec<_> = (0..10_000)
            .map(|_| DVector::from_vec(vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]))
            .collect();
        let h = posterior_density(&uniform, [(0.0, 1.0), (0.0, 1.0)], [20, 20]).unwrap();
        assert!(h.max() < 5.0 * h.mean());
        assert!(posterior_density(&[], [(0.0, 1.0), (0.0, 1.0)], [20, 20]).is_err());
    }

    #[test]
    fn portrait_exports() {
        let d = DynamicsParams::zeros(2, 2, 1);
        let grid = velocity_grid(&d, &[(-1.0, 1.0), (-1.0, 1.0)], &[2, 2]).unwrap();
        let fps = find_fixed_points(&d, &grid.points[..1], &FixedPointConfig::default()).unwrap();
        let p = PhasePortrait { grid, fixed_points: fps };
        let mut buf = Vec::new();
        p.write_grid_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x_1,x_2,v_1,v_2\n"));
        assert_eq!(text.lines().count(), 5);
        let json: serde_json::Value = serde_json::from_str(&p.fixed_points_json().unwrap()).unwrap();
        assert_eq!(json[0]["class"], "marginal");
        assert!(json[0]["eigenvalues"].is_array());
    }
}
