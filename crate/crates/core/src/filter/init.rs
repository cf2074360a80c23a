use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::generative::{normalize_loading_in_place, ObsKind};

const FA_ITERATIONS: usize = 50;
const UNIQUENESS_FLOOR: f64 = 1e-6;

/// Loading and bias estimated from a block of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingInit {
    pub loading: DMatrix<f64>,
    pub bias: DVector<f64>,
    /// True when the covariance was degenerate and random orthonormal
    /// columns were used instead of factor directions.
    pub fallback: bool,
}

/// Factor analysis (EM) on the rows of `y` (`T x n`), keeping `m` factors.
///
/// The bias is the channel mean, or its log for Poisson data.
pub fn init_loading_fa<R: Rng + ?Sized>(y: &DMatrix<f64>, m: usize, kind: ObsKind, rng: &mut R) -> Result<LoadingInit> {
    let (t, n) = y.shape();
    if m == 0 || m > n {
        return Err(Error::Domain(format!("need 1 <= m <= n, got m={m}, n={n}")));
    }
    if t < 10 * m {
        return Err(Error::Domain(format!("factor analysis needs at least {} rows, got {t}", 10 * m)));
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { component: "observations" });
    }

    let mean = y.row_mean().transpose();
    let bias = match kind {
        ObsKind::Gaussian => mean.clone(),
        ObsKind::Poisson => mean.map(|v| v.max(1e-3).ln()),
    };
    let centered = DMatrix::from_fn(t, n, |i, j| y[(i, j)] - mean[j]);
    let cov = centered.tr_mul(&centered) / t as f64;

    let fallback_loading = |rng: &mut R| {
        let g = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        g.qr().q()
    };

    let total = cov.trace();
    if !(total > 1e-12) {
        return Ok(LoadingInit {
            loading: fallback_loading(rng),
            bias,
            fallback: true,
        });
    }

    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut lambda = DMatrix::from_fn(n, m, |i, k| {
        let j = order[k];
        eig.eigenvectors[(i, j)] * eig.eigenvalues[j].max(0.0).sqrt()
    });
    let mut psi = DVector::from_fn(n, |i, _| {
        let communal: f64 = (0..m).map(|k| lambda[(i, k)].powi(2)).sum();
        (cov[(i, i)] - communal).max(UNIQUENESS_FLOOR.max(1e-3 * cov[(i, i)]))
    });

    for _ in 0..FA_ITERATIONS {
        // beta = (I + Λᵀ Ψ⁻¹ Λ)⁻¹ Λᵀ Ψ⁻¹, the posterior factor map
        let psi_inv_lambda = DMatrix::from_fn(n, m, |i, k| lambda[(i, k)] / psi[i]);
        let inner = DMatrix::identity(m, m) + lambda.tr_mul(&psi_inv_lambda);
        let Some(inner_inv) = inner.try_inverse() else { break };
        let beta = &inner_inv * psi_inv_lambda.transpose();
        let beta_s = &beta * &cov;
        let ezz = DMatrix::identity(m, m) - &beta * &lambda + &beta_s * beta.transpose();
        let Some(ezz_inv) = ezz.try_inverse() else { break };
        let new_lambda = beta_s.transpose() * ezz_inv;
        let new_psi = DVector::from_fn(n, |i, _| {
            let explained: f64 = (0..m).map(|k| new_lambda[(i, k)] * beta_s[(k, i)]).sum();
            (cov[(i, i)] - explained).max(UNIQUENESS_FLOOR)
        });
        if !new_lambda.iter().chain(new_psi.iter()).all(|v| v.is_finite()) {
            break;
        }
        lambda = new_lambda;
        psi = new_psi;
    }

    let mut loading = lambda;
    if normalize_loading_in_place(&mut loading).is_err() || !loading.iter().all(|v| v.is_finite()) {
        return Ok(LoadingInit {
            loading: fallback_loading(rng),
            bias,
            fallback: true,
        });
    }
    Ok(LoadingInit {
        loading,
        bias,
        fallback: false,
    })
}
