//! Fits the ring preset and prints the alignment error and the fixed points
//! of the learned field.
//!
//!     cargo run --release -p vjf-core --example ring

use nalgebra::DVector;
use vjf_core::analysis::{default_seeds, find_fixed_points, FixedPointConfig};
use vjf_core::experiment::{aligned_rmse, fit, generate};
use vjf_core::protocols::preset;

fn main() -> vjf_core::Result<()> {
    let recipe = preset("ring")?;
    let data = generate(&recipe.sim, &recipe.observation)?.trajectories;
    let run = fit(&data, recipe.m, recipe.observation.kind, &recipe.fit)?;
    let (map, rmse) = aligned_rmse(&run.posteriors, &data)?;
    println!("{} passes, aligned latent RMSE {rmse:.3}", run.filter.passes());

    let means = run.stacked_means();
    let bounds: Vec<(f64, f64)> = (0..recipe.m)
        .map(|j| (means.column(j).min(), means.column(j).max()))
        .collect();
    let points: Vec<DVector<f64>> = means.row_iter().map(|r| r.transpose()).collect();
    let seeds = default_seeds(&bounds, &[15, 15], &points)?;
    for fp in find_fixed_points(&run.filter.bundle.dynamics, &seeds, &FixedPointConfig::default())? {
        let at = map.apply_point(&DVector::from_vec(fp.location.clone()));
        println!("{:?} at ({:.3}, {:.3}), radius {:.3}", fp.stability, at[0], at[1], at.norm());
    }
    Ok(())
}
