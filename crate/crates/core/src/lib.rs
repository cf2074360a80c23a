//! Online variational joint filtering of latent states and dynamics.

pub mod analysis;
pub mod dekf;
pub mod error;
pub mod experiment;
pub mod filter;
pub mod generative;
pub mod io;
pub mod numeric;
pub mod protocols;
pub mod recognition;
pub mod simulate;

pub use error::{Error, Result};
