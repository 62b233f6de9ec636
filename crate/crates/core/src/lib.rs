//! Variational fitting of phylogenetic mixed-effects models for community
//! data, with sparse (nearest-neighbour or band) inverse Cholesky priors.

pub mod cli;
pub mod elbo;
pub mod error;
pub mod family;
pub mod io;
pub mod kernel;
pub mod optim;
pub mod phylo;
pub mod simulate;
pub mod sparseprec;

pub use error::{Error, Result};
