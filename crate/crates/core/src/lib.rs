pub mod cli;
pub mod dirichlet;
pub mod error;
pub mod expr;
pub mod fourier;
pub mod functional;
pub mod morse;
pub mod potential;
pub mod quadrature;
pub mod reduction;

pub use error::{Error, Result};
