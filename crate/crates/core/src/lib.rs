//! Hamiltonian field dynamics on the periodic box and the statistical
//! machinery around them: ensembles, Liouville residuals, projected
//! continuity equations and path-space measures.

pub mod error;
mod fft;
pub mod field;
pub mod models;
pub mod flow;
pub mod liouville;
pub mod measure;
pub mod pathspace;
pub mod io;
pub mod experiment;

pub use error::{Error, Result};
