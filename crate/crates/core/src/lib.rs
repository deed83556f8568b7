//! Displaced Gaussian boson sampling: state propagation, photon-pattern
//! probabilities, kernel reconstruction from click statistics, experiment
//! simulation and a Fock-space reference oracle.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod fock;
pub mod hafnian;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod probability;
pub mod random;
pub mod reconstruction;
pub mod state;
pub mod sum;

pub use error::{Error, Result};
