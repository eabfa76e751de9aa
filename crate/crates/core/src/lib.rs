//! Multiple scattering of two-photon states by clouds of point scatterers.
//!
//! The pipeline is: sample a [`scene`], solve the coupled-dipole system for
//! a set of incident plane waves with [`solver`], combine the resulting
//! scattering amplitudes into photon currents for a quantum input state with
//! [`qstates`], average over disorder with [`ensemble`] and characterize the
//! curves with [`analytics`]. The [`oracle`] module is an independent Fock
//! space reference for the current formulas and [`cli`] drives experiments.

pub mod analytics;
pub mod cli;
pub mod ensemble;
pub mod oracle;
pub mod qstates;
pub mod scene;
pub mod solver;

use thiserror::Error;

/// Errors surfaced at the command-line boundary.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("computation failed: {0}")]
    Compute(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            Error::Compute(_) => 3,
            Error::Io(_) => 4,
        }
    }
}
