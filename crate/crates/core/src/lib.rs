//! Spectral-Galerkin solver for time-dependent Kohn-Sham systems and their
//! adjoint, with an estimate-verification harness and an optimal-control
//! toolkit.

pub mod basis;
pub mod config;
pub mod control;
pub mod error;
pub mod estimates;
pub mod galerkin;
pub mod potentials;
pub mod propagator;
pub mod random;
pub mod run;

pub use basis::{build_basis, CoefficientState, DomainSpec, GridField, ScalarField, SpectralBasis};
pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
