//! Reduced-order modeling workbench for a 3D-0D coupled cardiac
//! mechanics-circulation problem.
//!
//! The crate is organized along the pipeline: [`geometry`] builds the
//! idealized left-ventricle mesh, [`constitutive`] and [`fem`] provide the
//! hyperelastic element kernels and global assembly, [`circulation`] the
//! windkessel and cardiac-cycle state machine, [`fom`] the full-order time
//! integration, [`rom`] POD/Galerkin reduction and DEIM, [`dnn`] the neural
//! operator surrogates, [`hyrom`] the surrogate-driven online solver, and
//! [`metrics`] the clinical outputs (ejection fraction, dP/dt max).

pub mod circulation;
pub mod constitutive;
pub mod dnn;
pub mod error;
pub mod fem;
pub mod fom;
pub mod geometry;
pub mod hyrom;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod quadrature;
pub mod rom;
pub mod sampling;

pub use error::{Error, Result};

/// 1 mmHg in Pa.
pub const MMHG: f64 = 133.322;

/// 1 ml in m^3.
pub const ML: f64 = 1e-6;
