//! Spectral-truncation laboratory for quasi-linear Kolmogorov equations on
//! Hilbert spaces, the associated SPDE with solution-dependent diffusion, and
//! its small-noise large deviations.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod chebyshev;
pub mod coefficients;
pub mod config;
pub mod error;
pub mod field;
pub mod ou;
pub mod quadrature;
pub mod runner;
pub mod ldp;
pub mod solver;
pub mod spde;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
pub use coefficients::{CoefficientSet, Drift, FFamily, FKind, SModulation};
pub use field::{Field, FieldSpec};
pub use spectral::{DiagonalOperator, GaussianMeasure, HVector, SpectralModel};
