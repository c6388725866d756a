//! Transport-equation tooling on the periodic unit square.
//!
//! [`field`] holds the grid and sampled fields, [`solver`] integrates the
//! terminal-value convection-diffusion problem pseudo-spectrally,
//! [`diagnostics`] measures regularity of the result, and [`feynman_kac`]
//! estimates the same solution pointwise by simulating the underlying Itô
//! diffusion.

pub mod diagnostics;
mod error;
pub mod feynman_kac;
pub mod field;
pub mod sampling;
pub mod solver;
mod spectral;

pub use diagnostics::{grad_sup_norm, modulus_of_continuity, verify_gradient_bound, GradientBound};
pub use error::{Result, TransportError};
pub use feynman_kac::{
    compare_with_pde, estimate_u0, euler_maruyama_endpoint, ComparisonReport, McEstimate,
    PointComparison, SdeConfig,
};
pub use field::{Grid2D, ScalarField2D, VelocityField};
pub use sampling::{sample_random_terminal, sample_random_velocity};
pub use solver::{cell_peclet, solve_convection_diffusion, ConvectionScheme, DiffusionConfig};
