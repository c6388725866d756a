//! Regularity measurements on solved fields.

use serde::Serialize;

use crate::error::{Result, TransportError};
use crate::field::{ScalarField2D, VelocityField};
use crate::solver::{solve_convection_diffusion, DiffusionConfig};

/// Largest Euclidean norm of the periodic centered-difference gradient.
pub fn grad_sup_norm(field: &ScalarField2D) -> f64 {
    let n = field.grid().n() as isize;
    let inv_2h = 0.5 / field.grid().spacing();
    let mut best = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            let gx = (field.at(i + 1, j) - field.at(i - 1, j)) * inv_2h;
            let gy = (field.at(i, j + 1) - field.at(i, j - 1)) * inv_2h;
            best = best.max(gx.hypot(gy));
        }
    }
    best
}

/// `max |f(x+δ) − f(x)|` over all nodes `x` and node offsets with `‖δ‖∞ <= radius_nodes·h`.
pub fn modulus_of_continuity(field: &ScalarField2D, radius_nodes: usize) -> Result<f64> {
    let n = field.grid().n();
    if radius_nodes == 0 || radius_nodes > n / 4 {
        return Err(TransportError::Parameter(format!(
            "radius must lie in 1..={}, got {radius_nodes}",
            n / 4
        )));
    }
    let r = radius_nodes as isize;
    let n = n as isize;
    let mut best = 0.0_f64;
    for i in 0..n {
        for j in 0..n {
            let center = field.at(i, j);
            for di in -r..=r {
                for dj in -r..=r {
                    best = best.max((field.at(i + di, j + dj) - center).abs());
                }
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientBound {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Checks `‖∇u(·,1)‖∞ <= e^{−σ²}(‖u0‖∞ + ‖∇u0‖∞)` for pure diffusion.
///
/// Only the drift-free case is computable, so any nonzero `velocity` is
/// rejected.
pub fn verify_gradient_bound(
    u0: &ScalarField2D,
    velocity: Option<&VelocityField>,
    sigma: f64,
    cfg: &DiffusionConfig,
) -> Result<GradientBound> {
    if let Some(v) = velocity {
        if !v.is_zero() {
            return Err(TransportError::Unsupported(
                "gradient bound needs a drift-dependent constant; only zero velocity is supported"
                    .into(),
            ));
        }
    }
    let cfg = DiffusionConfig { sigma, ..*cfg };
    let evolved = solve_convection_diffusion(u0, &VelocityField::zero(u0.grid()), &cfg)?;
    let lhs = grad_sup_norm(&evolved);
    let rhs = (-sigma * sigma).exp() * (u0.sup_norm() + grad_sup_norm(u0));
    Ok(GradientBound {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-8,
    })
}
