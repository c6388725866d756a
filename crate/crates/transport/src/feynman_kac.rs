//! Monte Carlo evaluation of `u(x̂, 0) = E[f(x(1)) | x(0) = x̂]` for the Itô
//! diffusion `dx = F̄(x) dt + σ dB_t`, discretized with Euler-Maruyama.
//!
//! Each path draws its Gaussian increments from its own ChaCha stream, keyed by
//! `(seed, path_index)`, so a path is reproducible on its own and estimates do
//! not depend on how paths are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TransportError};
use crate::field::{Grid2D, ScalarField2D, VelocityField};
use crate::solver::{solve_convection_diffusion, DiffusionConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdeConfig {
    pub sigma: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
}

impl Default for SdeConfig {
    fn default() -> Self {
        Self {
            sigma: 0.0,
            dt: 1e-3,
            n_paths: 10_000,
            seed: 0,
        }
    }
}

impl SdeConfig {
    fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(TransportError::Parameter(
                "n_paths must be at least 1".into(),
            ));
        }
        if !(self.dt > 0.0 && self.dt <= 1.0) {
            return Err(TransportError::Parameter(format!(
                "dt must lie in (0, 1], got {}",
                self.dt
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(TransportError::Parameter(format!(
                "sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    fn steps(&self) -> Vec<f64> {
        DiffusionConfig {
            dt: self.dt,
            ..DiffusionConfig::default()
        }
        .steps()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n_paths)`.
    pub stderr: f64,
    pub n_paths: usize,
    /// With a single path the standard error is undefined and reported as 0.
    pub single_sample: bool,
}

fn wrap(x: f64) -> f64 {
    let w = x.rem_euclid(1.0);
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Integrates one path and returns `(wrapped endpoint, unwrapped displacement)`.
fn simulate(
    x0: [f64; 2],
    velocity: &VelocityField,
    cfg: &SdeConfig,
    steps: &[f64],
    path_index: u64,
) -> ([f64; 2], [f64; 2]) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(path_index);
    let mut x = [wrap(x0[0]), wrap(x0[1])];
    let mut moved = [0.0, 0.0];
    for &h in steps {
        let drift = velocity.interpolate(x);
        let mut dx = [drift[0] * h, drift[1] * h];
        if cfg.sigma > 0.0 {
            let scale = cfg.sigma * h.sqrt();
            let xi0: f64 = StandardNormal.sample(&mut rng);
            let xi1: f64 = StandardNormal.sample(&mut rng);
            dx[0] += scale * xi0;
            dx[1] += scale * xi1;
        }
        moved[0] += dx[0];
        moved[1] += dx[1];
        x = [wrap(x[0] + dx[0]), wrap(x[1] + dx[1])];
    }
    (x, moved)
}

/// Endpoint `x(1)` of path `path_index`, wrapped into `[0, 1)²`.
pub fn euler_maruyama_endpoint(
    x0: [f64; 2],
    velocity: &VelocityField,
    cfg: &SdeConfig,
    path_index: u64,
) -> [f64; 2] {
    simulate(x0, velocity, cfg, &cfg.steps(), path_index).0
}

/// Total displacement `x(1) − x(0)` of path `path_index` before periodic wrapping.
pub fn euler_maruyama_displacement(
    x0: [f64; 2],
    velocity: &VelocityField,
    cfg: &SdeConfig,
    path_index: u64,
) -> [f64; 2] {
    simulate(x0, velocity, cfg, &cfg.steps(), path_index).1
}

/// Order-stable pairwise summation.
fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 32 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub(crate) fn summarize(samples: &[f64]) -> McEstimate {
    let n = samples.len();
    if samples.iter().all(|&v| v == samples[0]) {
        return McEstimate {
            mean: samples[0],
            stderr: 0.0,
            n_paths: n,
            single_sample: n == 1,
        };
    }
    let mean = pairwise_sum(samples) / n as f64;
    if n == 1 {
        return McEstimate {
            mean,
            stderr: 0.0,
            n_paths: 1,
            single_sample: true,
        };
    }
    let sq: Vec<f64> = samples.iter().map(|v| (v - mean).powi(2)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    McEstimate {
        mean,
        stderr: (var / n as f64).sqrt(),
        n_paths: n,
        single_sample: false,
    }
}

/// Payoff samples `f(x_p(1))` for paths `0..n_paths`, in path order.
pub fn payoff_samples(
    x0: [f64; 2],
    terminal: &ScalarField2D,
    velocity: &VelocityField,
    cfg: &SdeConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if terminal.grid() != velocity.grid() {
        return Err(TransportError::Parameter(
            "terminal and velocity grids differ".into(),
        ));
    }
    let steps = cfg.steps();
    Ok((0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|p| terminal.interpolate(simulate(x0, velocity, cfg, &steps, p).0))
        .collect())
}

pub fn estimate_u0(
    x0: [f64; 2],
    terminal: &ScalarField2D,
    velocity: &VelocityField,
    cfg: &SdeConfig,
) -> Result<McEstimate> {
    Ok(summarize(&payoff_samples(x0, terminal, velocity, cfg)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointComparison {
    pub x: f64,
    pub y: f64,
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub pde: f64,
    pub abs_err: f64,
    pub err_over_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub max_abs_err: f64,
    pub max_err_over_stderr: f64,
    pub rows: Vec<PointComparison>,
}

/// Grid size the PDE side of [`compare_with_pde`] is solved on, at least.
pub const COMPARISON_MIN_NODES: usize = 256;

/// Cross-validates Monte Carlo estimates against the PDE solution at `points`.
///
/// Paths see the bilinear interpolants of `terminal` and `velocity`. The PDE is
/// solved for those same interpolants, prolongated onto a grid of at least
/// [`COMPARISON_MIN_NODES`] per side, so that both sides approximate one
/// continuous problem even when the input grid is too coarse to resolve it.
pub fn compare_with_pde(
    points: &[[f64; 2]],
    terminal: &ScalarField2D,
    velocity: &VelocityField,
    sigma: f64,
    mc_cfg: &SdeConfig,
    pde_cfg: &DiffusionConfig,
) -> Result<ComparisonReport> {
    let mc_cfg = SdeConfig { sigma, ..*mc_cfg };
    let pde_cfg = DiffusionConfig { sigma, ..*pde_cfg };
    let fine = Grid2D::new(
        terminal
            .grid()
            .n()
            .max(velocity.grid().n())
            .max(COMPARISON_MIN_NODES),
    )?;
    let u0 =
        solve_convection_diffusion(&terminal.refined(fine)?, &velocity.refined(fine)?, &pde_cfg)?;
    let mut rows = Vec::with_capacity(points.len());
    for &p in points {
        let est = estimate_u0(p, terminal, velocity, &mc_cfg)?;
        let pde = u0.interpolate(p);
        let abs_err = (est.mean - pde).abs();
        let err_over_stderr = if est.stderr > 0.0 {
            abs_err / est.stderr
        } else if abs_err <= 1e-12 {
            0.0
        } else {
            f64::INFINITY
        };
        rows.push(PointComparison {
            x: p[0],
            y: p[1],
            mc_mean: est.mean,
            mc_stderr: est.stderr,
            pde,
            abs_err,
            err_over_stderr,
        });
    }
    Ok(ComparisonReport {
        max_abs_err: rows.iter().fold(0.0, |m, r| m.max(r.abs_err)),
        max_err_over_stderr: rows.iter().fold(0.0, |m, r| m.max(r.err_over_stderr)),
        rows,
    })
}

/// `k × k` evenly spaced grid nodes, used as default probe points.
pub fn probe_points(grid: crate::field::Grid2D, count: usize) -> Vec<[f64; 2]> {
    let side = (count as f64).sqrt().ceil() as usize;
    let stride = (grid.n() / side.max(1)).max(1);
    let mut pts = Vec::with_capacity(count);
    'outer: for a in 0..side {
        for b in 0..side {
            if pts.len() == count {
                break 'outer;
            }
            pts.push(grid.node(
                (a * stride + stride / 2) % grid.n(),
                (b * stride + stride / 2) % grid.n(),
            ));
        }
    }
    pts
}
