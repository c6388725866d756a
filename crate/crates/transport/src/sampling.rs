//! Seeded random velocity fields and terminal conditions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TransportError};
use crate::field::{Grid2D, ScalarField2D, VelocityField};
use crate::spectral::Spectral2D;

const VELOCITY_STREAM: u64 = 0;
const TERMINAL_STREAM: u64 = 1;

fn uniform_noise(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..=1.0)).collect()
}

/// Both components of every node drawn i.i.d. from U[-1, 1].
pub fn sample_random_velocity(grid: Grid2D, seed: u64) -> VelocityField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(VELOCITY_STREAM);
    let vx = uniform_noise(&mut rng, grid.len());
    let vy = uniform_noise(&mut rng, grid.len());
    VelocityField::new(grid, vx, vy).expect("uniform samples are finite")
}

/// Uniform node noise passed through a sharp low-pass filter that keeps the
/// modes with `max(|kx|, |ky|) <= cutoff`.
pub fn sample_random_terminal(grid: Grid2D, seed: u64, cutoff: usize) -> Result<ScalarField2D> {
    let n = grid.n();
    if cutoff == 0 || cutoff > n / 2 {
        return Err(TransportError::Parameter(format!(
            "cutoff must lie in 1..={}, got {cutoff}",
            n / 2
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TERMINAL_STREAM);
    let noise = uniform_noise(&mut rng, grid.len());
    // Every representable wavenumber satisfies |k| <= n/2.
    if cutoff == n / 2 {
        return ScalarField2D::new(grid, noise);
    }
    let mut spectral = Spectral2D::new(n);
    let mut z = Spectral2D::to_complex(&noise);
    spectral.forward(&mut z);
    let cutoff = cutoff as i64;
    for i in 0..n {
        for j in 0..n {
            if spectral
                .wavenumber(i)
                .abs()
                .max(spectral.wavenumber(j).abs())
                > cutoff
            {
                z[i * n + j] = Default::default();
            }
        }
    }
    spectral.inverse(&mut z);
    ScalarField2D::new(grid, Spectral2D::real_part(&z))
}

/// Spectral energy outside the box `max(|kx|,|ky|) <= cutoff`, relative to the total.
pub fn energy_outside(field: &ScalarField2D, cutoff: usize) -> f64 {
    let n = field.grid().n();
    let mut spectral = Spectral2D::new(n);
    let mut z = Spectral2D::to_complex(field.values());
    spectral.forward(&mut z);
    let (mut outside, mut total) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let e = z[i * n + j].norm_sqr();
            total += e;
            if spectral
                .wavenumber(i)
                .abs()
                .max(spectral.wavenumber(j).abs())
                > cutoff as i64
            {
                outside += e;
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        outside / total
    }
}
