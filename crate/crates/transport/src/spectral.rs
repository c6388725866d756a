use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Row/column 2D FFT on an `n × n` periodic grid plus the integer wavenumbers
/// of each index (`0, 1, …, n/2, −n/2+1, …, −1`).
pub(crate) struct Spectral2D {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    wavenumbers: Vec<i64>,
    column: Vec<Complex64>,
}

impl Spectral2D {
    pub(crate) fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let wavenumbers = (0..n)
            .map(|i| {
                if i <= n / 2 {
                    i as i64
                } else {
                    i as i64 - n as i64
                }
            })
            .collect();
        Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
            wavenumbers,
            column: vec![Complex64::default(); n],
        }
    }

    pub(crate) fn wavenumber(&self, i: usize) -> i64 {
        self.wavenumbers[i]
    }

    pub(crate) fn to_complex(values: &[f64]) -> Vec<Complex64> {
        values.iter().map(|&v| Complex64::new(v, 0.0)).collect()
    }

    /// Unnormalized forward transform, in place.
    pub(crate) fn forward(&mut self, data: &mut [Complex64]) {
        let fft = Arc::clone(&self.forward);
        self.apply(&*fft, data);
    }

    /// Inverse transform including the `1/n²` normalization, in place.
    pub(crate) fn inverse(&mut self, data: &mut [Complex64]) {
        let fft = Arc::clone(&self.inverse);
        self.apply(&*fft, data);
        let scale = 1.0 / (self.n * self.n) as f64;
        for z in data.iter_mut() {
            *z *= scale;
        }
    }

    fn apply(&mut self, fft: &dyn Fft<f64>, data: &mut [Complex64]) {
        let n = self.n;
        for row in data.chunks_mut(n) {
            fft.process(row);
        }
        for j in 0..n {
            for i in 0..n {
                self.column[i] = data[i * n + j];
            }
            fft.process(&mut self.column);
            for i in 0..n {
                data[i * n + j] = self.column[i];
            }
        }
    }

    pub(crate) fn real_part(data: &[Complex64]) -> Vec<f64> {
        data.iter().map(|z| z.re).collect()
    }
}
