use autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// `σ = a·√Var(x + F(x))`
    Scaled,
    /// `σ = a`
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub a: f64,
    pub mode: NoiseMode,
    pub active_in_eval: bool,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            a: 0.1,
            mode: NoiseMode::Scaled,
            active_in_eval: true,
        }
    }
}

impl NoiseSpec {
    pub fn new(a: f64, mode: NoiseMode) -> Result<Self> {
        let spec = Self {
            a,
            mode,
            active_in_eval: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A noiseless block.
    pub fn none() -> Self {
        Self {
            a: 0.0,
            mode: NoiseMode::Scaled,
            active_in_eval: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a >= 0.0 && self.a.is_finite()) {
            return param(format!(
                "noise scale a must be finite and >= 0, got {}",
                self.a
            ));
        }
        Ok(())
    }

    /// Whether the network samples noise at all.
    pub fn is_stochastic(&self) -> bool {
        self.a > 0.0
    }
}

/// Standard deviation of the noise injected after a block whose pre-noise
/// output is `pre_noise`. The scaled mode uses the population variance over
/// every element of the batch.
pub fn noise_std(pre_noise: &Tensor, spec: &NoiseSpec) -> f64 {
    match spec.mode {
        NoiseMode::Fixed => spec.a,
        NoiseMode::Scaled => {
            let xs = pre_noise.data();
            if spec.a == 0.0 || xs.iter().all(|&v| v == xs[0]) {
                return 0.0;
            }
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            spec.a * var.sqrt()
        }
    }
}
