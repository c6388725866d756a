//! Keyed random streams.
//!
//! A [`StreamKey`] names an independent ChaCha8 stream. Child keys come from
//! [`StreamKey::derive`], so callers can hand every block, member, run and
//! iteration its own stream without sharing generator state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey(pub u64);

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl StreamKey {
    pub fn derive(self, index: u64) -> StreamKey {
        StreamKey(splitmix64(
            splitmix64(self.0) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)),
        ))
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

/// I.i.d. `N(0, std²)` values; `std == 0` gives exact zeros without touching the stream.
pub fn gaussian_sample(shape: &[usize], std: f64, key: StreamKey) -> Tensor {
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let mut rng = key.rng();
    Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

/// I.i.d. uniform values on `[lo, hi]`.
pub fn uniform_sample(shape: &[usize], lo: f64, hi: f64, key: StreamKey) -> Tensor {
    if lo == hi {
        return Tensor::full(shape, lo);
    }
    let mut rng = key.rng();
    Tensor::from_fn(shape, |_| lo + (hi - lo) * rng.gen::<f64>())
}
