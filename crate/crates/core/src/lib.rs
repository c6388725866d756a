//! Noise-injected residual networks and their ensembles.
//!
//! A residual block maps `x ↦ x + F(x) + σ·ξ`, one Euler-Maruyama step of a
//! drift-diffusion process; averaging several such networks estimates the
//! expectation that smooths the classifier.
//!
//! ```
//! use autograd::{StreamKey, Tensor};
//! use enresnet::{ArchSpec, EnResNetModel, Mode, NoiseSpec};
//!
//! let arch = ArchSpec { input: [3, 1, 1], channels: 4, blocks: 2, classes: 2 };
//! let model = EnResNetModel::init(2, arch, NoiseSpec::default(), StreamKey(1)).unwrap();
//! let x = Tensor::from_fn(&[5, 3, 1, 1], |i| i as f64 / 15.0);
//! let z = model.logits(&x, Mode::Eval, StreamKey(9)).unwrap();
//! assert_eq!(z.shape(), &[5, 2]);
//! ```

pub mod ensemble;
pub mod error;
pub mod network;
pub mod noise;

pub use ensemble::{
    combine_logits, ensemble_loss, ensemble_weight_grads, integrate_separate,
    update_ensemble_weights, EnResNetModel, EnsembleTrace, EnsembleWeightState, Member, MemberSpec,
    ModelSpec, DEFAULT_WEIGHT_LR,
};
pub use error::{ModelError, Result};
pub use network::{
    residual_block_forward, ArchSpec, BatchNormParams, ForwardCtx, Mode, ResidualBlockParams,
    TinyResNet, Trace, BN_EPS,
};
pub use noise::{noise_std, NoiseMode, NoiseSpec};
