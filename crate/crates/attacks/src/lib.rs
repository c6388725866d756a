//! White-box attacks on classifiers with noisy inference.
//!
//! Every attack takes an explicit [`autograd::StreamKey`]; gradients against
//! stochastic models are averaged over several keyed passes
//! (expectation over transformation), so the same inputs and key always give
//! the same adversarial batch.

pub mod attack;
pub mod classifier;
pub mod error;

pub use attack::{
    cw, eot_gradient, fgsm, ifgsm, ifgsm_from, least_likely_targets, pgd_init, run_attack,
    AdversarialBatch, AttackKind, AttackSpec, CW_SQUEEZE, CW_TEMPERATURE,
};
pub use classifier::{least_likely, loss_gradient, predict, Classifier, ModelView};
pub use error::{AttackError, Result};
