//! Small dense-tensor autodiff engine.
//!
//! Values are `f64`. A [`Graph`] records each op as it runs; [`Graph::backward`]
//! walks the record in reverse and returns gradients for the tracked leaves.
//!
//! ```
//! use autograd::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```

pub mod error;
pub mod graph;
mod kernels;
pub mod optim;
pub mod random;
pub mod tensor;

pub use error::{AutogradError, Result};
pub use graph::{
    softmax_nll, BatchNormMode, BatchStats, Gradients, Graph, RunningStats, Var, BN_MOMENTUM,
};
pub use optim::{adam_step, sgd_momentum_step, AdamConfig, AdamState, SgdState};
pub use random::{gaussian_sample, uniform_sample, StreamKey};
pub use tensor::Tensor;
