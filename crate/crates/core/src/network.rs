//! Pre-activation residual blocks and the TinyResNet-k classifier.
//!
//! A block computes `F = C2(relu(B2(C1(relu(B1 x)))))`, forms `y = x + F` and
//! adds `σ·ξ`, with `ξ` drawn from the block's keyed stream. The noise enters
//! the graph as a constant, so no gradient flows through `σ`.

use autograd::{
    gaussian_sample, BatchNormMode, BatchStats, Graph, RunningStats, StreamKey, Tensor, Var,
    BN_MOMENTUM,
};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::noise::{noise_std, NoiseSpec};

pub const BN_EPS: f64 = 1e-5;
pub const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: RunningStats,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running: RunningStats::new(channels),
        }
    }
}

/// The two batch norms and two convolutions of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlockParams {
    pub b1: BatchNormParams,
    pub c1: Tensor,
    pub b2: BatchNormParams,
    pub c2: Tensor,
}

/// Per-forward settings shared by every block of a member.
#[derive(Debug, Clone, Copy)]
pub struct ForwardCtx<'a> {
    pub mode: Mode,
    pub noise: &'a NoiseSpec,
    pub key: StreamKey,
    /// Register parameters as graph leaves so backward reports their gradients.
    pub track_params: bool,
}

impl ForwardCtx<'_> {
    fn noise_active(&self) -> bool {
        self.noise.is_stochastic() && (self.mode == Mode::Train || self.noise.active_in_eval)
    }
}

/// What a forward pass leaves behind besides its output.
#[derive(Debug, Default)]
pub struct Trace {
    /// Parameter vars in [`TinyResNet::params_mut`] order (empty unless tracked).
    pub params: Vec<Var>,
    /// Training-mode batch statistics, one per batch norm in forward order.
    pub stats: Vec<BatchStats>,
    /// Noise standard deviation injected by each block.
    pub sigmas: Vec<f64>,
}

fn bind(g: &mut Graph, t: &Tensor, ctx: &ForwardCtx<'_>, trace: &mut Trace) -> Var {
    if ctx.track_params {
        let v = g.leaf(t.clone());
        trace.params.push(v);
        v
    } else {
        g.constant(t.clone())
    }
}

fn he_kernel(out: usize, inp: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / (inp * KERNEL * KERNEL) as f64).sqrt();
    Tensor::from_fn(&[out, inp, KERNEL, KERNEL], |_| {
        std * rng.sample::<f64, _>(StandardNormal)
    })
}

fn batch_norm(
    g: &mut Graph,
    x: Var,
    p: &BatchNormParams,
    ctx: &ForwardCtx<'_>,
    trace: &mut Trace,
) -> Result<Var> {
    let gamma = bind(g, &p.gamma, ctx, trace);
    let beta = bind(g, &p.beta, ctx, trace);
    let mode = match ctx.mode {
        Mode::Train => BatchNormMode::Train,
        Mode::Eval => BatchNormMode::Eval(&p.running),
    };
    let (y, stats) = g.batch_norm(x, gamma, beta, BN_EPS, mode)?;
    trace.stats.extend(stats);
    Ok(y)
}

impl ResidualBlockParams {
    /// He-initialized convolutions, unit gammas, zero betas.
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            b1: BatchNormParams::new(channels),
            c1: he_kernel(channels, channels, rng),
            b2: BatchNormParams::new(channels),
            c2: he_kernel(channels, channels, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.c1.shape()[0]
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        ctx: &ForwardCtx<'_>,
        trace: &mut Trace,
    ) -> Result<Var> {
        let h = batch_norm(g, x, &self.b1, ctx, trace)?;
        let h = g.relu(h)?;
        let k1 = bind(g, &self.c1, ctx, trace);
        let h = g.conv2d(h, k1, 1, KERNEL / 2)?;
        let h = batch_norm(g, h, &self.b2, ctx, trace)?;
        let h = g.relu(h)?;
        let k2 = bind(g, &self.c2, ctx, trace);
        let f = g.conv2d(h, k2, 1, KERNEL / 2)?;
        let y = g.add(x, f)?;
        let sigma = if ctx.noise_active() {
            noise_std(g.value(y), ctx.noise)
        } else {
            0.0
        };
        trace.sigmas.push(sigma);
        if sigma == 0.0 {
            return Ok(y);
        }
        let xi = gaussian_sample(g.value(y).shape(), sigma, ctx.key);
        let xi = g.constant(xi);
        Ok(g.add(y, xi)?)
    }

    fn params_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.b1.gamma,
            &mut self.b1.beta,
            &mut self.c1,
            &mut self.b2.gamma,
            &mut self.b2.beta,
            &mut self.c2,
        ]
    }
}

/// Residual block forward on a plain tensor, without gradient tracking.
pub fn residual_block_forward(
    x: &Tensor,
    params: &ResidualBlockParams,
    noise: &NoiseSpec,
    key: StreamKey,
    mode: Mode,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let ctx = ForwardCtx {
        mode,
        noise,
        key,
        track_params: false,
    };
    let y = params.forward(&mut g, xv, &ctx, &mut Trace::default())?;
    Ok(g.value(y).clone())
}

/// Shape of a TinyResNet-k.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Input `[C, H, W]`; flat feature vectors use `[D, 1, 1]`.
    pub input: [usize; 3],
    pub channels: usize,
    pub blocks: usize,
    pub classes: usize,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input.iter().any(|&d| d == 0) || self.channels == 0 || self.classes < 2 {
            return param(format!("degenerate architecture {self:?}"));
        }
        Ok(())
    }
}

/// Stem convolution, `k` residual blocks at constant width, global average
/// pooling and a dense head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyResNet {
    pub arch: ArchSpec,
    pub stem: Tensor,
    pub blocks: Vec<ResidualBlockParams>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl TinyResNet {
    pub fn init(arch: ArchSpec, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let stem = he_kernel(arch.channels, arch.input[0], rng);
        let blocks = (0..arch.blocks)
            .map(|_| ResidualBlockParams::init(arch.channels, rng))
            .collect();
        let bound = 1.0 / (arch.channels as f64).sqrt();
        let head_w = Tensor::from_fn(&[arch.channels, arch.classes], |_| {
            rng.gen_range(-bound..bound)
        });
        Ok(Self {
            arch,
            stem,
            blocks,
            head_w,
            head_b: Tensor::zeros(&[arch.classes]),
        })
    }

    /// Logits `[N, K]` of `x: [N, C, H, W]`. Block `i` draws its noise from
    /// `ctx.key.derive(i)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        ctx: &ForwardCtx<'_>,
        trace: &mut Trace,
    ) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1..] != self.arch.input {
            return param(format!(
                "input {:?} does not match [N, {:?}]",
                shape, self.arch.input
            ));
        }
        let stem = bind(g, &self.stem, ctx, trace);
        let mut h = g.conv2d(x, stem, 1, KERNEL / 2)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let block_ctx = ForwardCtx {
                key: ctx.key.derive(i as u64),
                ..*ctx
            };
            h = block.forward(g, h, &block_ctx, trace)?;
        }
        let pooled = g.global_avg_pool(h)?;
        let w = bind(g, &self.head_w, ctx, trace);
        let b = bind(g, &self.head_b, ctx, trace);
        Ok(g.dense(pooled, w, b)?)
    }

    /// Trainable tensors in forward order: stem, then per block
    /// `bn1.gamma, bn1.beta, conv1, bn2.gamma, bn2.beta, conv2`, then the head.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.stem];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.stem];
        for b in &self.blocks {
            out.extend([
                &b.b1.gamma,
                &b.b1.beta,
                &b.c1,
                &b.b2.gamma,
                &b.b2.beta,
                &b.c2,
            ]);
        }
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn num_batch_norms(&self) -> usize {
        2 * self.blocks.len()
    }

    /// Folds training-mode batch statistics (forward order) into the running
    /// statistics.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        if stats.len() != self.num_batch_norms() {
            return param(format!(
                "expected {} batch statistics, got {}",
                self.num_batch_norms(),
                stats.len()
            ));
        }
        for (b, s) in self.blocks.iter_mut().zip(stats.chunks(2)) {
            b.b1.running.update(&s[0], BN_MOMENTUM);
            b.b2.running.update(&s[1], BN_MOMENTUM);
        }
        Ok(())
    }

    /// Every tensor needed to reproduce the network, keyed by a stable name.
    pub fn named_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = vec![("stem.kernel".to_string(), self.stem.clone())];
        for (i, b) in self.blocks.iter().enumerate() {
            for (j, bn, conv) in [(1, &b.b1, &b.c1), (2, &b.b2, &b.c2)] {
                let c = bn.running.mean.len();
                out.push((format!("block{i}.bn{j}.gamma"), bn.gamma.clone()));
                out.push((format!("block{i}.bn{j}.beta"), bn.beta.clone()));
                out.push((
                    format!("block{i}.bn{j}.running_mean"),
                    Tensor::new(&[c], bn.running.mean.clone())?,
                ));
                out.push((
                    format!("block{i}.bn{j}.running_var"),
                    Tensor::new(&[c], bn.running.var.clone())?,
                ));
                out.push((format!("block{i}.conv{j}.kernel"), conv.clone()));
            }
        }
        out.push(("head.weight".to_string(), self.head_w.clone()));
        out.push(("head.bias".to_string(), self.head_b.clone()));
        Ok(out)
    }

    /// Rebuilds a network from [`TinyResNet::named_tensors`] output.
    pub fn from_named_tensors(
        arch: ArchSpec,
        lookup: &mut dyn FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        arch.validate()?;
        let mut get = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = lookup(&name).ok_or_else(|| {
                crate::error::ModelError::Parameter(format!("missing tensor {name}"))
            })?;
            if t.shape() != shape {
                return param(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                ));
            }
            Ok(t)
        };
        let (c, k) = (arch.channels, arch.classes);
        let stem = get("stem.kernel".into(), &[c, arch.input[0], KERNEL, KERNEL])?;
        let mut blocks = Vec::with_capacity(arch.blocks);
        for i in 0..arch.blocks {
            let mut bn = |j: usize| -> Result<BatchNormParams> {
                Ok(BatchNormParams {
                    gamma: get(format!("block{i}.bn{j}.gamma"), &[c])?,
                    beta: get(format!("block{i}.bn{j}.beta"), &[c])?,
                    running: RunningStats {
                        mean: get(format!("block{i}.bn{j}.running_mean"), &[c])?.into_data(),
                        var: get(format!("block{i}.bn{j}.running_var"), &[c])?.into_data(),
                    },
                })
            };
            let b1 = bn(1)?;
            let b2 = bn(2)?;
            let c1 = get(format!("block{i}.conv1.kernel"), &[c, c, KERNEL, KERNEL])?;
            let c2 = get(format!("block{i}.conv2.kernel"), &[c, c, KERNEL, KERNEL])?;
            blocks.push(ResidualBlockParams { b1, c1, b2, c2 });
        }
        let head_w = get("head.weight".into(), &[c, k])?;
        let head_b = get("head.bias".into(), &[k])?;
        Ok(Self {
            arch,
            stem,
            blocks,
            head_w,
            head_b,
        })
    }
}
