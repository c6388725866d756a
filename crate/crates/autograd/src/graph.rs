//! The tape: every op appends a node holding its value and whatever its
//! backward pass needs. Nodes are only ever appended, so index order is a
//! topological order and backward walks it in reverse.

use serde::{Deserialize, Serialize};

use crate::error::{param, AutogradError, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-normalization statistics carried between forward passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_MOMENTUM: f64 = 0.1;

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average with the unbiased batch variance.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        let m = batch.count as f64;
        let correction = if batch.count > 1 { m / (m - 1.0) } else { 1.0 };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * batch.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * batch.var[c] * correction;
        }
    }
}

/// Per-channel mean and biased variance of one training-mode batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    Train,
    Eval(&'a RunningStats),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv {
        x: Var,
        k: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Relu(_) => "relu",
            Op::Dense { .. } => "dense",
            Op::Conv { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Reshape(_) => "reshape",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Accumulated gradients of leaf nodes, indexed by [`Var`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn accumulate(&mut self, v: Var, shape: &[usize], g: Vec<f64>) {
        if self.grads.len() <= v.0 {
            self.grads.resize(v.0 + 1, None);
        }
        match &mut self.grads[v.0] {
            Some(t) => t.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(Tensor::new(shape, g).expect("gradient matches node shape")),
        }
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return param(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AutogradError::NonFinite { op })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A tracked input; backward reports its gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op.name(), &data)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op.name(), ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape().to_vec();
        self.push(&shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| c * x).collect();
        let shape = t.shape().to_vec();
        self.push(&shape, data, Op::Scale(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(&[], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return param("mean of an empty tensor");
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(&[], vec![s], Op::Mean(a), &[a])
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let shape = t.shape().to_vec();
        self.push(&shape, data, Op::Relu(a), &[a])
    }

    /// `x·w + b` for `x: [N, D]`, `w: [D, K]`, `b: [K]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (&[n, d], &[d2, k], &[k2]) = (tx.shape(), tw.shape(), tb.shape()) else {
            return param(format!(
                "dense expects x [N,D], w [D,K], b [K]; got {:?}, {:?}, {:?}",
                tx.shape(),
                tw.shape(),
                tb.shape()
            ));
        };
        if d != d2 || k != k2 {
            return param(format!(
                "dense: x {:?}, w {:?}, b {:?} do not chain",
                tx.shape(),
                tw.shape(),
                tb.shape()
            ));
        }
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend_from_slice(tb.data());
        }
        kernels::gemm(n, d, k, tx.data(), false, tw.data(), false, 1.0, &mut out);
        self.push(&[n, k], out, Op::Dense { x, w, b }, &[x, w, b])
    }

    /// Cross-correlation of `x: [N, C, H, W]` with `kernel: [F, C, kh, kw]`
    /// (odd kernel sides) after zero padding of width `padding`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let (&[n, c, h, w], &[f, c2, kh, kw]) = (tx.shape(), tk.shape()) else {
            return param(format!(
                "conv2d expects rank-4 input and kernel, got {:?} and {:?}",
                tx.shape(),
                tk.shape()
            ));
        };
        if c != c2 {
            return param(format!(
                "conv2d: input has {c} channels, kernel expects {c2}"
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return param(format!("conv2d: kernel sides must be odd, got {kh}x{kw}"));
        }
        if stride == 0 {
            return param("conv2d: stride must be positive");
        }
        let (span_h, span_w) = (h + 2 * padding, w + 2 * padding);
        if span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0
        {
            return param(format!(
                "conv2d: {h}x{w} input with padding {padding}, stride {stride} and {kh}x{kw} kernel has no integral output size"
            ));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (span_h - kh) / stride + 1,
            wo: (span_w - kw) / stride + 1,
        };
        let (out, cols) = kernels::conv_forward(&geom, tx.data(), tk.data());
        self.push(
            &[n, f, geom.ho, geom.wo],
            out,
            Op::Conv {
                x,
                k: kernel,
                geom,
                cols,
            },
            &[x, kernel],
        )
    }

    /// Per-channel normalization of `x: [N, C, H, W]`. Training mode also
    /// returns the batch statistics so the caller can update its
    /// [`RunningStats`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let &[n, c, h, w] = tx.shape() else {
            return param(format!(
                "batchnorm2d expects [N,C,H,W], got {:?}",
                tx.shape()
            ));
        };
        if tg.shape() != [c] || tb.shape() != [c] {
            return param(format!(
                "batchnorm2d: gamma {:?} and beta {:?} must be [{c}]",
                tg.shape(),
                tb.shape()
            ));
        }
        if !(eps >= 0.0) {
            return param(format!("batchnorm2d: eps must be >= 0, got {eps}"));
        }
        let hw = h * w;
        let count = n * hw;
        let xs = tx.data();
        let (mean, var, train) = match mode {
            BatchNormMode::Train => {
                if count < 2 {
                    return Err(AutogradError::DegenerateBatch { per_channel: count });
                }
                let mean: Vec<f64> = kernels::channel_sums(xs, n, c, hw)
                    .iter()
                    .map(|s| s / count as f64)
                    .collect();
                let mut var = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        var[ch] += xs[base..base + hw]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                (mean, var, true)
            }
            BatchNormMode::Eval(stats) => {
                if stats.mean.len() != c || stats.var.len() != c {
                    return param(format!(
                        "batchnorm2d: running stats have {} channels, input {c}",
                        stats.mean.len()
                    ));
                }
                (stats.mean.clone(), stats.var.clone(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        check_finite("batchnorm2d", &inv_std)?;
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for p in base..base + hw {
                    xhat[p] = (xs[p] - mean[ch]) * inv_std[ch];
                    out[p] = tg.data()[ch] * xhat[p] + tb.data()[ch];
                }
            }
        }
        let shape = tx.shape().to_vec();
        let stats = train.then(|| BatchStats { mean, var, count });
        let v = self.push(
            &shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, stats))
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let &[n, c, h, w] = t.shape() else {
            return param(format!(
                "global_avg_pool expects [N,C,H,W], got {:?}",
                t.shape()
            ));
        };
        let hw = h * w;
        let out = t
            .data()
            .chunks(hw.max(1))
            .map(|s| s.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(&[n, c], out, Op::GlobalAvgPool(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return param(format!("cannot reshape {:?} into {shape:?}", t.shape()));
        }
        let data = t.data().to_vec();
        self.push(shape, data, Op::Reshape(x), &[x])
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let &[n, k] = t.shape() else {
            return param(format!(
                "cross_entropy expects [N,K] logits, got {:?}",
                t.shape()
            ));
        };
        if labels.len() != n {
            return param(format!(
                "cross_entropy: {n} rows but {} labels",
                labels.len()
            ));
        }
        if n == 0 {
            return param("cross_entropy of an empty batch");
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return param(format!("label {bad} outside 0..{k}"));
        }
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for (i, row) in t.data().chunks(k).enumerate() {
            let (nll, p) = softmax_nll(row, labels[i]);
            probs[i * k..(i + 1) * k].copy_from_slice(&p);
            total += nll;
        }
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(&[], vec![total / n as f64], op, &[logits])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut grads = Gradients::new();
        self.backward_into(loss, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Graph::backward`], adding into existing gradients.
    pub fn backward_into(&self, loss: Var, grads: &mut Gradients) -> Result<()> {
        let t = self.value(loss);
        if t.numel() != 1 {
            return param(format!(
                "backward needs a scalar loss, got shape {:?}",
                t.shape()
            ));
        }
        self.vjp_into(loss, &Tensor::full(t.shape(), 1.0), grads)
    }

    /// Vector-Jacobian product of a node of any shape with `cotangent`.
    pub fn vjp(&self, root: Var, cotangent: &Tensor) -> Result<Gradients> {
        let mut grads = Gradients::new();
        self.vjp_into(root, cotangent, &mut grads)?;
        Ok(grads)
    }

    pub fn vjp_into(&self, root: Var, cotangent: &Tensor, out: &mut Gradients) -> Result<()> {
        same_shape("vjp", self.value(root), cotangent)?;
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        pending[root.0] = Some(cotangent.data().to_vec());
        for i in (0..=root.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            check_finite("backward", &g)?;
            if let Op::Leaf = node.op {
                out.accumulate(Var(i), node.value.shape(), g);
                continue;
            }
            self.propagate(&node.op, &node.value, g, &mut pending)?;
        }
        Ok(())
    }

    fn send(&self, pending: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut pending[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(
        &self,
        op: &Op,
        value: &Tensor,
        g: Vec<f64>,
        pending: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.send(pending, *b, g.clone());
                self.send(pending, *a, g);
            }
            Op::Sub(a, b) => {
                self.send(pending, *b, g.iter().map(|v| -v).collect());
                self.send(pending, *a, g);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.send(pending, *a, g.iter().zip(tb).map(|(d, y)| d * y).collect());
                }
                if self.wants(*b) {
                    self.send(pending, *b, g.iter().zip(ta).map(|(d, x)| d * x).collect());
                }
            }
            Op::Scale(a, c) => self.send(pending, *a, g.iter().map(|d| c * d).collect()),
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.send(pending, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.send(pending, *a, vec![g[0] / n as f64; n]);
            }
            Op::Relu(a) => {
                let xs = self.value(*a).data();
                self.send(
                    pending,
                    *a,
                    g.iter()
                        .zip(xs)
                        .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                        .collect(),
                );
            }
            Op::Dense { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, d) = (tx.shape()[0], tx.shape()[1]);
                let k = tw.shape()[1];
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * d];
                    kernels::gemm(n, k, d, &g, false, tw.data(), true, 0.0, &mut dx);
                    self.send(pending, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; d * k];
                    kernels::gemm(d, n, k, tx.data(), true, &g, false, 0.0, &mut dw);
                    self.send(pending, *w, dw);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k];
                    for row in g.chunks(k) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    self.send(pending, *b, db);
                }
            }
            Op::Conv { x, k, geom, cols } => {
                let (dx, dk) =
                    kernels::conv_backward(geom, cols, self.value(*k).data(), &g, self.wants(*x));
                if self.wants(*k) {
                    self.send(pending, *k, dk);
                }
                if self.wants(*x) {
                    self.send(pending, *x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = value.shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let m = (n * hw) as f64;
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for p in base..base + hw {
                            dbeta[ch] += g[p];
                            dgamma[ch] += g[p] * xhat[p];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            let s = gm[ch] * inv_std[ch];
                            for p in base..base + hw {
                                dx[p] = if *train {
                                    s * (g[p] - dbeta[ch] / m - xhat[p] * dgamma[ch] / m)
                                } else {
                                    s * g[p]
                                };
                            }
                        }
                    }
                    self.send(pending, *x, dx);
                }
                self.send(pending, *gamma, dgamma);
                self.send(pending, *beta, dbeta);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                let hw = s[2] * s[3];
                let mut dx = Vec::with_capacity(g.len() * hw);
                for d in &g {
                    dx.extend(std::iter::repeat(d / hw as f64).take(hw));
                }
                self.send(pending, *x, dx);
            }
            Op::Reshape(x) => self.send(pending, *x, g),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.value(*logits).shape()[1];
                let n = labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| g[0] * p / n).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= g[0] / n;
                }
                self.send(pending, *logits, d);
            }
        }
        Ok(())
    }
}

/// `(−log softmax(z)[label], softmax(z))`, stabilized by max subtraction.
/// After the shift the arg-max term is exactly 1, so the log-sum uses
/// `ln_1p` of the remaining terms and the loss keeps full relative precision
/// for confident rows.
pub fn softmax_nll(z: &[f64], label: usize) -> (f64, Vec<f64>) {
    let (arg, m) =
        z.iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(ai, am), (i, v)| {
                if v > am {
                    (i, v)
                } else {
                    (ai, am)
                }
            });
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let rest: f64 = e
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, v)| v)
        .sum();
    let s = 1.0 + rest;
    (
        (m - z[label]) + rest.ln_1p(),
        e.into_iter().map(|v| v / s).collect(),
    )
}
