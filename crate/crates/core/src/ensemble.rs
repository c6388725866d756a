//! Weighted logit ensembles of noise-injected networks.
//!
//! Members are kept sorted by `stream_id`, which is also the index used to
//! derive each member's noise key from the forward key. The weighted sum runs
//! in that order, so the result does not depend on the order the members were
//! supplied in.

use autograd::{softmax_nll, BatchStats, Graph, StreamKey, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{param, ModelError, Result};
use crate::network::{ArchSpec, ForwardCtx, Mode, TinyResNet, Trace};
use crate::noise::NoiseSpec;

pub const WEIGHT_TOLERANCE: f64 = 1e-12;
pub const DEFAULT_WEIGHT_LR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub net: TinyResNet,
    pub noise: NoiseSpec,
    pub stream_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemberSpec {
    pub arch: ArchSpec,
    pub noise: NoiseSpec,
    pub stream_id: u64,
}

/// Text description of a model: everything but the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub members: Vec<MemberSpec>,
    pub weights: Vec<f64>,
}

impl ModelSpec {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| ModelError::Parameter(format!("model spec: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnResNetModel {
    members: Vec<Member>,
    weights: Vec<f64>,
}

/// Graph handles produced by [`EnResNetModel::forward`].
#[derive(Debug)]
pub struct EnsembleTrace {
    pub logits: Var,
    pub member_logits: Vec<Var>,
    pub members: Vec<Trace>,
}

impl EnsembleTrace {
    /// All tracked parameter vars, in [`EnResNetModel::params_mut`] order.
    pub fn params(&self) -> Vec<Var> {
        self.members
            .iter()
            .flat_map(|t| t.params.iter().copied())
            .collect()
    }

    pub fn stats(&self) -> Vec<Vec<BatchStats>> {
        self.members.iter().map(|t| t.stats.clone()).collect()
    }
}

fn check_weights(w: &[f64], n: usize) -> Result<()> {
    if w.len() != n {
        return param(format!("{} weights for {n} members", w.len()));
    }
    if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return param(format!("weights must be finite and nonnegative, got {w:?}"));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > WEIGHT_TOLERANCE {
        return param(format!("weights must sum to 1, got {s}"));
    }
    Ok(())
}

impl EnResNetModel {
    pub fn new(members: Vec<Member>, weights: Vec<f64>) -> Result<Self> {
        if members.is_empty() {
            return param("an ensemble needs at least one member");
        }
        check_weights(&weights, members.len())?;
        let first = members[0].net.arch;
        for m in &members {
            m.noise.validate()?;
            if m.net.arch.input != first.input || m.net.arch.classes != first.classes {
                return param(format!(
                    "member shapes differ: {:?} vs {:?}",
                    m.net.arch, first
                ));
            }
        }
        let mut paired: Vec<(Member, f64)> = members.into_iter().zip(weights).collect();
        paired.sort_by_key(|(m, _)| m.stream_id);
        if paired
            .windows(2)
            .any(|p| p[0].0.stream_id == p[1].0.stream_id)
        {
            return param("member stream ids must be distinct");
        }
        let (members, weights) = paired.into_iter().unzip();
        Ok(Self { members, weights })
    }

    /// Equal weights `1/N`.
    pub fn uniform(members: Vec<Member>) -> Result<Self> {
        let n = members.len();
        Self::new(members, vec![1.0 / n as f64; n])
    }

    /// `n` freshly initialized members with stream ids `0..n`, each seeded
    /// from `key.derive(id)`.
    pub fn init(n: usize, arch: ArchSpec, noise: NoiseSpec, key: StreamKey) -> Result<Self> {
        let members = (0..n as u64)
            .map(|id| {
                let net = TinyResNet::init(arch, &mut key.derive(id).rng())?;
                Ok(Member {
                    net,
                    noise,
                    stream_id: id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::uniform(members)
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [Member] {
        &mut self.members
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        check_weights(&weights, self.members.len())?;
        self.weights = weights;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.members[0].net.arch.input
    }

    pub fn classes(&self) -> usize {
        self.members[0].net.arch.classes
    }

    /// Whether a forward pass in `mode` samples noise.
    pub fn is_stochastic(&self, mode: Mode) -> bool {
        self.members
            .iter()
            .any(|m| m.noise.is_stochastic() && (mode == Mode::Train || m.noise.active_in_eval))
    }

    /// `Σ_k w_k · logits_k(x)`, member `k` keyed by `key.derive(stream_id_k)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        key: StreamKey,
        track_params: bool,
    ) -> Result<EnsembleTrace> {
        let mut member_logits = Vec::with_capacity(self.members.len());
        let mut traces = Vec::with_capacity(self.members.len());
        let mut acc: Option<Var> = None;
        for (m, &w) in self.members.iter().zip(&self.weights) {
            let ctx = ForwardCtx {
                mode,
                noise: &m.noise,
                key: key.derive(m.stream_id),
                track_params,
            };
            let mut trace = Trace::default();
            let z = m.net.forward(g, x, &ctx, &mut trace)?;
            let scaled = g.scale(z, w)?;
            acc = Some(match acc {
                None => scaled,
                Some(a) => g.add(a, scaled)?,
            });
            member_logits.push(z);
            traces.push(trace);
        }
        let logits = acc.expect("ensemble is non-empty");
        Ok(EnsembleTrace {
            logits,
            member_logits,
            members: traces,
        })
    }

    /// Ensemble logits of `x` without gradient tracking.
    pub fn logits(&self, x: &Tensor, mode: Mode, key: StreamKey) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let t = self.forward(&mut g, xv, mode, key, false)?;
        Ok(g.value(t.logits).clone())
    }

    /// Each member's own logits, in member order.
    pub fn member_logits(&self, x: &Tensor, mode: Mode, key: StreamKey) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let t = self.forward(&mut g, xv, mode, key, false)?;
        Ok(t.member_logits
            .iter()
            .map(|&v| g.value(v).clone())
            .collect())
    }

    /// Trainable tensors of all members, member-major.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.members
            .iter_mut()
            .flat_map(|m| m.net.params_mut())
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.members.iter().flat_map(|m| m.net.params()).collect()
    }

    pub fn update_running_stats(&mut self, stats: &[Vec<BatchStats>]) -> Result<()> {
        if stats.len() != self.members.len() {
            return param(format!(
                "{} stat groups for {} members",
                stats.len(),
                self.members.len()
            ));
        }
        for (m, s) in self.members.iter_mut().zip(stats) {
            m.net.update_running_stats(s)?;
        }
        Ok(())
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            members: self
                .members
                .iter()
                .map(|m| MemberSpec {
                    arch: m.net.arch,
                    noise: m.noise,
                    stream_id: m.stream_id,
                })
                .collect(),
            weights: self.weights.clone(),
        }
    }

    /// All tensors, names prefixed by `member{k}.`.
    pub fn named_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::new();
        for (k, m) in self.members.iter().enumerate() {
            for (name, t) in m.net.named_tensors()? {
                out.push((format!("member{k}.{name}"), t));
            }
        }
        Ok(out)
    }

    /// Inverse of [`EnResNetModel::spec`] plus [`EnResNetModel::named_tensors`].
    pub fn from_parts(
        spec: &ModelSpec,
        lookup: &mut dyn FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let mut members = Vec::with_capacity(spec.members.len());
        for (k, ms) in spec.members.iter().enumerate() {
            let prefix = format!("member{k}.");
            let net = TinyResNet::from_named_tensors(ms.arch, &mut |name| {
                lookup(&format!("{prefix}{name}"))
            })?;
            members.push(Member {
                net,
                noise: ms.noise,
                stream_id: ms.stream_id,
            });
        }
        Self::new(members, spec.weights.clone())
    }
}

/// `Σ_k w_k · z_k`, accumulated in the order given.
pub fn combine_logits(member_logits: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    if member_logits.is_empty() || member_logits.len() != weights.len() {
        return param(format!(
            "{} member logits for {} weights",
            member_logits.len(),
            weights.len()
        ));
    }
    let shape = member_logits[0].shape();
    let mut acc = Tensor::zeros(shape);
    for (k, (z, &w)) in member_logits.iter().zip(weights).enumerate() {
        if z.shape() != shape {
            return param(format!("member logits {:?} vs {:?}", z.shape(), shape));
        }
        if k == 0 {
            acc.data_mut()
                .iter_mut()
                .zip(z.data())
                .for_each(|(a, v)| *a = w * v);
        } else {
            acc.data_mut()
                .iter_mut()
                .zip(z.data())
                .for_each(|(a, v)| *a += w * v);
        }
    }
    Ok(acc)
}

fn check_member_logits(member_logits: &[Tensor], labels: &[usize], w: &[f64]) -> Result<usize> {
    if member_logits.len() != w.len() || w.is_empty() {
        return param(format!(
            "{} member logits for {} weights",
            member_logits.len(),
            w.len()
        ));
    }
    let &[n, k] = member_logits[0].shape() else {
        return param(format!(
            "member logits must be [N,K], got {:?}",
            member_logits[0].shape()
        ));
    };
    if labels.len() != n {
        return param(format!("{n} rows but {} labels", labels.len()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return param(format!("label {l} outside 0..{k}"));
    }
    Ok(k)
}

/// Total (summed over the batch) cross-entropy of the weighted ensemble.
pub fn ensemble_loss(member_logits: &[Tensor], labels: &[usize], w: &[f64]) -> Result<f64> {
    let k = check_member_logits(member_logits, labels, w)?;
    let z = combine_logits(member_logits, w)?;
    Ok(z.data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &t)| softmax_nll(row, t).0)
        .sum())
}

/// `∂L/∂w_k = −Σ_i (y_i^{k,t_i} − Σ_j y_i^{k,j} · softmax(Σ_m w_m y_i^m)_j)`
/// for the total cross-entropy `L` of [`ensemble_loss`].
pub fn ensemble_weight_grads(
    member_logits: &[Tensor],
    labels: &[usize],
    w: &[f64],
) -> Result<Vec<f64>> {
    let k = check_member_logits(member_logits, labels, w)?;
    let z = combine_logits(member_logits, w)?;
    let mut grads = vec![0.0; w.len()];
    for (i, (row, &t)) in z.data().chunks(k).zip(labels).enumerate() {
        let (_, p) = softmax_nll(row, t);
        for (g, y) in grads.iter_mut().zip(member_logits) {
            let yi = &y.data()[i * k..(i + 1) * k];
            let expected: f64 = yi.iter().zip(&p).map(|(a, b)| a * b).sum();
            *g -= yi[t] - expected;
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeightState {
    pub w: Vec<f64>,
    pub lr_w: f64,
}

impl EnsembleWeightState {
    pub fn uniform(n: usize, lr_w: f64) -> Self {
        Self {
            w: vec![1.0 / n as f64; n],
            lr_w,
        }
    }
}

/// Projected gradient step: `w − lr_w·g`, clamped at 0 and renormalized;
/// uniform if everything clamps to 0.
pub fn update_ensemble_weights(
    state: &EnsembleWeightState,
    grads: &[f64],
) -> Result<EnsembleWeightState> {
    if grads.len() != state.w.len() || state.w.is_empty() {
        return param(format!(
            "{} gradients for {} weights",
            grads.len(),
            state.w.len()
        ));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return param("non-finite ensemble weight gradient");
    }
    let mut w: Vec<f64> = state
        .w
        .iter()
        .zip(grads)
        .map(|(w, g)| (w - state.lr_w * g).max(0.0))
        .collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|v| *v /= total);
    } else {
        let n = w.len() as f64;
        w.iter_mut().for_each(|v| *v = 1.0 / n);
    }
    Ok(EnsembleWeightState {
        w,
        lr_w: state.lr_w,
    })
}

/// Flat ensemble of every member of `models`; member `k` of model `j` gets
/// weight `weights[j] · w_{j,k}`. Stream ids are renumbered consecutively in
/// model order.
pub fn integrate_separate(models: &[EnResNetModel], weights: &[f64]) -> Result<EnResNetModel> {
    if models.is_empty() {
        return param("nothing to integrate");
    }
    check_weights(weights, models.len())?;
    let (input, classes) = (models[0].input_shape(), models[0].classes());
    let mut members = Vec::new();
    let mut member_weights = Vec::new();
    for (model, &wj) in models.iter().zip(weights) {
        if model.input_shape() != input || model.classes() != classes {
            return param(format!(
                "cannot integrate input {:?}/{} classes with {:?}/{}",
                model.input_shape(),
                model.classes(),
                input,
                classes
            ));
        }
        for (m, &wk) in model.members.iter().zip(&model.weights) {
            members.push(Member {
                stream_id: members.len() as u64,
                ..m.clone()
            });
            member_weights.push(wj * wk);
        }
    }
    // Products of simplex weights can miss 1 by an ulp or two.
    let total: f64 = member_weights.iter().sum();
    member_weights.iter_mut().for_each(|v| *v /= total);
    EnResNetModel::new(members, member_weights)
}
