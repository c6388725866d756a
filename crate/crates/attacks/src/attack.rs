use autograd::{adam_step, uniform_sample, AdamConfig, AdamState, StreamKey, Tensor};
use serde::{Deserialize, Serialize};

use crate::classifier::{least_likely, loss_gradient, predict, Classifier};
use crate::error::{param, Result};

/// Inward squeeze that keeps `atanh(2x − 1)` finite.
pub const CW_SQUEEZE: f64 = 1e-6;
/// Temperature of the log-sum-exp surrogate of the ℓ∞ distance.
pub const CW_TEMPERATURE: f64 = 1e-3;

/// Stream index reserved for the forward pass that fills the success mask.
const CHECK_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Ifgsm,
    Cw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub alpha: f64,
    pub iters: usize,
    pub cw_c: f64,
    pub cw_kappa: f64,
    pub cw_steps: usize,
    pub cw_lr: f64,
    /// Gradient samples per step against stochastic models.
    pub eot_runs: usize,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            kind: AttackKind::Ifgsm,
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            iters: 20,
            cw_c: 10.0,
            cw_kappa: 0.0,
            cw_steps: 50,
            cw_lr: 6e-4,
            eot_runs: 5,
        }
    }
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon,
            ..Self::default()
        }
    }

    pub fn ifgsm(epsilon: f64, alpha: f64, iters: usize) -> Self {
        Self {
            kind: AttackKind::Ifgsm,
            epsilon,
            alpha,
            iters,
            ..Self::default()
        }
    }

    pub fn cw() -> Self {
        Self {
            kind: AttackKind::Cw,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return param(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            ));
        }
        if self.eot_runs == 0 {
            return param("eot_runs must be >= 1");
        }
        match self.kind {
            AttackKind::Fgsm => {}
            AttackKind::Ifgsm => {
                if !(self.alpha > 0.0 && self.alpha.is_finite()) {
                    return param(format!("alpha must be > 0, got {}", self.alpha));
                }
                if self.iters == 0 {
                    return param("iters must be >= 1");
                }
            }
            AttackKind::Cw => {
                if !(self.cw_c >= 0.0 && self.cw_kappa >= 0.0 && self.cw_lr > 0.0) {
                    return param(format!(
                        "cw needs c >= 0, kappa >= 0, lr > 0; got {}, {}, {}",
                        self.cw_c, self.cw_kappa, self.cw_lr
                    ));
                }
            }
        }
        Ok(())
    }

    /// Short label used in reports, e.g. `ifgsm20`.
    pub fn label(&self) -> String {
        match self.kind {
            AttackKind::Fgsm => "fgsm".to_string(),
            AttackKind::Ifgsm => format!("ifgsm{}", self.iters),
            AttackKind::Cw => "cw".to_string(),
        }
    }

    fn runs_for(&self, model: &dyn Classifier) -> usize {
        if model.is_stochastic() {
            self.eot_runs
        } else {
            1
        }
    }
}

/// Adversarial inputs and, per example, whether the attack reached its goal:
/// misclassification for untargeted attacks, the target class for targeted ones.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch {
    pub x_adv: Tensor,
    pub success: Vec<bool>,
}

/// Mean of `runs` input gradients of the summed cross-entropy. Run 0 uses
/// `key`, run `r > 0` uses `key.derive(r)`; deterministic models take one pass.
pub fn eot_gradient(
    model: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    runs: usize,
    key: StreamKey,
) -> Result<Tensor> {
    if runs == 0 {
        return param("eot_gradient needs at least one run");
    }
    let first = loss_gradient(model, x, labels, key)?;
    if runs == 1 || !model.is_stochastic() {
        return Ok(first);
    }
    let mut acc = first;
    for r in 1..runs as u64 {
        acc.add_scaled(&loss_gradient(model, x, labels, key.derive(r))?, 1.0)?;
    }
    let inv = 1.0 / runs as f64;
    acc.data_mut().iter_mut().for_each(|v| *v *= inv);
    Ok(acc)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_input(x: &Tensor, labels: &[usize]) -> Result<()> {
    let n = x.shape().first().copied().unwrap_or(0);
    if labels.len() != n {
        return param(format!("{n} inputs but {} labels", labels.len()));
    }
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return param("inputs must lie in [0, 1]");
    }
    Ok(())
}

fn untargeted_success(
    model: &dyn Classifier,
    x_adv: &Tensor,
    labels: &[usize],
    key: StreamKey,
) -> Result<Vec<bool>> {
    let pred = predict(&model.logits(x_adv, key.derive(CHECK_STREAM))?)?;
    Ok(pred.iter().zip(labels).map(|(p, y)| p != y).collect())
}

/// `x' = clamp(x + ε·sign(∇ₓL), 0, 1)`, gradient from [`eot_gradient`] keyed
/// by `key.derive(0)`.
pub fn fgsm(
    model: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    key: StreamKey,
) -> Result<AdversarialBatch> {
    spec.validate()?;
    check_input(x, labels)?;
    let g = eot_gradient(model, x, labels, spec.runs_for(model), key.derive(0))?;
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &d)| (v + spec.epsilon * sign(d)).clamp(0.0, 1.0))
        .collect();
    let x_adv = Tensor::new(x.shape(), data)?;
    let success = untargeted_success(model, &x_adv, labels, key)?;
    Ok(AdversarialBatch { x_adv, success })
}

/// Iterative FGSM from `start`: step `i` moves by `α·sign(∇L)` with the
/// gradient keyed by `key.derive(i)`, then clips into the ε-ball around `x`
/// intersected with `[0, 1]`.
pub fn ifgsm_from(
    model: &dyn Classifier,
    x: &Tensor,
    start: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    key: StreamKey,
) -> Result<AdversarialBatch> {
    spec.validate()?;
    check_input(x, labels)?;
    if start.shape() != x.shape() {
        return param(format!(
            "start {:?} vs input {:?}",
            start.shape(),
            x.shape()
        ));
    }
    let lo: Vec<f64> = x
        .data()
        .iter()
        .map(|v| (v - spec.epsilon).max(0.0))
        .collect();
    let hi: Vec<f64> = x
        .data()
        .iter()
        .map(|v| (v + spec.epsilon).min(1.0))
        .collect();
    let mut cur = start.clone();
    for (v, (l, h)) in cur.data_mut().iter_mut().zip(lo.iter().zip(&hi)) {
        *v = v.clamp(*l, *h);
    }
    let runs = spec.runs_for(model);
    for i in 0..spec.iters {
        let g = eot_gradient(model, &cur, labels, runs, key.derive(i as u64))?;
        for (j, v) in cur.data_mut().iter_mut().enumerate() {
            *v = (*v + spec.alpha * sign(g.data()[j])).clamp(lo[j], hi[j]);
        }
    }
    let success = untargeted_success(model, &cur, labels, key)?;
    Ok(AdversarialBatch {
        x_adv: cur,
        success,
    })
}

pub fn ifgsm(
    model: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    key: StreamKey,
) -> Result<AdversarialBatch> {
    ifgsm_from(model, x, x, labels, spec, key)
}

/// `clamp(x + U[−ε, ε], 0, 1)`.
pub fn pgd_init(x: &Tensor, epsilon: f64, key: StreamKey) -> Result<Tensor> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return param(format!("epsilon must be finite and >= 0, got {epsilon}"));
    }
    let u = uniform_sample(x.shape(), -epsilon, epsilon, key);
    let data = x
        .data()
        .iter()
        .zip(u.data())
        .map(|(a, b)| (a + b).clamp(0.0, 1.0))
        .collect();
    Ok(Tensor::new(x.shape(), data)?)
}

/// `τ·log Σ_j (e^{δ_j/τ} + e^{−δ_j/τ})` and its gradient.
fn smooth_linf(delta: &[f64], tau: f64) -> (f64, Vec<f64>) {
    let m = delta.iter().fold(0.0f64, |a, d| a.max(d.abs())) / tau;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(delta.len());
    for &d in delta {
        let (p, q) = ((d / tau - m).exp(), (-d / tau - m).exp());
        total += p + q;
        grad.push(p - q);
    }
    grad.iter_mut().for_each(|g| *g /= total);
    (tau * (m + total.ln()), grad)
}

/// `max(−κ, max_{i≠t} z_i − z_t)` and its subgradient in `z`.
fn hinge(z: &[f64], t: usize, kappa: f64) -> (f64, Vec<f64>) {
    let mut other = usize::MAX;
    for (j, &v) in z.iter().enumerate() {
        if j != t && (other == usize::MAX || v > z[other]) {
            other = j;
        }
    }
    let gap = z[other] - z[t];
    let mut g = vec![0.0; z.len()];
    if gap > -kappa {
        g[other] = 1.0;
        g[t] = -1.0;
        (gap, g)
    } else {
        (-kappa, g)
    }
}

/// Targeted Carlini-Wagner attack with an ℓ∞ distance:
/// minimize `‖x_c − x‖∞ + c·max(−κ, max_{i≠t} Z_i − Z_t)` over
/// `x_c = ½(tanh v + 1)` by Adam, keeping each example's best objective.
pub fn cw(
    model: &dyn Classifier,
    x: &Tensor,
    targets: &[usize],
    spec: &AttackSpec,
    key: StreamKey,
) -> Result<AdversarialBatch> {
    spec.validate()?;
    check_input(x, targets)?;
    let n = targets.len();
    let k = model.num_classes();
    if let Some(&t) = targets.iter().find(|&&t| t >= k) {
        return param(format!("target {t} outside 0..{k}"));
    }
    let d = if n == 0 { 0 } else { x.numel() / n };
    let x0: Vec<f64> = x
        .data()
        .iter()
        .map(|v| v.clamp(CW_SQUEEZE, 1.0 - CW_SQUEEZE))
        .collect();
    let mut v = Tensor::new(
        x.shape(),
        x0.iter().map(|p| (2.0 * p - 1.0).atanh()).collect(),
    )?;
    let mut adam = AdamState::default();
    let runs = spec.runs_for(model);

    let mut best = Tensor::new(x.shape(), x0.clone())?;
    let mut best_obj = vec![f64::INFINITY; n];
    for step in 0..=spec.cw_steps {
        let xc = Tensor::new(
            x.shape(),
            v.data().iter().map(|u| 0.5 * (u.tanh() + 1.0)).collect(),
        )?;
        let mut hinge_value = vec![0.0; n];
        let mut grad_x = Tensor::zeros(x.shape());
        for r in 0..runs as u64 {
            let run_key = if r == 0 {
                key.derive(step as u64)
            } else {
                key.derive(step as u64).derive(r)
            };
            let mut cot = |z: &Tensor| -> Result<Tensor> {
                let mut c = vec![0.0; n * k];
                for (i, row) in z.data().chunks(k).enumerate() {
                    let (h, g) = hinge(row, targets[i], spec.cw_kappa);
                    hinge_value[i] += h / runs as f64;
                    for (cj, gj) in c[i * k..(i + 1) * k].iter_mut().zip(g) {
                        *cj = spec.cw_c * gj / runs as f64;
                    }
                }
                Ok(Tensor::new(&[n, k], c)?)
            };
            let (_, gx) = model.logits_vjp(&xc, run_key, &mut cot)?;
            grad_x.add_scaled(&gx, 1.0)?;
        }
        for i in 0..n {
            let delta: Vec<f64> = (i * d..(i + 1) * d).map(|j| xc.data()[j] - x0[j]).collect();
            let (dist, dgrad) = smooth_linf(&delta, CW_TEMPERATURE);
            let obj = dist + spec.cw_c * hinge_value[i];
            if obj < best_obj[i] {
                best_obj[i] = obj;
                best.data_mut()[i * d..(i + 1) * d].copy_from_slice(&xc.data()[i * d..(i + 1) * d]);
            }
            for (j, g) in dgrad.into_iter().enumerate() {
                grad_x.data_mut()[i * d + j] += g;
            }
        }
        if step == spec.cw_steps {
            break;
        }
        let grad_v: Vec<f64> = grad_x
            .data()
            .iter()
            .zip(v.data())
            .map(|(g, u)| g * 0.5 * (1.0 - u.tanh().powi(2)))
            .collect();
        let grad_v = Tensor::new(x.shape(), grad_v)?;
        adam_step(
            std::slice::from_mut(&mut v),
            &[grad_v],
            &mut adam,
            spec.cw_lr,
            AdamConfig::default(),
        )?;
    }
    let pred = predict(&model.logits(&best, key.derive(CHECK_STREAM))?)?;
    let success = pred.iter().zip(targets).map(|(p, t)| p == t).collect();
    Ok(AdversarialBatch {
        x_adv: best,
        success,
    })
}

/// Least-likely class of each example under the model's logits at `x`.
pub fn least_likely_targets(
    model: &dyn Classifier,
    x: &Tensor,
    key: StreamKey,
) -> Result<Vec<usize>> {
    least_likely(&model.logits(x, key)?)
}

/// Runs the attack named by `spec`. C&W targets the least-likely class and
/// reports success as misclassification of the true label.
pub fn run_attack(
    model: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    key: StreamKey,
) -> Result<AdversarialBatch> {
    match spec.kind {
        AttackKind::Fgsm => fgsm(model, x, labels, spec, key),
        AttackKind::Ifgsm => ifgsm(model, x, labels, spec, key),
        AttackKind::Cw => {
            check_input(x, labels)?;
            let targets = least_likely_targets(model, x, key.derive(CHECK_STREAM - 1))?;
            let out = cw(model, x, &targets, spec, key)?;
            let success = untargeted_success(model, &out.x_adv, labels, key)?;
            Ok(AdversarialBatch { success, ..out })
        }
    }
}
