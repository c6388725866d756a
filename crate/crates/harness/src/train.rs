//! Natural and PGD adversarial training with a step-decayed learning rate and
//! best-validation model selection.

use attacks::{ifgsm_from, pgd_init, AttackError, AttackSpec, ModelView};
use autograd::{sgd_momentum_step, AutogradError, Graph, SgdState, StreamKey, Tensor};
use enresnet::{
    ensemble_weight_grads, update_ensemble_weights, EnResNetModel, EnsembleWeightState, Mode,
    ModelError, DEFAULT_WEIGHT_LR,
};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment, Dataset};
use crate::error::{config, HarnessError, Result};
use crate::eval::accuracy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgdConfig {
    pub iters: usize,
    pub alpha: f64,
    pub epsilon: f64,
    /// Gradient samples per inner step when the model is noisy.
    pub eot_runs: usize,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            iters: 10,
            alpha: 2.0 / 255.0,
            epsilon: 8.0 / 255.0,
            eot_runs: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    /// Fractions of the run after which the learning rate drops.
    pub decay_fractions: Vec<f64>,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub adversarial: bool,
    pub pgd: PgdConfig,
    /// Learn the ensemble weights once per epoch from the accumulated
    /// weight gradients.
    pub learn_weights: bool,
    pub lr_w: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr0: 0.1,
            decay_factor: 10.0,
            decay_fractions: vec![0.4, 0.6, 0.8],
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 5e-4,
            adversarial: false,
            pgd: PgdConfig::default(),
            learn_weights: false,
            lr_w: DEFAULT_WEIGHT_LR,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return config("train: batch_size must be >= 2 for batch normalization");
        }
        if !(self.lr0 > 0.0 && self.decay_factor >= 1.0) {
            return config("train: need lr0 > 0 and decay_factor >= 1");
        }
        if self.decay_fractions.windows(2).any(|w| w[0] >= w[1]) {
            return config("train: decay_fractions must be strictly increasing");
        }
        if self
            .decay_fractions
            .iter()
            .any(|f| !(0.0..=1.0).contains(f))
        {
            return config("train: decay_fractions must lie in [0, 1]");
        }
        let p = &self.pgd;
        if self.adversarial && p.epsilon > 0.0 {
            if !(p.alpha > 0.0 && p.alpha <= p.epsilon) {
                return config("train: pgd needs 0 < alpha <= epsilon");
            }
            if p.iters == 0 || p.eot_runs == 0 {
                return config("train: pgd iters and eot_runs must be >= 1");
            }
        }
        if !(p.epsilon >= 0.0) {
            return config("train: pgd epsilon must be >= 0");
        }
        Ok(())
    }

    /// Learning rate once `fraction` of the run has elapsed.
    pub fn lr_at_fraction(&self, fraction: f64) -> f64 {
        let drops = self
            .decay_fractions
            .iter()
            .filter(|&&f| fraction >= f)
            .count();
        self.lr0 / self.decay_factor.powi(drops as i32)
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        self.lr_at_fraction(epoch as f64 / self.epochs.max(1) as f64)
    }

    fn attack(&self) -> AttackSpec {
        AttackSpec {
            eot_runs: self.pgd.eot_runs,
            ..AttackSpec::ifgsm(self.pgd.epsilon, self.pgd.alpha, self.pgd.iters)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: f64,
    /// Ensemble weights at the end of the epoch.
    pub weights: Vec<f64>,
}

/// The best-validation model of a run and the history that selected it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: EnResNetModel,
    pub best_val_acc: f64,
    /// Epochs completed when the best model was taken (0 = initialization).
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Key for drawing initial parameters of a run with this seed.
pub fn init_key(seed: u64) -> StreamKey {
    StreamKey(seed).derive(0x696e_6974)
}

/// Fixed key for validation passes.
pub fn validation_key(seed: u64) -> StreamKey {
    StreamKey(seed).derive(0x7661_6c)
}

/// Minibatch SGD on the mean cross-entropy, optionally on PGD adversarial
/// batches.
pub fn train(model: EnResNetModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.len() < 2 {
        return config("train: need at least two training examples");
    }
    if model.input_shape() != data.input || model.classes() != data.classes {
        return config(format!(
            "train: model takes {:?} with {} classes, data is {:?} with {}",
            model.input_shape(),
            model.classes(),
            data.input,
            data.classes
        ));
    }
    let root = StreamKey(cfg.seed);
    let vkey = validation_key(cfg.seed);
    let mut model = model;
    let mut sgd = SgdState::default();
    let mut weight_state = EnsembleWeightState {
        w: model.weights().to_vec(),
        lr_w: cfg.lr_w,
    };
    let val_acc = accuracy(&model, &data.val, vkey)?;
    let mut best = TrainOutcome {
        model: model.clone(),
        best_val_acc: val_acc,
        best_epoch: 0,
        history: Vec::new(),
    };
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let attack = cfg.attack();

    for epoch in 0..cfg.epochs {
        let ekey = root.derive(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut ekey.derive(0).rng());
        let lr = cfg.lr_for_epoch(epoch);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut weight_grads = vec![0.0; model.len()];
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let bkey = ekey.derive(step as u64 + 1);
            let div = |e: HarnessError| diverged(e, epoch, step);
            let batch = data.train.select(idx)?;
            let x = if data.image {
                augment(&batch.x, bkey.derive(0))?
            } else {
                batch.x
            };
            let x = if cfg.adversarial && cfg.pgd.epsilon > 0.0 {
                adversarial_batch(&model, &x, &batch.y, &attack, bkey).map_err(div)?
            } else {
                x
            };
            let mut g = Graph::new();
            let xv = g.constant(x);
            let trace = model
                .forward(&mut g, xv, Mode::Train, bkey.derive(3), true)
                .map_err(|e| div(e.into()))?;
            let loss = g
                .cross_entropy(trace.logits, &batch.y)
                .map_err(|e| div(e.into()))?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(HarnessError::Divergence { epoch, step });
            }
            let mut grads = g.backward(loss).map_err(|e| div(e.into()))?;
            let params = trace.params();
            let grads: Vec<Tensor> = params
                .iter()
                .zip(model.params())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            if grads.iter().any(|t| !t.is_finite()) {
                return Err(HarnessError::Divergence { epoch, step });
            }
            if cfg.learn_weights {
                let member_logits: Vec<Tensor> = trace
                    .member_logits
                    .iter()
                    .map(|&v| g.value(v).clone())
                    .collect();
                let wg = ensemble_weight_grads(&member_logits, &batch.y, model.weights())?;
                weight_grads.iter_mut().zip(wg).for_each(|(a, b)| *a += b);
            }
            let stats = trace.stats();
            let mut owned: Vec<Tensor> = model.params().into_iter().cloned().collect();
            sgd_momentum_step(
                &mut owned,
                &grads,
                &mut sgd,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
            for (p, new) in model.params_mut().into_iter().zip(owned) {
                *p = new;
            }
            model.update_running_stats(&stats)?;
            loss_sum += value * idx.len() as f64;
            seen += idx.len();
        }
        if cfg.learn_weights {
            weight_state = update_ensemble_weights(&weight_state, &weight_grads)?;
            model.set_weights(weight_state.w.clone())?;
        }
        let val_acc = accuracy(&model, &data.val, vkey)?;
        best.history.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            val_acc,
            weights: model.weights().to_vec(),
        });
        if val_acc > best.best_val_acc {
            best.model = model.clone();
            best.best_val_acc = val_acc;
            best.best_epoch = epoch + 1;
        }
    }
    Ok(best)
}

/// Non-finite values anywhere in a step mean the run has diverged.
fn diverged(e: HarnessError, epoch: usize, step: usize) -> HarnessError {
    let non_finite = matches!(
        e,
        HarnessError::Autograd(AutogradError::NonFinite { .. })
            | HarnessError::Model(ModelError::Autograd(AutogradError::NonFinite { .. }))
            | HarnessError::Attack(AttackError::Autograd(AutogradError::NonFinite { .. }))
            | HarnessError::Attack(AttackError::Model(ModelError::Autograd(
                AutogradError::NonFinite { .. }
            )))
    );
    if non_finite {
        HarnessError::Divergence { epoch, step }
    } else {
        e
    }
}

/// PGD inner loop: uniform start in the ε-ball, then IFGSM against
/// the model in training mode (batch statistics, noise on, no stat updates).
pub fn adversarial_batch(
    model: &EnResNetModel,
    x: &Tensor,
    y: &[usize],
    attack: &AttackSpec,
    key: StreamKey,
) -> Result<Tensor> {
    let start = pgd_init(x, attack.epsilon, key.derive(1))?;
    let adv = ifgsm_from(
        &ModelView::train(model),
        x,
        &start,
        y,
        attack,
        key.derive(2),
    )?
    .x_adv;
    let worst = adv
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(
        worst <= attack.epsilon + 1e-9,
        "PGD perturbation {worst} exceeds epsilon {}",
        attack.epsilon
    );
    Ok(adv)
}
