//! Natural, white-box and blind accuracy.
//!
//! Splits are cut into fixed chunks of [`EVAL_CHUNK`] examples; chunk `c` is
//! classified with `key.derive(c)` and attacked with
//! `key.derive(c).derive(a + 1)` for the `a`-th attack. Chunks run in
//! parallel, and since every chunk owns its keys the numbers do not depend on
//! the thread count.

use std::collections::BTreeMap;

use attacks::{predict, run_attack, AttackSpec, Classifier};
use autograd::StreamKey;
use enresnet::EnResNetModel;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{config, Result};

pub const EVAL_CHUNK: usize = 250;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub examples: usize,
    pub attacked_examples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub a_nat: f64,
    /// Attack label → robust accuracy.
    pub a_rob: BTreeMap<String, f64>,
    /// Oracle name → attack label → accuracy of the target on the oracle's
    /// adversarial examples.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blind: Option<BTreeMap<String, BTreeMap<String, f64>>>,
    pub runtime: RuntimeStats,
}

fn chunks(split: &Split) -> Result<Vec<Split>> {
    (0..split.len())
        .step_by(EVAL_CHUNK)
        .map(|s| split.slice(s, (s + EVAL_CHUNK).min(split.len())))
        .collect()
}

fn correct(
    model: &dyn Classifier,
    x: &autograd::Tensor,
    y: &[usize],
    key: StreamKey,
) -> Result<usize> {
    let pred = predict(&model.logits(x, key)?)?;
    Ok(pred.iter().zip(y).filter(|(p, t)| p == t).count())
}

fn ratio(hits: usize, total: usize) -> f64 {
    hits as f64 / total as f64
}

/// Natural accuracy of the model in evaluation mode.
pub fn accuracy(model: &EnResNetModel, split: &Split, key: StreamKey) -> Result<f64> {
    if split.is_empty() {
        return Ok(0.0);
    }
    let parts = chunks(split)?;
    let hits = parts
        .par_iter()
        .enumerate()
        .map(|(c, part)| correct(model, &part.x, &part.y, key.derive(c as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ratio(hits.iter().sum(), split.len()))
}

/// `a_nat` plus, for each attack, the accuracy on white-box adversarial inputs.
pub fn evaluate(
    model: &EnResNetModel,
    split: &Split,
    attacks: &[AttackSpec],
    key: StreamKey,
) -> Result<EvalReport> {
    evaluate_against(model, model, split, attacks, key)
}

/// Adversarial examples come from `oracle`, accuracy is measured on `target`.
pub fn evaluate_against(
    target: &EnResNetModel,
    oracle: &EnResNetModel,
    split: &Split,
    attacks: &[AttackSpec],
    key: StreamKey,
) -> Result<EvalReport> {
    if split.is_empty() {
        return config("evaluation split is empty");
    }
    if target.input_shape() != oracle.input_shape() || target.classes() != oracle.classes() {
        return config("target and oracle models take different inputs or classes");
    }
    let mut labels: Vec<String> = attacks.iter().map(AttackSpec::label).collect();
    let mut seen = BTreeMap::new();
    for l in &mut labels {
        let n = seen.entry(l.clone()).or_insert(0usize);
        *n += 1;
        if *n > 1 {
            *l = format!("{l}#{n}");
        }
    }
    let parts = chunks(split)?;
    let per_chunk = parts
        .par_iter()
        .enumerate()
        .map(|(c, part)| -> Result<(usize, Vec<usize>)> {
            let ckey = key.derive(c as u64);
            let nat = correct(target, &part.x, &part.y, ckey)?;
            let rob = attacks
                .iter()
                .enumerate()
                .map(|(a, spec)| {
                    let adv =
                        run_attack(oracle, &part.x, &part.y, spec, ckey.derive(a as u64 + 1))?;
                    correct(target, &adv.x_adv, &part.y, ckey)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((nat, rob))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = split.len();
    let a_nat = ratio(per_chunk.iter().map(|(h, _)| h).sum(), n);
    let a_rob = labels
        .into_iter()
        .enumerate()
        .map(|(a, l)| (l, ratio(per_chunk.iter().map(|(_, r)| r[a]).sum(), n)))
        .collect();
    Ok(EvalReport {
        a_nat,
        a_rob,
        blind: None,
        runtime: RuntimeStats {
            examples: n,
            attacked_examples: n * attacks.len(),
        },
    })
}

/// Blind attack: examples crafted white-box on `oracle`, scored on `target`.
pub fn evaluate_blind(
    target: &EnResNetModel,
    oracle: &EnResNetModel,
    split: &Split,
    attack: &AttackSpec,
    key: StreamKey,
) -> Result<EvalReport> {
    evaluate_against(target, oracle, split, std::slice::from_ref(attack), key)
}
