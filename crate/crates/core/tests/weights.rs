use autograd::{gaussian_sample, StreamKey, Tensor};
use enresnet::*;
use rand::Rng;

/// Total cross-entropy computed directly from the definition.
fn loss(ys: &[Tensor], labels: &[usize], w: &[f64]) -> f64 {
    let k = ys[0].shape()[1];
    labels
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let z: Vec<f64> = (0..k)
                .map(|j| {
                    ys.iter()
                        .zip(w)
                        .map(|(y, wm)| wm * y.data()[i * k + j])
                        .sum()
                })
                .collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - z[t]
        })
        .sum()
}

fn finite_difference(ys: &[Tensor], labels: &[usize], w: &[f64]) -> Vec<f64> {
    let h = 1e-6;
    (0..w.len())
        .map(|k| {
            let (mut up, mut dn) = (w.to_vec(), w.to_vec());
            up[k] += h;
            dn[k] -= h;
            (loss(ys, labels, &up) - loss(ys, labels, &dn)) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn row(v: &[f64]) -> Tensor {
    Tensor::new(&[1, v.len()], v.to_vec()).unwrap()
}

#[test]
fn identical_members_get_identical_gradients() {
    let y = gaussian_sample(&[6, 4], 1.0, StreamKey(1));
    let g = ensemble_weight_grads(&[y.clone(), y], &[0, 1, 2, 3, 0, 1], &[0.3, 0.7]).unwrap();
    assert_eq!(g[0], g[1]);
}

#[test]
fn two_class_example_matches_finite_differences() {
    let ys = [row(&[1.0, 0.0]), row(&[0.0, 1.0])];
    let w = [0.5, 0.5];
    let g = ensemble_weight_grads(&ys, &[0], &w).unwrap();
    let fd = finite_difference(&ys, &[0], &w);
    for (a, b) in g.iter().zip(&fd) {
        assert!(rel_err(*a, *b) <= 1e-6, "{g:?} vs {fd:?}");
    }
    // At w = (½, ½) the ensemble is uniform, so ∂L/∂w = ∓½.
    assert!((g[0] + 0.5).abs() < 1e-15 && (g[1] - 0.5).abs() < 1e-15);
}

#[test]
fn confident_correct_ensembles_have_vanishing_gradients() {
    let mut last = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0, 60.0] {
        let ys = [row(&[margin, 0.0]), row(&[margin, -margin])];
        let g = ensemble_weight_grads(&ys, &[0], &[0.5, 0.5]).unwrap();
        let size = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(size < last);
        last = size;
    }
    assert!(last < 1e-20);
}

#[test]
fn random_instances_match_finite_differences_and_the_sum_rule() {
    let mut rng = StreamKey(99).rng();
    for case in 0..50u64 {
        let (n, k) = (rng.gen_range(1..6), rng.gen_range(2..6));
        let ys: Vec<Tensor> = (0..2)
            .map(|m| gaussian_sample(&[n, k], 2.0, StreamKey(case * 2 + m)))
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let w1: f64 = rng.gen_range(0.0..1.0);
        let w = [w1, 1.0 - w1];
        let g = ensemble_weight_grads(&ys, &labels, &w).unwrap();
        let fd = finite_difference(&ys, &labels, &w);
        for (a, b) in g.iter().zip(&fd) {
            assert!(rel_err(*a, *b) <= 1e-5, "case {case}: {g:?} vs {fd:?}");
        }
        // Moving along the simplex: d/dw1 L(w1, 1 − w1) = ∂L/∂w1 − ∂L/∂w2.
        let h = 1e-6;
        let constrained = (loss(&ys, &labels, &[w1 + h, 1.0 - w1 - h])
            - loss(&ys, &labels, &[w1 - h, 1.0 - w1 + h]))
            / (2.0 * h);
        assert!(rel_err(g[0] - g[1], constrained) <= 1e-5);

        let z = combine_logits(&ys, &w).unwrap();
        let mut sum_rule = 0.0;
        for (i, &t) in labels.iter().enumerate() {
            let zi = &z.data()[i * k..(i + 1) * k];
            let m = zi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = zi.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let both = |j: usize| ys[0].data()[i * k + j] + ys[1].data()[i * k + j];
            let expectation: f64 = (0..k).map(|j| both(j) * e[j] / s).sum();
            sum_rule -= both(t) - expectation;
        }
        assert!((g[0] + g[1] - sum_rule).abs() <= 1e-10 * sum_rule.abs().max(1.0));
    }
}

#[test]
fn ensemble_loss_is_the_total_cross_entropy() {
    let ys: Vec<Tensor> = (0..3)
        .map(|m| gaussian_sample(&[4, 3], 1.0, StreamKey(m)))
        .collect();
    let w = [0.2, 0.3, 0.5];
    let labels = [0, 2, 1, 1];
    assert!((ensemble_loss(&ys, &labels, &w).unwrap() - loss(&ys, &labels, &w)).abs() < 1e-12);
    let g = ensemble_weight_grads(&ys, &labels, &w).unwrap();
    let fd = finite_difference(&ys, &labels, &w);
    for (a, b) in g.iter().zip(&fd) {
        assert!(rel_err(*a, *b) <= 1e-5);
    }
}

#[test]
fn weight_updates_by_hand() {
    let s = EnsembleWeightState {
        w: vec![0.5, 0.5],
        lr_w: 0.1,
    };
    assert_eq!(update_ensemble_weights(&s, &[0.0, 0.0]).unwrap(), s);
    let next = update_ensemble_weights(&s, &[1.0, -1.0]).unwrap();
    assert!((next.w[0] - 0.4).abs() < 1e-15 && (next.w[1] - 0.6).abs() < 1e-15);
    let clamped = update_ensemble_weights(&s, &[10.0, 0.0]).unwrap();
    assert_eq!(clamped.w, vec![0.0, 1.0]);
    let reset = update_ensemble_weights(&s, &[10.0, 10.0]).unwrap();
    assert_eq!(reset.w, vec![0.5, 0.5]);
    assert!(update_ensemble_weights(&s, &[1.0]).is_err());
}

#[test]
fn weights_stay_on_the_simplex() {
    let mut rng = StreamKey(5).rng();
    let mut s = EnsembleWeightState::uniform(3, DEFAULT_WEIGHT_LR * 20.0);
    for _ in 0..100 {
        let g: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
        s = update_ensemble_weights(&s, &g).unwrap();
        assert!(s.w.iter().all(|&v| v >= 0.0));
        assert!((s.w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}
