use autograd::{AutogradError, BatchNormMode, Graph, RunningStats, Tensor};

fn t(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape, v.to_vec()).unwrap()
}

#[test]
fn identity_kernel_passes_input_through() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[1, 1, 3, 4], |i| i as f64 * 0.5 - 1.0));
    let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = g.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn ones_kernel_counts_support() {
    let v = 0.7;
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 5, 5], v));
    let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, k, 1, 1).unwrap();
    let out = g.value(y).data();
    assert!((out[2 * 5 + 2] - 9.0 * v).abs() < 1e-12);
    for corner in [0, 4, 20, 24] {
        assert!((out[corner] - 4.0 * v).abs() < 1e-12);
    }
    assert!((out[2] - 6.0 * v).abs() < 1e-12);
}

#[test]
fn conv_kernel_gradient_on_small_input() {
    let x = Tensor::from_fn(&[1, 1, 4, 4], |i| ((i * 7 % 11) as f64 - 5.0) / 5.0);
    let k = Tensor::from_fn(&[1, 1, 3, 3], |i| (i as f64 - 4.0) / 4.0);
    let loss_at = |k: &Tensor| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.leaf(k.clone());
        let y = g.conv2d(xv, kv, 1, 1).unwrap();
        let l = g.sum(y).unwrap();
        (g, kv, l)
    };
    let (g, kv, l) = loss_at(&k);
    let grad = g.backward(l).unwrap().take(kv).unwrap();
    for e in 0..9 {
        let (mut kp, mut km) = (k.clone(), k.clone());
        kp.data_mut()[e] += 1e-5;
        km.data_mut()[e] -= 1e-5;
        let (gp, _, lp) = loss_at(&kp);
        let (gm, _, lm) = loss_at(&km);
        let fd = (gp.value(lp).item().unwrap() - gm.value(lm).item().unwrap()) / 2e-5;
        assert!(
            (grad.data()[e] - fd).abs() <= 1e-6 * fd.abs().max(1e-12),
            "tap {e}: {} vs {fd}",
            grad.data()[e]
        );
    }
}

#[test]
fn conv_rejects_bad_shapes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(
        g.conv2d(x, k, 1, 1),
        Err(AutogradError::Parameter(_))
    ));
    let even = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(g.conv2d(x, even, 1, 0).is_err());
    let k3 = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(g.conv2d(x, k3, 2, 0).is_err());
}

#[test]
fn batch_norm_hand_standardization() {
    let mut g = Graph::new();
    let x = g.constant(t(&[4, 1, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
    let gamma = g.constant(t(&[1], &[1.0]));
    let beta = g.constant(t(&[1], &[0.0]));
    let (y, stats) = g
        .batch_norm(x, gamma, beta, 0.0, BatchNormMode::Train)
        .unwrap();
    let want = [-1.3416, -0.4472, 0.4472, 1.3416];
    for (a, b) in g.value(y).data().iter().zip(want) {
        assert!((a - b).abs() <= 1e-4, "{a} vs {b}");
    }
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![2.5]);
    assert_eq!(stats.var, vec![1.25]);
}

#[test]
fn batch_norm_zero_gamma_collapses_to_beta() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[2, 2, 2, 2], |i| (i as f64).sin()));
    let gamma = g.constant(Tensor::zeros(&[2]));
    let beta = g.constant(t(&[2], &[0.3, -1.2]));
    let (y, _) = g
        .batch_norm(x, gamma, beta, 1e-5, BatchNormMode::Train)
        .unwrap();
    for (i, v) in g.value(y).data().iter().enumerate() {
        assert_eq!(*v, if (i / 4) % 2 == 0 { 0.3 } else { -1.2 });
    }
}

#[test]
fn batch_norm_degenerate_batch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 1, 1]));
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    assert_eq!(
        g.batch_norm(x, gamma, beta, 1e-5, BatchNormMode::Train)
            .unwrap_err(),
        AutogradError::DegenerateBatch { per_channel: 1 }
    );
    let stats = RunningStats::new(3);
    assert!(g
        .batch_norm(x, gamma, beta, 1e-5, BatchNormMode::Eval(&stats))
        .is_ok());
}

#[test]
fn running_stats_moving_average() {
    let mut g = Graph::new();
    let x = g.constant(t(&[4, 1, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
    let gamma = g.constant(t(&[1], &[1.0]));
    let beta = g.constant(t(&[1], &[0.0]));
    let (_, batch) = g
        .batch_norm(x, gamma, beta, 1e-5, BatchNormMode::Train)
        .unwrap();
    let mut rs = RunningStats::new(1);
    rs.update(&batch.unwrap(), 0.1);
    assert!((rs.mean[0] - 0.25).abs() < 1e-15);
    // Unbiased batch variance 5/3.
    assert!((rs.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
}

#[test]
fn relu_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let yy = g.relu(y).unwrap();
    assert_eq!(g.value(yy), g.value(y));
    let s = g.sum(y).unwrap();
    assert_eq!(
        g.backward(s).unwrap().get(x).unwrap().data(),
        &[0.0, 0.0, 1.0]
    );
}

#[test]
fn dense_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2], &[3.0, -1.0]));
    let y = g.dense(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 1.0]);
    let zero = g.constant(Tensor::zeros(&[2]));
    let id = g.dense(x, w, zero).unwrap();
    assert_eq!(g.value(id), g.value(x));
    let bad = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.dense(x, bad, b).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let k = 7;
    let z = g.leaf(Tensor::full(&[2, k], 0.3));
    let l = g.cross_entropy(z, &[1, 6]).unwrap();
    assert!((g.value(l).item().unwrap() - (k as f64).ln()).abs() < 1e-12);

    let z2 = g.leaf(t(&[1, 2], &[10.0, -10.0]));
    let l2 = g.cross_entropy(z2, &[0]).unwrap();
    let exact = (-20.0_f64).exp().ln_1p();
    assert!((g.value(l2).item().unwrap() - exact).abs() / exact < 1e-9);
    assert!((g.value(l2).item().unwrap() - 2.06e-9).abs() < 1e-11);

    let z3 = g.leaf(t(&[1, 3], &[0.5, -1.0, 2.0]));
    let l3 = g.cross_entropy(z3, &[1]).unwrap();
    let grad = g.backward(l3).unwrap().take(z3).unwrap();
    let e: Vec<f64> = [0.5_f64, -1.0, 2.0].iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    for j in 0..3 {
        let want = e[j] / s - if j == 1 { 1.0 } else { 0.0 };
        assert!((grad.data()[j] - want).abs() < 1e-12);
    }
    assert!(matches!(
        g.cross_entropy(z3, &[3]),
        Err(AutogradError::Parameter(_))
    ));
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_fn(&[2, 3, 2], |i| i as f64 - 4.0));
    let s = g.sum(x).unwrap();
    assert!(g
        .backward(s)
        .unwrap()
        .get(x)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 1.0));
    let sq = g.mul(x, x).unwrap();
    let s2 = g.sum(sq).unwrap();
    let grad = g.backward(s2).unwrap().take(x).unwrap();
    for (gv, xv) in grad.data().iter().zip(g.value(x).data()) {
        assert_eq!(*gv, 2.0 * xv);
    }
    assert!(matches!(g.backward(sq), Err(AutogradError::Parameter(_))));
}

#[test]
fn repeated_backward_accumulates() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1.0, -3.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let mut grads = autograd::Gradients::new();
    g.backward_into(s, &mut grads).unwrap();
    g.backward_into(s, &mut grads).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[4.0, -12.0]);
}

#[test]
fn fan_out_adds_contributions() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1], &[2.0]));
    let a = g.scale(x, 3.0).unwrap();
    let b = g.mul(x, a).unwrap();
    let c = g.add(b, x).unwrap();
    let l = g.sum(c).unwrap();
    // d/dx (3x² + x) = 6x + 1
    assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[13.0]);
}

#[test]
fn constants_get_no_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1.0, 2.0]));
    let c = g.constant(t(&[2], &[5.0, 6.0]));
    let y = g.mul(x, c).unwrap();
    let l = g.sum(y).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(c).is_none());
    assert!(!g.requires_grad(c));
    assert_eq!(grads.get(x).unwrap().data(), &[5.0, 6.0]);
}

#[test]
fn non_finite_values_trip_an_error() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1], &[f64::MAX]));
    assert_eq!(
        g.scale(x, 10.0).unwrap_err(),
        AutogradError::NonFinite { op: "scale" }
    );
}

#[test]
fn vjp_of_vector_output() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 2], &[1.0, 2.0]));
    let w = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let b = g.constant(Tensor::zeros(&[3]));
    let y = g.dense(x, w, b).unwrap();
    let grads = g.vjp(y, &t(&[1, 3], &[1.0, 0.0, -1.0])).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[-2.0, -2.0]);
}
