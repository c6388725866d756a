use autograd::{BatchNormMode, Graph, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |v| Tensor::new(&shape, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear_in_the_loss(x in tensor(vec![2, 3]), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut g = Graph::new();
        let xv = g.leaf(x);
        let sq = g.mul(xv, xv).unwrap();
        let l1 = g.sum(sq).unwrap();
        let r = g.relu(xv).unwrap();
        let l2 = g.mean(r).unwrap();
        let g1 = g.backward(l1).unwrap().take(xv).unwrap();
        let g2 = g.backward(l2).unwrap().take(xv).unwrap();
        let s1 = g.scale(l1, a).unwrap();
        let s2 = g.scale(l2, b).unwrap();
        let combo = g.add(s1, s2).unwrap();
        let gc = g.backward(combo).unwrap().take(xv).unwrap();
        for i in 0..gc.numel() {
            prop_assert!((gc.data()[i] - (a * g1.data()[i] + b * g2.data()[i])).abs() <= 1e-10);
        }
    }

    #[test]
    fn cross_entropy_gradient_rows_sum_to_zero(z in tensor(vec![4, 5]), labels in prop::collection::vec(0usize..5, 4)) {
        let mut g = Graph::new();
        let zv = g.leaf(z);
        let l = g.cross_entropy(zv, &labels).unwrap();
        let grad = g.backward(l).unwrap().take(zv).unwrap();
        for row in grad.data().chunks(5) {
            prop_assert!(row.iter().sum::<f64>().abs() <= 1e-10);
        }
    }

    #[test]
    fn batch_norm_standardizes_channels(x in tensor(vec![3, 2, 2, 2]), shift in -5.0f64..5.0, spread in 0.5f64..4.0) {
        let x = Tensor::new(x.shape(), x.data().iter().map(|v| shift + spread * v).collect()).unwrap();
        let eps = 1e-5;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let (y, stats) = g.batch_norm(xv, gamma, beta, eps, BatchNormMode::Train).unwrap();
        let stats = stats.unwrap();
        let out = g.value(y).data();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| out[(n * 2 + c) * 4..(n * 2 + c) * 4 + 4].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / 12.0;
            let v = vals.iter().map(|u| (u - m).powi(2)).sum::<f64>() / 12.0;
            prop_assert!(m.abs() <= 1e-6);
            let expect = stats.var[c] / (stats.var[c] + eps);
            prop_assert!((v - expect).abs() <= 1e-5, "{} vs {}", v, expect);
        }
    }
}
