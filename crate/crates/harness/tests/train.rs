use attacks::AttackSpec;
use autograd::StreamKey;
use enresnet::{ArchSpec, EnResNetModel, NoiseSpec};
use harness::data::{load_dataset, Dataset, DatasetSpec};
use harness::eval::accuracy;
use harness::train::*;
use harness::HarnessError;

fn small_data() -> Dataset {
    load_dataset(&DatasetSpec {
        n_train: 200,
        n_test: 50,
        distractors: 2,
        ..Default::default()
    })
    .unwrap()
}

fn model(data: &Dataset, members: usize, a: f64) -> EnResNetModel {
    let arch = ArchSpec {
        input: data.input,
        channels: 4,
        blocks: 1,
        classes: 2,
    };
    EnResNetModel::init(
        members,
        arch,
        NoiseSpec {
            a,
            ..NoiseSpec::default()
        },
        init_key(0),
    )
    .unwrap()
}

fn params(m: &EnResNetModel) -> Vec<u64> {
    m.params()
        .iter()
        .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn lr_schedule_drops_at_the_fractions() {
    let cfg = TrainConfig {
        lr0: 0.2,
        ..TrainConfig::default()
    };
    for (f, factor) in [(0.39, 1.0), (0.41, 0.1), (0.61, 0.01), (0.81, 0.001)] {
        let lr = cfg.lr_at_fraction(f);
        assert!((lr - 0.2 * factor).abs() <= 1e-15, "{f}: {lr}");
    }
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let lrs: Vec<f64> = (0..10).map(|e| cfg.lr_for_epoch(e)).collect();
    assert_eq!(lrs[3], 0.1);
    assert!((lrs[4] - 0.01).abs() < 1e-15 && (lrs[9] - 1e-4).abs() < 1e-18);
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let data = small_data();
    let m = model(&data, 1, 0.0);
    let out = train(
        m.clone(),
        &data,
        &TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    assert_eq!(out.model, m);
    assert_eq!(out.best_epoch, 0);
    assert!(out.history.is_empty());
    assert_eq!(
        out.best_val_acc,
        accuracy(&m, &data.val, validation_key(0)).unwrap()
    );
}

#[test]
fn same_seed_gives_identical_parameters() {
    let data = small_data();
    let cfg = TrainConfig {
        epochs: 3,
        seed: 4,
        ..TrainConfig::default()
    };
    let a = train(model(&data, 2, 0.1), &data, &cfg).unwrap();
    let b = train(model(&data, 2, 0.1), &data, &cfg).unwrap();
    assert_eq!(params(&a.model), params(&b.model));
    assert_eq!(a.history, b.history);
    let c = train(model(&data, 2, 0.1), &data, &TrainConfig { seed: 5, ..cfg }).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn best_validation_is_the_history_maximum() {
    let data = small_data();
    for adversarial in [false, true] {
        let cfg = TrainConfig {
            epochs: 4,
            adversarial,
            pgd: PgdConfig {
                iters: 2,
                ..PgdConfig::default()
            },
            ..TrainConfig::default()
        };
        let out = train(model(&data, 1, 0.1), &data, &cfg).unwrap();
        let init = accuracy(&model(&data, 1, 0.1), &data.val, validation_key(0)).unwrap();
        let max = out.history.iter().map(|h| h.val_acc).fold(init, f64::max);
        assert_eq!(out.best_val_acc, max);
        let recorded = if out.best_epoch == 0 {
            init
        } else {
            out.history[out.best_epoch - 1].val_acc
        };
        assert_eq!(recorded, out.best_val_acc);
        assert_eq!(
            accuracy(&out.model, &data.val, validation_key(0)).unwrap(),
            out.best_val_acc
        );
    }
}

#[test]
fn zero_epsilon_pgd_is_natural_training() {
    let data = small_data();
    let nat = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let adv = TrainConfig {
        adversarial: true,
        pgd: PgdConfig {
            epsilon: 0.0,
            ..PgdConfig::default()
        },
        ..nat.clone()
    };
    let a = train(model(&data, 2, 0.1), &data, &nat).unwrap();
    let b = train(model(&data, 2, 0.1), &data, &adv).unwrap();
    assert_eq!(params(&a.model), params(&b.model));
    assert_eq!(a.history, b.history);
}

#[test]
fn moons_reach_high_validation_accuracy() {
    let data = load_dataset(&DatasetSpec::default()).unwrap();
    let arch = ArchSpec {
        input: data.input,
        channels: 16,
        blocks: 3,
        classes: 2,
    };
    let m = EnResNetModel::init(1, arch, NoiseSpec::none(), init_key(0)).unwrap();
    let out = train(m, &data, &TrainConfig::default()).unwrap();
    assert!(out.best_val_acc >= 0.95, "{}", out.best_val_acc);
}

#[test]
fn learned_weights_stay_on_the_simplex() {
    let data = small_data();
    let cfg = TrainConfig {
        epochs: 4,
        learn_weights: true,
        lr_w: 0.05,
        ..TrainConfig::default()
    };
    let out = train(model(&data, 3, 0.0), &data, &cfg).unwrap();
    for h in &out.history {
        assert!((h.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(h.weights.iter().all(|&w| w >= 0.0));
    }
    assert_ne!(out.history.last().unwrap().weights, vec![1.0 / 3.0; 3]);
}

#[test]
fn pgd_batches_stay_in_the_ball() {
    let data = small_data();
    let m = model(&data, 2, 0.1);
    let batch = data.train.slice(0, 32).unwrap();
    let attack = AttackSpec {
        eot_runs: 2,
        ..AttackSpec::ifgsm(0.05, 0.01, 10)
    };
    let adv = adversarial_batch(&m, &batch.x, &batch.y, &attack, StreamKey(8)).unwrap();
    let worst = adv
        .data()
        .iter()
        .zip(batch.x.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 0.05 + 1e-9 && worst > 0.0);
    assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let data = small_data();
    let cfg = TrainConfig {
        epochs: 5,
        lr0: 1e300,
        ..TrainConfig::default()
    };
    match train(model(&data, 1, 0.0), &data, &cfg) {
        Err(HarnessError::Divergence { epoch, .. }) => assert!(epoch < 5),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let data = small_data();
    let bad = [
        TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr0: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            decay_fractions: vec![0.6, 0.4],
            ..TrainConfig::default()
        },
        TrainConfig {
            adversarial: true,
            pgd: PgdConfig {
                alpha: 1.0,
                ..PgdConfig::default()
            },
            ..TrainConfig::default()
        },
    ];
    for cfg in bad {
        assert!(
            matches!(
                train(model(&data, 1, 0.0), &data, &cfg),
                Err(HarnessError::Config(_))
            ),
            "{cfg:?}"
        );
    }
    let wrong = EnResNetModel::init(
        1,
        ArchSpec {
            input: [3, 1, 1],
            channels: 2,
            blocks: 1,
            classes: 2,
        },
        NoiseSpec::none(),
        StreamKey(0),
    )
    .unwrap();
    assert!(matches!(
        train(wrong, &data, &TrainConfig::default()),
        Err(HarnessError::Config(_))
    ));
}
