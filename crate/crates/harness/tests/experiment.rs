use harness::checkpoint::load_checkpoint;
use harness::experiment::*;
use harness::HarnessError;

const SMALL_DATA: &str = r#""data": { "n_train": 120, "n_test": 60, "distractors": 2 }"#;

fn small_models(names: &[&str]) -> String {
    let models: Vec<String> = names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            format!(
                r#"{{ "name": "{n}", "members": {}, "channels": 4, "blocks": 1, "train": {{ "epochs": 2, "seed": {i} }} }}"#,
                1 + i % 2
            )
        })
        .collect();
    format!(r#""models": [{}]"#, models.join(","))
}

const SMALL_ATTACKS: &str = r#""attacks": [ { "kind": "fgsm", "epsilon": 0.03 }, { "kind": "ifgsm", "epsilon": 0.03, "alpha": 0.01, "iters": 3, "eot_runs": 2 } ]"#;

#[test]
fn pde_figure_regularity_decreases_with_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_experiment(
        r#"{ "pipeline": "pde-figure", "n": 64, "sigmas": [0.0, 0.01, 0.1], "seed": 3 }"#,
    )
    .unwrap();
    let (report, files) = run_experiment(&cfg, dir.path()).unwrap();
    let pde = report.pde.unwrap();
    assert_eq!(pde.rows.len(), 3);
    assert!(pde.strictly_decreasing, "{:?}", pde.rows);
    let csvs = files
        .iter()
        .filter(|p| {
            p.file_name()
                .unwrap()
                .to_str()
                .unwrap()
                .starts_with("field_")
        })
        .count();
    assert_eq!(csvs, 3);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    let (field, sigma) =
        transport::ScalarField2D::from_csv(&std::fs::read_to_string(&files[2]).unwrap()).unwrap();
    assert_eq!((field.grid().n(), sigma), (64, 0.1));
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn unknown_pipeline_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{ "pipeline": "pde-movie" }"#).unwrap();
    let err = load_experiment(&path).unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)));
    assert!(err.to_string().contains("pde-movie"), "{err}");
    assert!(!out.exists());
}

#[test]
fn unknown_keys_are_named() {
    for (text, key) in [
        (
            r#"{ "pipeline": "pde-figure", "sigma_list": [0.1] }"#,
            "sigma_list",
        ),
        (
            r#"{ "pipeline": "train-eval", "data": { "n_trian": 5 } }"#,
            "n_trian",
        ),
        (
            r#"{ "pipeline": "train-eval", "models": [ { "train": { "epoch": 3 } } ] }"#,
            "epoch",
        ),
        (
            r#"{ "pipeline": "train-eval", "attacks": [ { "eps": 0.1 } ] }"#,
            "eps",
        ),
    ] {
        let err = parse_experiment(text).unwrap_err();
        assert!(err.to_string().contains(key), "{key}: {err}");
    }
}

#[test]
fn failing_runs_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let text = format!(
        r#"{{ "pipeline": "train-eval", {SMALL_DATA}, "models": [ {{ "name": "a/b" }} ] }}"#
    );
    let err = run_experiment(&parse_experiment(&text).unwrap(), &out).unwrap_err();
    assert!(err.to_string().contains("name"), "{err}");
    assert!(!out.exists());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"{{ "pipeline": "train-eval", {SMALL_DATA}, {}, {SMALL_ATTACKS}, "eval_seed": 4 }}"#,
        small_models(&["a", "b"])
    );
    let cfg = parse_experiment(&text).unwrap();
    let (_, first) = run_experiment(&cfg, &dir.path().join("one")).unwrap();
    let (report, second) = run_experiment(&cfg, &dir.path().join("two")).unwrap();
    assert_eq!(first.len(), second.len());
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(
            std::fs::read(a).unwrap(),
            std::fs::read(b).unwrap(),
            "{}",
            a.display()
        );
    }
    assert_eq!(report.models.len(), 2);
    let metrics = std::fs::read_to_string(dir.path().join("one/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "model,a_nat,fgsm,ifgsm3");
    let ckpt = load_checkpoint(&dir.path().join("one/b.enrn")).unwrap();
    assert_eq!(ckpt.model.len(), 2);
    assert_eq!(ckpt.best_val_acc, report.models[1].best_val_acc);
}

#[test]
fn blind_matrix_covers_every_other_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"{{ "pipeline": "blind-matrix", {SMALL_DATA}, {}, {SMALL_ATTACKS} }}"#,
        small_models(&["x", "y", "z"])
    );
    let (report, _) = run_experiment(&parse_experiment(&text).unwrap(), dir.path()).unwrap();
    for m in &report.models {
        let blind = m.eval.blind.as_ref().unwrap();
        assert_eq!(blind.len(), 2);
        assert!(!blind.contains_key(&m.name));
        assert!(blind.values().all(|r| r.len() == 2));
    }
    let rows = std::fs::read_to_string(dir.path().join("blind.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 3 * 2 * 2);

    let one = format!(
        r#"{{ "pipeline": "blind-matrix", {SMALL_DATA}, {} }}"#,
        small_models(&["x"])
    );
    assert!(run_experiment(&parse_experiment(&one).unwrap(), &dir.path().join("one")).is_err());
}

#[test]
fn weight_learning_moves_heterogeneous_weights() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        r#"{{ "pipeline": "weight-learning", {SMALL_DATA},
            "model": {{ "name": "mix", "member_archs": [ {{ "channels": 4, "blocks": 1 }}, {{ "channels": 2, "blocks": 0 }} ],
                       "train": {{ "epochs": 3, "lr_w": 0.05 }} }},
            "attacks": [] }}"#
    );
    let (report, _) = run_experiment(&parse_experiment(&text).unwrap(), dir.path()).unwrap();
    let m = &report.models[0];
    assert_eq!(m.history.len(), 3);
    assert!(m
        .history
        .iter()
        .all(|h| (h.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12));
    assert_ne!(m.history[2].weights, vec![0.5, 0.5]);
    let history = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);
}

#[test]
fn fk_compare_writes_probe_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_experiment(
        r#"{ "pipeline": "fk-compare", "n": 16, "paths": 500, "probes": 4, "dt": 0.01 }"#,
    )
    .unwrap();
    let (report, _) = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(report.fk.unwrap().rows.len(), 4);
    let csv = std::fs::read_to_string(dir.path().join("probes.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}
