use std::f64::consts::PI;

use transport::feynman_kac::{euler_maruyama_displacement, payoff_samples, probe_points};
use transport::{
    compare_with_pde, estimate_u0, sample_random_terminal, sample_random_velocity, DiffusionConfig,
    Grid2D, ScalarField2D, SdeConfig, VelocityField,
};

fn moments(xs: &[f64]) -> (f64, f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = xs.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    (mean, m2, m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
}

#[test]
fn brownian_displacement_is_gaussian_with_unit_time_variance() {
    let g = Grid2D::new(16).unwrap();
    let v = VelocityField::zero(g);
    let sigma = 0.3;
    let cfg = SdeConfig {
        sigma,
        seed: 21,
        ..Default::default()
    };
    let paths = 100_000u64;
    let mut dx = Vec::with_capacity(paths as usize);
    let mut dy = Vec::with_capacity(paths as usize);
    for p in 0..paths {
        let d = euler_maruyama_displacement([0.5, 0.5], &v, &cfg, p);
        dx.push(d[0]);
        dy.push(d[1]);
    }
    for axis in [&dx, &dy] {
        let (_, var, skew, kurt) = moments(axis);
        assert!(
            (var / (sigma * sigma) - 1.0).abs() <= 0.03,
            "variance {var}"
        );
        assert!(skew.abs() <= 0.05, "skewness {skew}");
        assert!(kurt.abs() <= 0.1, "excess kurtosis {kurt}");
    }
}

#[test]
fn heat_case_is_unbiased_across_seeds() {
    let g = Grid2D::new(64).unwrap();
    let f = ScalarField2D::from_fn(g, |x, _| (2.0 * PI * x).sin());
    let x0 = [0.15, 0.5];
    let exact = (-2.0 * PI * PI * 0.04_f64).exp() * (2.0 * PI * x0[0]).sin();
    let mut within = 0;
    for seed in 0..100 {
        let cfg = SdeConfig {
            sigma: 0.2,
            n_paths: 1000,
            seed,
            dt: 1e-2,
        };
        let est = estimate_u0(x0, &f, &VelocityField::zero(g), &cfg).unwrap();
        if (est.mean - exact).abs() <= 4.0 * est.stderr {
            within += 1;
        }
    }
    assert!(within >= 95, "{within}/100 within 4 stderr");
}

#[test]
fn stderr_shrinks_like_inverse_root_of_paths() {
    let g = Grid2D::new(32).unwrap();
    let f = sample_random_terminal(g, 2, 4).unwrap();
    let v = sample_random_velocity(g, 2);
    let cfg = SdeConfig {
        sigma: 0.1,
        n_paths: 8000,
        seed: 4,
        dt: 1e-2,
    };
    let samples = payoff_samples([0.3, 0.3], &f, &v, &cfg).unwrap();
    // Paths are keyed by index, so the first k samples are exactly the k-path estimate.
    let stderr = |k: usize| {
        let s = &samples[..k];
        let m = s.iter().sum::<f64>() / k as f64;
        (s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1) as f64 / k as f64).sqrt()
    };
    let full = estimate_u0([0.3, 0.3], &f, &v, &cfg).unwrap();
    assert!((full.stderr - stderr(8000)).abs() < 1e-12);
    let mut prev = f64::INFINITY;
    for k in [500, 1000, 2000, 4000, 8000] {
        let s = stderr(k);
        assert!(s <= prev, "stderr grew at {k}");
        if prev.is_finite() {
            let ratio = s / prev;
            assert!(
                (ratio / (1.0 / 2f64.sqrt()) - 1.0).abs() <= 0.2,
                "ratio {ratio} at {k}"
            );
        }
        prev = s;
    }
}

#[test]
fn monte_carlo_matches_spectral_solution() {
    let g = Grid2D::new(32).unwrap();
    let terminal = sample_random_terminal(g, 7, 4).unwrap();
    let velocity = sample_random_velocity(g, 7);
    let points = probe_points(g, 16);
    let report = compare_with_pde(
        &points,
        &terminal,
        &velocity,
        0.1,
        &SdeConfig {
            n_paths: 20_000,
            seed: 7,
            ..Default::default()
        },
        &DiffusionConfig::default(),
    )
    .unwrap();
    assert!(report.max_err_over_stderr <= 4.0, "{report:#?}");
    assert!(report.max_abs_err <= 0.05, "{report:#?}");
}
