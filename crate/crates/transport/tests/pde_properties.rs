use std::f64::consts::PI;

use transport::{
    grad_sup_norm, modulus_of_continuity, sample_random_terminal, sample_random_velocity,
    solve_convection_diffusion, verify_gradient_bound, DiffusionConfig, Grid2D, ScalarField2D,
    VelocityField,
};

fn smooth(x: f64, y: f64) -> f64 {
    (2.0 * PI * x).sin() * (2.0 * PI * y).cos() + 0.3 * (2.0 * PI * (x + y)).sin()
}

#[test]
fn constant_velocity_transport_follows_characteristics() {
    let g = Grid2D::new(128).unwrap();
    let c = [0.37, -0.61];
    let f = ScalarField2D::from_fn(g, smooth);
    let u = solve_convection_diffusion(
        &f,
        &VelocityField::constant(g, c),
        &DiffusionConfig::default(),
    )
    .unwrap();
    let shifted = ScalarField2D::from_fn(g, |x, y| smooth(x + c[0], y + c[1]));
    let err = u.max_abs_diff(&shifted);
    assert!(err <= 1e-4, "max error {err}");
}

#[test]
fn dealiasing_does_not_change_smooth_transport() {
    let g = Grid2D::new(32).unwrap();
    let f = ScalarField2D::from_fn(g, smooth);
    let v = VelocityField::constant(g, [0.2, 0.1]);
    let on = solve_convection_diffusion(&f, &v, &DiffusionConfig::default()).unwrap();
    let off = solve_convection_diffusion(
        &f,
        &v,
        &DiffusionConfig {
            dealias: false,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(on.max_abs_diff(&off) < 1e-12);
}

#[test]
fn diffusion_regularizes_random_transport() {
    let g = Grid2D::new(128).unwrap();
    let f = sample_random_terminal(g, 7, 16).unwrap();
    let v = sample_random_velocity(g, 7);
    let mut grads = Vec::new();
    let mut moduli = Vec::new();
    for sigma in [0.0, 0.01, 0.1] {
        let u = solve_convection_diffusion(&f, &v, &DiffusionConfig::with_sigma(sigma)).unwrap();
        grads.push(grad_sup_norm(&u));
        moduli.push(modulus_of_continuity(&u, 1).unwrap());
    }
    assert!(grads[0] > grads[1] && grads[1] > grads[2], "{grads:?}");
    assert!(moduli[0] > moduli[1] && moduli[1] > moduli[2], "{moduli:?}");
}

#[test]
fn gradient_bound_holds_for_random_fields() {
    let g = Grid2D::new(32).unwrap();
    for seed in 0..20 {
        let u0 = sample_random_terminal(g, seed, 4).unwrap();
        for sigma in [0.1, 0.5, 1.0] {
            let b = verify_gradient_bound(&u0, None, sigma, &DiffusionConfig::default()).unwrap();
            assert!(b.holds, "seed {seed} sigma {sigma}: {b:?}");
        }
    }
}

#[test]
fn solver_is_deterministic() {
    let g = Grid2D::new(32).unwrap();
    let f = sample_random_terminal(g, 1, 8).unwrap();
    let v = sample_random_velocity(g, 2);
    let cfg = DiffusionConfig::with_sigma(0.05);
    let a = solve_convection_diffusion(&f, &v, &cfg).unwrap();
    let b = solve_convection_diffusion(&f, &v, &cfg).unwrap();
    assert_eq!(a, b);
}
