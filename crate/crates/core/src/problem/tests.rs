use super::*;
use approx::assert_relative_eq;
use proptest::prelude::*;

fn tp1() -> Builtin {
    builtin("tp1").unwrap()
}

fn with_diffusion(base: &ProblemSpec, dims: Dims, diffusion: Arc<dyn Diffusion>) -> ProblemSpec {
    ProblemSpec { dims, diffusion, ..base.clone() }
}

fn interval(a: f64, b: f64) -> DomainSpec {
    DomainSpec::new(
        Arc::new(IntervalLevelSet { axis: 0, a, b, kappa: 4.0 / (b - a).powi(2) }),
        0.5,
        0.01,
        vec![(a, b)],
        1.0,
    )
    .unwrap()
}

fn scalar_problem(sigma: Vec<f64>, drift: Vec<f64>, g: Arc<dyn SmoothField>) -> ProblemSpec {
    ProblemSpec {
        name: "scalar".into(),
        dims: Dims { d: 1, d1: 1, k: 1 },
        diffusion: Arc::new(ScalarPolyDiffusion { sigma, drift }),
        driver: Arc::new(ZeroDriver),
        g,
        constants: Constants::new(1.0, 1.5, 0.3, -0.3, 10.0),
        exact: None,
    }
}

#[test]
fn tp1_domain_hypotheses() {
    let b = tp1();
    let grid = b.domain.grid(15, false);
    let rep = validate_hypotheses(&b.spec, &b.domain, &grid).unwrap();
    let h2 = rep.get("H2").unwrap();
    assert!(h2.pass);
    // Lψ ≡ −2, and |ψ_x| = |x| ≈ 1 at the boundary samples
    assert_relative_eq!(h2.margin, -1.0, epsilon = 1e-12);
    let h9 = rep.get("H9").unwrap();
    assert!(h9.pass);
    assert_relative_eq!(h9.margin, -1.0, epsilon = 1e-12);
    assert!(rep.get("H3").unwrap().pass);
    assert!(rep.get("PSD").unwrap().pass);
    assert!(rep.boundary_points >= 64);
}

#[test]
fn constant_level_set_fails_h2() {
    let b = tp1();
    let dom = DomainSpec::new(Arc::new(ConstantLevelSet(1.0)), 0.45, 0.05, vec![(-1.0, 1.0); 2], 1.0).unwrap();
    let grid = dom.grid(9, false);
    let rep = validate_hypotheses(&b.spec, &dom, &grid).unwrap();
    let h2 = rep.get("H2").unwrap();
    assert!(!h2.pass);
    assert_eq!(h2.margin, 1.0);
}

#[test]
fn hypotheses_reject_bad_grids() {
    let b = tp1();
    assert!(matches!(validate_hypotheses(&b.spec, &b.domain, &[]), Err(ProblemError::InvalidArgument(_))));
    assert!(validate_hypotheses(&b.spec, &b.domain, &[vec![2.0, 0.0]]).is_err());
}

#[test]
fn nonfinite_callback_names_the_point() {
    let b = tp1();
    let dom = DomainSpec::new(Arc::new(ConstantLevelSet(f64::NAN)), 0.45, 0.05, vec![(-1.0, 1.0); 2], 1.0).unwrap();
    match validate_hypotheses(&b.spec, &dom, &[vec![0.1, 0.2]]) {
        Err(ProblemError::NonFinite { point, .. }) => assert_eq!(point, vec![0.1, 0.2]),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn domain_parameters_are_validated() {
    let psi: Arc<dyn LevelSet> = Arc::new(ConstantLevelSet(1.0));
    assert!(DomainSpec::new(psi.clone(), 0.3, 0.09, vec![(0.0, 1.0)], 1.0).is_err());
    assert!(DomainSpec::new(psi.clone(), 1.0, 0.01, vec![(0.0, 1.0)], 1.0).is_err());
    assert!(DomainSpec::new(psi, 0.3, 0.089, vec![(0.0, 1.0)], 1.0).is_ok());
}

#[test]
fn regions_overlap_between_lambda_squared_and_lambda() {
    let dom = tp1().domain;
    // ψ = 0.3 ∈ (λ², λ) for λ = 0.45
    let r = (1.0f64 - 0.6).sqrt();
    let reg = dom.region(&[r, 0.0]);
    assert!(reg.inside && reg.near_boundary && reg.interior);
    let reg = dom.region(&[0.0, 0.0]);
    assert!(reg.interior && !reg.near_boundary);
    assert!(!dom.region(&[1.0, 0.5]).inside);
}

#[test]
fn h7_examples() {
    assert!(check_h7(0.5, 1.0, 0.3, -0.1, -0.455).pass);
    let r = check_h7(1.0, 1.0, 0.3, -0.1, -0.955);
    assert!(!r.pass);
    assert_eq!(r.failing(), vec!["mu < L"]);
    let r = check_h7(0.5, 1.0, 0.3, 0.0, -0.455);
    assert_eq!(r.failing(), vec!["2 beta < 0"]);
    let c = tp1().spec.constants;
    assert!(check_h7(c.mu, c.l, c.l0, c.beta, c.vartheta).pass);
}

#[test]
fn h10_constant_coefficients_threshold() {
    let base = tp1().spec;
    let spec = with_diffusion(
        &base,
        base.dims,
        Arc::new(ConstantDiffusion { sigma: vec![1.0, 0.5, 0.0, 2.0], drift: vec![0.3, -1.0] }),
    );
    let dom = tp1().domain;
    let scheme = InteriorScheme::zero(2, 0.0);
    let samples = unit_direction_samples(&dom.grid(9, false), 50, 1);
    assert!(check_h10(&spec, &dom, &scheme, 1.0, -0.25, &samples).unwrap().pass);
    assert!(check_h10(&spec, &dom, &scheme, 1.0, -0.3, &samples).unwrap().pass);
    let r = check_h10(&spec, &dom, &scheme, 1.0, -0.2, &samples).unwrap();
    assert!(!r.pass);
    assert_relative_eq!(r.worst_margin, 4.0 * -0.2 + 1.0, epsilon = 1e-12);
}

#[test]
fn h10_tp1_with_large_m() {
    let b = tp1();
    let samples = unit_direction_samples(&b.domain.grid(15, false), 100, 2);
    let scheme = InteriorScheme::zero(2, 50.0);
    assert!(check_h10(&b.spec, &b.domain, &scheme, 1.0, -0.3, &samples).unwrap().pass);
}

#[test]
fn h10_tp1_disk_scheme_covers_both_orders() {
    let b = tp1();
    let samples = unit_direction_samples(&b.domain.grid(15, false), 400, 3);
    for p in [1.0, 2.0] {
        let r = check_h10(&b.spec, &b.domain, &b.interior, p, -0.3, &samples).unwrap();
        assert!(r.pass, "p = {p}: margin {}", r.worst_margin);
    }
}

#[test]
fn h10_rejects_unnormalized_directions() {
    let b = tp1();
    let r = check_h10(&b.spec, &b.domain, &b.interior, 1.0, -0.3, &[(vec![0.0, 0.0], vec![1.0 + 1e-6, 0.0])]);
    assert!(matches!(r, Err(ProblemError::InvalidArgument(_))));
    let r = check_h10(&b.spec, &b.domain, &b.interior, 1.0, -0.3, &[(vec![0.0, 0.0], vec![1.0 + 1e-9, 0.0])]);
    assert!(r.is_ok());
}

#[test]
fn tp2_interior_scheme_satisfies_both_orders() {
    let b = builtin("tp2").unwrap();
    let grid = b.domain.grid(101, false);
    let samples: Vec<_> = grid.iter().flat_map(|x| [(x.clone(), vec![1.0]), (x.clone(), vec![-1.0])]).collect();
    for p in [1.0, 2.0] {
        assert!(check_h10(&b.spec, &b.domain, &b.interior, p, -0.3, &samples).unwrap().pass);
    }
}

#[test]
fn g_zero_has_zero_norms() {
    let b = tp1();
    let spec = ProblemSpec { g: Arc::new(ConstantField { value: vec![0.0] }), ..b.spec };
    let r = compute_norms(&spec, &b.domain, &NormConfig { resolution: 9, ..Default::default() }).unwrap();
    let g = r.g;
    for v in [g.c0, g.c1, g.c2, g.c01, g.c11] {
        assert_eq!(v, 0.0);
    }
    assert!(r.lower_bounds);
}

#[test]
fn identity_on_unit_interval_norms() {
    let spec = scalar_problem(vec![1.0], vec![0.0], Arc::new(Quadratic::linear(0.0, vec![1.0])));
    let r = compute_norms(&spec, &interval(0.0, 1.0), &NormConfig { resolution: 11, ..Default::default() }).unwrap();
    assert_relative_eq!(r.g.c0, 1.0);
    assert_relative_eq!(r.g.c1, 2.0);
    assert_relative_eq!(r.g.lip, 1.0, epsilon = 1e-12);
    assert_relative_eq!(r.g.c01, 2.0, epsilon = 1e-12);
}

#[test]
fn tp1_g_norms() {
    let b = tp1();
    let r = compute_norms(&b.spec, &b.domain, &NormConfig { resolution: 21, ..Default::default() }).unwrap();
    assert_relative_eq!(r.g.c0, 1.0);
    assert_relative_eq!(r.g.c1, 3.0);
    assert_relative_eq!(r.g.c2, 3.0 + 8f64.sqrt(), epsilon = 1e-12);
    assert_eq!(r.f.f0, 0.0);
    assert_eq!(r.f.f01, 0.0);
    assert_relative_eq!(r.psi.c0, 0.5);
    assert!(r.g.lip <= 2.0 + 1e-12 && r.g.lip > 1.8);
}

#[test]
fn norm_resolution_is_validated() {
    let b = tp1();
    assert!(compute_norms(&b.spec, &b.domain, &NormConfig { resolution: 7, ..Default::default() }).is_err());
}

#[test]
fn tp2_driver_norms() {
    let b = builtin("tp2").unwrap();
    let r = compute_norms(&b.spec, &b.domain, &NormConfig { resolution: 9, ..Default::default() }).unwrap();
    // f = −y: no x dependence, constant partials
    assert_eq!(r.f.f0, 0.0);
    assert_eq!(r.f.lip_x, 0.0);
    assert_eq!(r.f.f11, 0.0);
    assert_eq!(r.yz_samples, 9);
}

#[test]
fn builtins_pass_the_derivative_gate() {
    for name in builtin_names() {
        let b = builtin(name).unwrap();
        let grid = b.domain.grid(9, false);
        let rep = check_derivatives(&b.spec, &b.domain, &grid, 1e-5, 4).unwrap();
        assert_eq!(rep.points, grid.len(), "{name}");
    }
}

#[test]
fn derivative_gate_catches_wrong_callbacks() {
    struct Wrong;
    impl Diffusion for Wrong {
        fn sigma(&self, x: &[f64], out: &mut [f64]) {
            out[0] = x[0] * x[0];
        }
        fn sigma_dir(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
            out[0] = x[0] * y[0];
        }
        fn sigma_dir2(&self, _x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
            out[0] = y[0] * z[0];
        }
        fn drift(&self, _x: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn drift_dir(&self, _x: &[f64], _y: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn drift_dir2(&self, _x: &[f64], _y: &[f64], _z: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
    }
    let mut spec = scalar_problem(vec![0.0], vec![0.0], Arc::new(Quadratic::linear(0.0, vec![1.0])));
    spec.diffusion = Arc::new(Wrong);
    let dom = interval(1.0, 2.0);
    match check_derivatives(&spec, &dom, &dom.grid(9, false), 1e-5, 0) {
        Err(ProblemError::DerivativeMismatch { what, .. }) => assert_eq!(what, "sigma_(y)"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn tp2_solution_solves_the_euler_equation() {
    let u = tp2_solution(0.5, 1.0);
    let (a1, a2) = euler_exponents(0.5, 1.0);
    assert_relative_eq!(a1, 2f64.sqrt(), epsilon = 1e-15);
    assert_relative_eq!(a2, -(2f64.sqrt()), epsilon = 1e-15);
    assert_relative_eq!(u.derivatives(1.0).0, 1.0, epsilon = 1e-14);
    assert_relative_eq!(u.derivatives(2.0).0, 2.0, epsilon = 1e-14);
    for x in [1.1, 1.5, 1.9] {
        let (v, d1, d2) = u.derivatives(x);
        assert!((0.5 * x * x * d2 + 0.5 * x * d1 - v).abs() < 1e-12);
    }
}

#[test]
fn tp3_source_makes_the_solution_exact() {
    // Lu* + f(x, u*) = 0 for both drivers
    for name in ["tp3", "tp3-semilinear"] {
        let b = builtin(name).unwrap();
        let u = b.spec.exact.clone().unwrap();
        for x in b.domain.grid(9, false) {
            let (mut uv, mut grad, mut hess) = ([0.0], [0.0; 2], [0.0; 4]);
            u.value(&x, &mut uv);
            u.jacobian(&x, &mut grad);
            u.hessian(&x, &mut hess);
            let lu = b.spec.generator(&x, &grad, &hess);
            let mut f = [0.0];
            b.spec.driver.value(&x, &uv, &[0.0, 0.0], &mut f);
            assert!((lu + f[0]).abs() < 1e-12, "{name} at {x:?}");
        }
    }
}

#[test]
fn driver_only_depends_on_x_detection() {
    let grid = tp1().domain.grid(9, false);
    assert!(builtin("tp3").unwrap().spec.driver_is_x_only(&grid, 10, 0));
    assert!(!builtin("tp3-semilinear").unwrap().spec.driver_is_x_only(&grid, 10, 0));
}

#[test]
fn interior_scheme_validation() {
    let b = tp1();
    b.interior.validate(b.spec.dims, &b.domain.grid(9, false), 0).unwrap();
    let nonlinear = InteriorScheme {
        q: Arc::new(|_x, y, out| {
            let v = y[0] * y[0];
            out.copy_from_slice(&[0.0, v, -v, 0.0]);
        }),
        ..b.interior.clone()
    };
    assert!(nonlinear.validate(b.spec.dims, &[vec![0.1, 0.2]], 0).is_err());
    let asymmetric =
        InteriorScheme { q: Arc::new(|_x, y, out| out.copy_from_slice(&[0.0, y[0], y[0], 0.0])), ..b.interior };
    assert!(asymmetric.validate(b.spec.dims, &[vec![0.1, 0.2]], 0).is_err());
}

#[test]
fn boundary_samples_sit_just_inside() {
    let dom = tp1().domain;
    let pts = dom.boundary_samples(&[0.0, 0.0], 32, 1e-6, 0);
    assert_eq!(pts.len(), 32);
    for p in pts {
        let v = dom.psi.value(&p);
        assert!(v > 0.0 && v <= 1e-6);
    }
}

/// The scalar inequality `2β + 1 + 2b₁ + |σ'|² ≤ a(x)` for `σ = x`, `b = b₁x`, `a = x²/2`.
fn scalar_reduction_holds(x: f64, b1: f64, beta: f64) -> bool {
    2.0 * beta + 1.0 + 2.0 * b1 + 1.0 <= x * x / 2.0
}

proptest! {
    #[test]
    fn vartheta_recomputation_satisfies_the_identity(mu in 0.01..5.0f64, l0 in 0.0..3.0f64) {
        let r = check_h7(mu, mu + 1.0, l0, -0.1, (-2.0 * mu + l0 * l0) / 2.0);
        prop_assert!(r.clauses[4].holds);
    }

    #[test]
    fn h10_matches_scalar_reduction(x in 1.0..3.0f64, b1 in -2.0..2.0f64, beta in -3.0..0.0f64) {
        let spec = scalar_problem(vec![0.0, 1.0], vec![0.0, b1], Arc::new(Quadratic::linear(0.0, vec![1.0])));
        let dom = interval(0.5, 3.5);
        let scheme = InteriorScheme::zero(1, 1.0);
        let margin = h10_margin(&spec, &scheme, 0.5, beta, &[x], &[1.0]);
        // LHS − RHS = 1 + 2b₁ − (−2β − 1) − x²/2
        prop_assert!((margin - (2.0 * beta + 2.0 + 2.0 * b1 - x * x / 2.0)).abs() < 1e-12);
        let r = check_h10(&spec, &dom, &scheme, 0.5, beta, &[(vec![x], vec![1.0])]).unwrap();
        let direct = scalar_reduction_holds(x, b1, beta);
        prop_assert!(r.pass == direct || margin.abs() < 1e-12);
    }

    #[test]
    fn diffusion_matrix_is_psd(x0 in -0.7..0.7f64, x1 in -0.7..0.7f64) {
        let spec = tp1().spec;
        let a = spec.a(&[x0, x1]);
        prop_assert_eq!(a[1], a[2]);
        prop_assert!(a[0] >= 0.0 && a[0] * a[3] - a[1] * a[2] >= -1e-12);
    }

}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn norms_are_monotone_under_nested_refinement(n in 8usize..14) {
        let b = builtin("tp3").unwrap();
        let coarse = compute_norms(&b.spec, &b.domain, &NormConfig { resolution: n, max_pairs: usize::MAX, max_yz_samples: 1, yz_per_axis: 2, ..Default::default() }).unwrap();
        let fine = compute_norms(&b.spec, &b.domain, &NormConfig { resolution: 2 * n - 1, max_pairs: usize::MAX, max_yz_samples: 1, yz_per_axis: 2, ..Default::default() }).unwrap();
        let c = [coarse.g.c0, coarse.g.c1, coarse.g.c2, coarse.g.c01, coarse.g.c11, coarse.f.f0, coarse.f.lip_x, coarse.f.f11];
        let f = [fine.g.c0, fine.g.c1, fine.g.c2, fine.g.c01, fine.g.c11, fine.f.f0, fine.f.lip_x, fine.f.f11];
        for (a, b) in c.iter().zip(&f) {
            prop_assert!(b >= a);
        }
        prop_assert!(coarse.g.c0 <= coarse.g.c1 && coarse.g.c1 <= coarse.g.c2);
    }
}

#[test]
fn flat_level_set_fails_the_gradient_condition() {
    let b = builtin("tp2").unwrap();
    let dom = DomainSpec::new(
        Arc::new(IntervalLevelSet { axis: 0, a: 1.0, b: 2.0, kappa: 0.5 }),
        0.1,
        0.001,
        vec![(1.0, 2.0)],
        0.125,
    )
    .unwrap();
    let rep = validate_hypotheses(&b.spec, &dom, &dom.grid(21, false)).unwrap();
    let gradient = rep.get("H2-gradient").unwrap();
    assert!(!gradient.pass);
    assert_relative_eq!(gradient.margin, 0.5 - GRADIENT_SLACK, epsilon = 1e-8);
    // and Lψ = κx(1.5 − 2x) ≥ −1 somewhere, so H2 fails too
    assert!(!rep.get("H2").unwrap().pass);
    let tp2 = validate_hypotheses(&b.spec, &b.domain, &b.domain.grid(41, false)).unwrap();
    assert!(tp2.all_pass(), "{tp2:?}");
}
