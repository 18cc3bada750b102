use bsdeflow_core::bsde::*;
use bsdeflow_core::problem::*;
use bsdeflow_core::sde::{simulate_ensemble, SimConfig};

fn picard(name: &str, x0: &[f64], h: f64, n: usize, seed: u64) -> (BsdeSolution, f64) {
    let b = builtin(name).unwrap();
    let ens = simulate_ensemble(&b.spec, &b.domain, x0, &SimConfig::new(h, n, seed)).unwrap();
    let input = BackwardInput::from_ensemble(&ens, &b.spec);
    let basis = default_basis(&b.spec, &b.domain);
    let sol = solve_picard(&input, &b.spec, &basis, &PicardConfig::default()).unwrap();
    let mut u = vec![0.0];
    b.spec.exact.as_ref().unwrap().value(x0, &mut u);
    (sol, u[0])
}

#[test]
fn tp2_picard_matches_euler_ode_solution() {
    let (sol, exact) = picard("tp2", &[1.5], 1e-3, 20_000, 11);
    println!("{:?} {:?} {} {:?}", sol.y0, sol.y0_stderr, exact, sol.residual_history);
    assert!(sol.converged);
    // linear driver: the residuals contract monotonically after the first sweep
    assert!(sol.residual_history[1..].windows(2).all(|w| w[1] <= w[0]));
    assert!((sol.y0[0] - exact).abs() <= 3.0 * sol.y0_stderr[0] + 0.01);
}

#[test]
fn tp3_semilinear_picard_matches_manufactured_solution() {
    let (sol, exact) = picard("tp3-semilinear", &[0.3, 0.4], 1e-3, 10_000, 12);
    println!("{:?} {:?} {}", sol.y0, sol.y0_stderr, exact);
    assert!(sol.residual_history[1..].windows(2).all(|w| w[1] <= w[0]));
    assert!(sol.converged);
    assert!((sol.y0[0] - exact).abs() <= 3.0 * sol.y0_stderr[0] + 0.01);
}

#[test]
fn default_basis_skips_fields_in_the_polynomial_span() {
    // TP1: ψ and g are quadratics
    let b = builtin("tp1").unwrap();
    assert_eq!(default_basis(&b.spec, &b.domain).dim(), 10);
    let b = builtin("tp3").unwrap();
    assert_eq!(default_basis(&b.spec, &b.domain).dim(), 11);
}

fn driver_free(name: &str, x0: &[f64], h: f64, n: usize, seed: u64) -> (BsdeSolution, f64) {
    let b = builtin(name).unwrap();
    let ens = simulate_ensemble(&b.spec, &b.domain, x0, &SimConfig::new(h, n, seed)).unwrap();
    let sol = estimate_u_driver_free(&ens, &b.spec).unwrap();
    let mut u = vec![0.0];
    b.spec.exact.as_ref().unwrap().value(x0, &mut u);
    (sol, u[0])
}

#[test]
fn tp1_driver_free_recovers_harmonic_solution() {
    let (sol, exact) = driver_free("tp1", &[0.5, 0.0], 1e-3, 20_000, 5);
    assert_eq!(exact, 0.25);
    assert!((sol.y0[0] - exact).abs() <= 3.0 * sol.y0_stderr[0] + 0.01, "{:?}", sol.y0);
    assert_eq!(sol.capped_fraction, 0.0);
}

#[test]
fn tp3_driver_free_recovers_manufactured_solution() {
    let (sol, exact) = driver_free("tp3", &[0.2, -0.5], 1e-3, 10_000, 6);
    assert!((sol.y0[0] - exact).abs() <= 3.0 * sol.y0_stderr[0] + 0.01, "{:?} vs {exact}", sol.y0);
}

fn apriori_ratio(name: &str, x0: &[f64], n: usize, seed: u64) -> f64 {
    let b = builtin(name).unwrap();
    let ens = simulate_ensemble(&b.spec, &b.domain, x0, &SimConfig::new(5e-3, n, seed)).unwrap();
    let input = BackwardInput::from_ensemble(&ens, &b.spec);
    let basis = default_basis(&b.spec, &b.domain);
    let cfg = PicardConfig { keep_paths: true, ..Default::default() };
    let sol = solve_picard(&input, &b.spec, &basis, &cfg).unwrap();
    let (ny, nz) = mbeta_norm(&sol, ens.h, b.spec.constants.beta, b.spec.dims.k, b.spec.dims.d1).unwrap();
    assert!(ny.is_finite() && nz.is_finite());
    let norms = compute_norms(&b.spec, &b.domain, &NormConfig::default()).unwrap();
    let a = apriori_functional(&sol, ens.h, b.spec.dims.k, b.spec.dims.d1).unwrap();
    a / (norms.g.c0.powi(2) + norms.f.f0.powi(2))
}

#[test]
fn apriori_ratio_is_stable_under_doubling_paths() {
    for (name, x0) in [("tp1", vec![0.5, 0.0]), ("tp2", vec![1.5]), ("tp3-semilinear", vec![0.3, 0.4])] {
        let r1 = apriori_ratio(name, &x0, 1000, 21);
        let r2 = apriori_ratio(name, &x0, 2000, 22);
        assert!(r1.is_finite() && r1 > 0.0);
        assert!(r2 / r1 < 2.0 && r1 / r2 < 2.0, "{name}: {r1} vs {r2}");
    }
}

#[test]
fn fitted_values_are_consistent_across_time_slices() {
    // Y_i = u(X_i): regressions at two slices agree on the common state region
    let b = builtin("tp1").unwrap();
    let ens = simulate_ensemble(&b.spec, &b.domain, &[0.0, 0.0], &SimConfig::new(5e-3, 4000, 31)).unwrap();
    let input = BackwardInput::from_ensemble(&ens, &b.spec);
    let basis = default_basis(&b.spec, &b.domain);
    let m = basis.dim();
    let fit_at = |i: usize| {
        let mut feats = Vec::new();
        let mut y = Vec::new();
        for p in input.paths.iter().filter(|p| p.steps(2) > i) {
            let mut phi = vec![0.0; m];
            basis.eval(&p.states[i * 2..i * 2 + 2], &mut phi);
            feats.extend(phi);
            y.push(p.terminal[0]);
        }
        OlsFit::fit(&feats, m, &y).unwrap()
    };
    let (f1, f2) = (fit_at(10), fit_at(20));
    let mut phi = vec![0.0; m];
    for k in 0..8 {
        let a = k as f64 * std::f64::consts::PI / 4.0;
        for r in [0.0, 0.1, 0.2] {
            basis.eval(&[r * a.cos(), r * a.sin()], &mut phi);
            let (v1, s1) = f1.predict(&phi);
            let (v2, s2) = f2.predict(&phi);
            assert!((v1 - v2).abs() <= 2.0 * (s1 * s1 + s2 * s2).sqrt(), "r={r}: {v1} {v2} {s1} {s2}");
        }
    }
}
