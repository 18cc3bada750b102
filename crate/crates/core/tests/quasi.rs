use std::sync::Arc;

use bsdeflow_core::problem::*;
use bsdeflow_core::quasi::*;
use bsdeflow_core::sde::*;

fn harmonic_panel() -> Vec<(String, Quadratic)> {
    vec![
        ("1".into(), Quadratic::constant(2, 1.0)),
        ("x1".into(), Quadratic::linear(0.0, vec![1.0, 0.0])),
        ("x2".into(), Quadratic::linear(0.0, vec![0.0, 1.0])),
        ("x1^2-x2^2".into(), Quadratic { c0: 0.0, lin: vec![0.0, 0.0], hess: vec![2.0, 0.0, 0.0, -2.0] }),
        ("x1*x2".into(), Quadratic { c0: 0.0, lin: vec![0.0, 0.0], hess: vec![0.0, 1.0, 1.0, 0.0] }),
    ]
}

#[test]
fn harmonic_panel_martingales_on_the_disk() {
    let b = builtin("tp1").unwrap();
    let ens = simulate_ensemble(&b.spec, &b.domain, &[0.5, 0.0], &SimConfig::new(1e-3, 10_000, 11)).unwrap();
    let panel = harmonic_panel();
    let tests: Vec<TestFunction<'_>> = panel.iter().map(|(n, v)| TestFunction { name: n.clone(), v }).collect();
    let q = QuasiSpec::first(SchemeSelector::Switching { p: 1.0 }, Some(b.interior.clone()), vec![1.0, 0.0])
        .with_eta(vec![0.0, 0.0]);
    let r = martingale_statistic(&tests, &ens, &b.spec, &b.domain, &q, &[0.05, 0.1, 0.2], 3.0).unwrap();
    assert_eq!(r.rows.len(), 30);
    assert!(r.pass, "{:#?}", r.rows);
    assert_eq!(r.flagged, 0);
}

#[test]
fn normal_derivative_ratio_follows_its_sde() {
    // Ψ = ψ_(ξ)(X) against an Euler scheme for
    // dΨ = Σ (Ψ/ψ) ψ_(σ_i) dW^i + [(Lψ)_(ξ) + 2r Lψ − Σ ψ_(σ_i) π^i] dt, with Lψ ≡ −2 on the disk
    let b = builtin("tp1").unwrap();
    let dom = &b.domain;
    let x0 = [0.7f64.sqrt(), 0.0];
    let err = |h: f64| -> f64 {
        let ens = simulate_ensemble(&b.spec, dom, &x0, &SimConfig::new(h, 400, 5)).unwrap();
        let q = QuasiSpec::first(SchemeSelector::Boundary { p: 1.0 }, None, vec![1.0, 0.5]).with_horizon(0.05);
        let mut total = 0.0;
        let mut grad = [0.0; 2];
        for p in 0..ens.n_paths {
            let mut w = QuasiWalker::new(&b.spec, dom, &q, &ens, p).unwrap();
            dom.psi.gradient(w.state(), &mut grad);
            let mut big_psi = grad[0] * w.xi()[0] + grad[1] * w.xi()[1];
            let mut worst = 0.0f64;
            while w.stopped().is_none() {
                let x = w.state().to_vec();
                let c = w.coeffs().clone();
                let psi = dom.psi.value(&x);
                dom.psi.gradient(&x, &mut grad);
                let s = std::f64::consts::SQRT_2;
                let psi_sigma = [grad[0] * s, grad[1] * s];
                w.step();
                let dw = w.last_increment();
                big_psi += (big_psi / psi) * (psi_sigma[0] * dw[0] + psi_sigma[1] * dw[1])
                    + (2.0 * c.r * -2.0 - psi_sigma[0] * c.pi[0] - psi_sigma[1] * c.pi[1]) * h;
                dom.psi.gradient(w.state(), &mut grad);
                let exact = grad[0] * w.xi()[0] + grad[1] * w.xi()[1];
                worst = worst.max((exact - big_psi).abs());
            }
            total += worst;
        }
        total / ens.n_paths as f64
    };
    let (coarse, fine) = (err(1e-4), err(2.5e-5));
    assert!(fine < coarse / 1.6, "{coarse} -> {fine}");
    assert!(fine < 0.05, "{fine}");
}

#[test]
fn second_quasi_derivative_matches_flow_second_difference() {
    // σ(x) = x²/2 on (1, 2): η solves dη = (ξ² + xη) dW; compare with (X^δ − 2X + X^{−δ})/δ²
    let b = builtin("tp2").unwrap();
    let spec = ProblemSpec {
        diffusion: Arc::new(ScalarPolyDiffusion { sigma: vec![0.0, 0.0, 0.5], drift: vec![] }),
        ..b.spec.clone()
    };
    let h = 1e-3;
    let ens = simulate_ensemble(&spec, &b.domain, &[1.5], &SimConfig::new(h, 200, 9)).unwrap();
    let q = QuasiSpec::first(SchemeSelector::Zero, None, vec![1.0]).with_eta(vec![0.0]);
    let sup_err = |delta: f64| -> f64 {
        let mut worst = 0.0f64;
        for p in 0..ens.n_paths {
            let mut w = QuasiWalker::new(&spec, &b.domain, &q, &ens, p).unwrap();
            let mut up = PathWalker::new(&spec, &[1.5 + delta], h, ens.seed, p as u64);
            let mut dn = PathWalker::new(&spec, &[1.5 - delta], h, ens.seed, p as u64);
            while w.stopped().is_none() {
                w.step();
                up.advance();
                dn.advance();
                let fd = (up.state()[0] - 2.0 * w.state()[0] + dn.state()[0]) / (delta * delta);
                worst = worst.max((fd - w.eta().unwrap()[0]).abs());
            }
        }
        worst
    };
    let (e1, e2) = (sup_err(1e-2), sup_err(5e-3));
    let ratio = e1 / e2;
    assert!((3.0..=5.0).contains(&ratio), "{e1} / {e2} = {ratio}");
}

#[test]
fn trajectory_round_trips_through_json() {
    let b = builtin("tp1").unwrap();
    let ens = simulate_ensemble(&b.spec, &b.domain, &[0.5, 0.0], &SimConfig::new(1e-2, 5, 3)).unwrap();
    let q = QuasiSpec::first(SchemeSelector::Boundary { p: 2.0 }, None, vec![0.0, 1.0]);
    let t = evolve_first(&ens, &b.spec, &b.domain, &q).unwrap();
    let back: QuasiTrajectory = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
    assert_eq!(back, t);
    for p in &t.paths {
        // ξ⁰ is the martingale transform Σ π·ΔW with ξ⁰₀ = 0
        assert_eq!(p.xi0_adj[0], 0.0);
        assert_eq!(p.xi0_adj.len(), p.stop_index + 1);
        assert_eq!(&p.xi[..2], &[0.0, 1.0]);
    }
}

#[test]
fn adjoint_identity_for_second_order() {
    let b = builtin("tp1").unwrap();
    let ens = simulate_ensemble(&b.spec, &b.domain, &[0.1, 0.2], &SimConfig::new(1e-3, 20, 4)).unwrap();
    let q =
        QuasiSpec::first(SchemeSelector::Interior, Some(b.interior.clone()), vec![1.0, -1.0]).with_eta(vec![0.2, 0.0]);
    for p in 0..ens.n_paths {
        let mut w = QuasiWalker::new(&b.spec, &b.domain, &q, &ens, p).unwrap();
        let (mut xi0, mut qv, mut pt) = (0.0, 0.0, 0.0);
        while w.stopped().is_none() {
            let c = w.coeffs().clone();
            w.step();
            let dw = w.last_increment();
            xi0 += c.pi[0] * dw[0] + c.pi[1] * dw[1];
            qv += (c.pi[0] * c.pi[0] + c.pi[1] * c.pi[1]) * 1e-3;
            pt += c.pi_tilde[0] * dw[0] + c.pi_tilde[1] * dw[1];
            assert!((w.xi0() - xi0).abs() < 1e-12);
            assert!((w.eta0() - (xi0 * xi0 - qv + pt)).abs() < 1e-12);
        }
    }
}
