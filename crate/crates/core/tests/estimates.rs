use bsdeflow_core::estimates::*;
use bsdeflow_core::problem::*;

fn radial_panel(dom: &DomainSpec, rays: usize, per: usize) -> Vec<PanelPoint> {
    let dirs: Vec<Vec<f64>> = (0..rays)
        .map(|i| {
            let t = 0.3 + std::f64::consts::TAU * i as f64 / rays as f64;
            vec![t.cos(), t.sin()]
        })
        .collect();
    approach_panel(dom, &[0.0, 0.0], &dirs, per, dom.delta1, &|_, d| d.to_vec()).unwrap()
}

#[test]
fn tp1_gradient_panel_with_analytic_derivatives() {
    let b = builtin("tp1").unwrap();
    let norms = compute_norms(&b.spec, &b.domain, &NormConfig::default()).unwrap();
    let panel = radial_panel(&b.domain, 3, 10);
    let r = verify_bounds(1, &b.spec, &b.domain, &panel, &DerivativeSource::Analytic, 0.5, &norms).unwrap();
    assert!(r.pass, "{r:#?}");
    assert!(r.n_calibrated > 0.0 && r.n_calibrated.is_finite());
    assert!(r.psi.iter().any(|p| (p - b.domain.delta1).abs() < 1e-9));
}

#[test]
fn tp2_hessian_panel_with_analytic_derivatives() {
    let b = builtin("tp2").unwrap();
    let norms = compute_norms(&b.spec, &b.domain, &NormConfig::default()).unwrap();
    let mut panel = approach_panel(&b.domain, &[1.5], &[vec![1.0]], 12, b.domain.delta1, &|_, _| vec![1.0]).unwrap();
    panel.extend(approach_panel(&b.domain, &[1.5], &[vec![-1.0]], 12, b.domain.delta1, &|_, _| vec![1.0]).unwrap());
    let r = verify_bounds(2, &b.spec, &b.domain, &panel, &DerivativeSource::Analytic, 0.5, &norms).unwrap();
    assert!(r.pass, "{r:#?}");
}

#[test]
fn tp1_normal_derivative_at_the_rightmost_point() {
    let b = builtin("tp1").unwrap();
    let norms = compute_norms(&b.spec, &b.domain, &NormConfig::default()).unwrap();
    let ys = b.domain.boundary_samples(&[0.0, 0.0], 16, 1e-9, 0);
    let n = calibrate_normal_constant(&b.spec, &b.domain, &ys, &norms).unwrap();
    let r = normal_derivative_bound(
        &b.spec,
        &b.domain,
        &[1.0, 0.0],
        &NormalDerivativeConfig::new(100_000, 4),
        &norms,
        n * 1.1,
    )
    .unwrap();
    assert!((r.measured - 2.0).abs() <= 0.1, "{r:#?}");
    assert_eq!(r.verdict, NormalVerdict::Pass, "{r:#?}");
}
