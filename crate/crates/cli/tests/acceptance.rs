//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Runs without the libtest harness so the lines always reach stdout.

use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use bsdeflow_core::barriers::{calibrate_lambda, calibrated_barrier_test, BarrierKind, BarrierSpec, CalibrationPlan};
use bsdeflow_core::bsde::estimate_u_driver_free;
use bsdeflow_core::estimates::{
    approach_panel, calibrate_normal_constant, normal_derivative_bound, verify_bounds, DerivativeSource,
    NormalDerivativeConfig, NormalVerdict,
};
use bsdeflow_core::perturbed::{flow_convergence, grad_estimate, hessian_estimate, DerivativeConfig};
use bsdeflow_core::problem::*;
use bsdeflow_core::quasi::{martingale_statistic, QuasiSpec, SchemeSelector, TestFunction};
use bsdeflow_core::rng::aux_rng;
use bsdeflow_core::sde::{exit_statistics, simulate_ensemble, SimConfig};
use rand::Rng;

type Check = std::result::Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn tp1() -> Builtin {
    builtin("tp1").expect("tp1")
}

fn ac1() -> Check {
    let b = tp1();
    let t = Instant::now();
    let ens = simulate_ensemble(&b.spec, &b.domain, &[0.5, 0.0], &SimConfig::new(1e-3, 100_000, 101)).map_err(err)?;
    let sol = estimate_u_driver_free(&ens, &b.spec).map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    let (y, se) = (sol.y0[0], sol.y0_stderr[0]);
    let allowed = 3.0 * se + 0.01;
    let pass = (y - 0.25).abs() <= allowed && secs <= 120.0;
    Ok((pass, format!("Y0 = {y:.5} (SE {se:.5}), |Y0 - 0.25| = {:.5} <= {allowed:.5}; {secs:.1} s", (y - 0.25).abs())))
}

fn ac2() -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, starts) in
        [("tp1", vec![vec![0.0, 0.0], vec![0.5, 0.0], vec![0.3, -0.6]]), ("tp2", vec![vec![1.2], vec![1.5], vec![1.8]])]
    {
        let b = builtin(name).expect("builtin");
        for (i, x0) in starts.iter().enumerate() {
            let cfg = SimConfig::new(1e-4, 10_000, 200 + i as u64);
            let ens = simulate_ensemble(&b.spec, &b.domain, x0, &cfg).map_err(err)?;
            let s = exit_statistics(&ens, &b.domain).map_err(err)?;
            let lemma = s.mean - 3.0 * s.stderr <= s.psi_x0;
            ok &= lemma;
            parts.push(format!("{name} {x0:?}: E[tau] = {:.4} (SE {:.4}), psi = {:.4}", s.mean, s.stderr, s.psi_x0));
            if name == "tp1" && i == 0 {
                let exact = (s.mean - 0.25).abs() <= 3.0 * s.stderr + 0.01;
                ok &= exact;
                parts.push(format!("center vs 0.25: {}", if exact { "ok" } else { "off" }));
            }
        }
    }
    Ok((ok, parts.join("; ")))
}

fn ac3() -> Check {
    let b = tp1();
    let ens = simulate_ensemble(&b.spec, &b.domain, &[0.5, 0.0], &SimConfig::new(1e-3, 10_000, 303)).map_err(err)?;
    let q = QuasiSpec::first(SchemeSelector::Boundary { p: 1.0 }, None, vec![1.0, 0.0]).with_eta(vec![0.0, 0.0]);
    let f = flow_convergence(&ens, &b.spec, &b.domain, &q, &[0.1, 0.05, 0.025], 1.0).map_err(err)?;
    let within = |r: &[f64]| r.iter().all(|v| (1.6..=2.6).contains(v));
    let first = within(&f.first_ratio);
    let second = within(&f.second_symmetric_ratio);
    Ok((
        first && second,
        format!(
            "first-order ratios {:?} ({}); symmetric second-order ratios {:?} ({}); one-sided second-order ratios {:?}; guard-stopped {:.3}",
            round(&f.first_ratio),
            if first { "in window" } else { "outside" },
            round(&f.second_symmetric_ratio),
            if second { "in window" } else { "outside" },
            round(&f.second_one_sided_ratio),
            f.guard_stopped
        ),
    ))
}

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}

fn harmonic_panel() -> Vec<(String, Quadratic)> {
    vec![
        ("1".into(), Quadratic::constant(2, 1.0)),
        ("x1".into(), Quadratic::linear(0.0, vec![1.0, 0.0])),
        ("x2".into(), Quadratic::linear(0.0, vec![0.0, 1.0])),
        ("x1^2-x2^2".into(), Quadratic { c0: 0.0, lin: vec![0.0, 0.0], hess: vec![2.0, 0.0, 0.0, -2.0] }),
        ("x1*x2".into(), Quadratic { c0: 0.0, lin: vec![0.0, 0.0], hess: vec![0.0, 1.0, 1.0, 0.0] }),
    ]
}

fn ac4() -> Check {
    let b = tp1();
    let ens = simulate_ensemble(&b.spec, &b.domain, &[0.5, 0.0], &SimConfig::new(1e-3, 100_000, 404)).map_err(err)?;
    let panel = harmonic_panel();
    let tests: Vec<TestFunction<'_>> = panel.iter().map(|(n, v)| TestFunction { name: n.clone(), v }).collect();
    let q = QuasiSpec::first(SchemeSelector::Switching { p: 1.0 }, Some(b.interior.clone()), vec![1.0, 0.0])
        .with_eta(vec![0.0, 0.0]);
    let r = martingale_statistic(&tests, &ens, &b.spec, &b.domain, &q, &[0.05, 0.1, 0.2], 3.0).map_err(err)?;
    let worst = r.rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
    let orders = r.rows.iter().map(|r| r.order).collect::<std::collections::BTreeSet<_>>();
    let pass = r.pass && r.rows.len() == 30 && orders.len() == 2;
    Ok((
        pass,
        format!("{} rows (orders {orders:?}), max |z| = {worst:.3}, family level {:.4}", r.rows.len(), r.family_level),
    ))
}

fn ac5() -> Check {
    let b = tp1();
    let plan = CalibrationPlan {
        lambdas: CalibrationPlan::halving(b.domain.lambda, 3),
        k1_start: 1.0,
        k1_max: 64.0,
        beta: b.spec.constants.beta,
        z_crit: 3.0,
        clip: 1e3,
        checkpoints: vec![0.05, 0.1, 0.2],
        n_paths: 20_000,
        h: None,
        pilot_seed: 501,
        confirm_seed: 502,
    };
    let xis = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]];
    let mut ok = true;
    let mut parts = Vec::new();
    for (kind, p) in
        [(BarrierKind::Interior, 1), (BarrierKind::Interior, 2), (BarrierKind::Boundary, 1), (BarrierKind::Boundary, 2)]
    {
        let x0 = |d: &DomainSpec| match kind {
            BarrierKind::Boundary => vec![(1.0 - d.lambda).sqrt(), 0.0],
            BarrierKind::Interior => vec![0.0, 0.0],
        };
        let r =
            calibrated_barrier_test(&b.spec, &b.domain, Some(&b.interior), kind, p, &xis, &x0, &plan).map_err(err)?;
        let fresh = r.runs.iter().all(|run| run.pilot.seed != run.confirmation.seed);
        let worst = r.runs.iter().flat_map(|run| run.confirmation.z.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
        ok &= r.pass && fresh && !r.runs.is_empty();
        parts.push(format!("{} lambda {} K1 {} max z {worst:.2}", r.barrier, r.lambda, r.k1));
    }
    Ok((ok, parts.join("; ")))
}

fn ac6() -> Check {
    let b = tp1();
    let template = BarrierSpec::b1(b.domain.lambda, 1.0).map_err(err)?;
    let cal = calibrate_lambda(&b.domain, &template, b.domain.lambda, &[0.0, 0.0], 100, 8, 40).map_err(err)?;
    let last = cal.history.last().ok_or("no ordering report")?;
    let pass = last.pass
        && last.outer_margin >= 0.0
        && last.inner_margin >= 0.0
        && last.n_outer == 100
        && last.n_inner == 100
        && last.n_directions == 8
        && last.phi_bounds;
    Ok((
        pass,
        format!(
            "lambda = {:e} after {} halvings; B1 - 4B2 margin {:.3e} on psi = lambda, B2 - 4B1 margin {:.3e} on psi = lambda^2",
            cal.lambda, cal.halvings, last.outer_margin, last.inner_margin
        ),
    ))
}

fn norms(b: &Builtin) -> std::result::Result<NormReport, String> {
    compute_norms(&b.spec, &b.domain, &NormConfig::default()).map_err(err)
}

fn ac7() -> Check {
    let b = tp1();
    let n = norms(&b)?;
    let dirs: Vec<Vec<f64>> = (0..3)
        .map(|i| {
            let t = 0.3 + std::f64::consts::TAU * i as f64 / 3.0;
            vec![t.cos(), t.sin()]
        })
        .collect();
    let panel = approach_panel(&b.domain, &[0.0, 0.0], &dirs, 10, b.domain.delta1, &|_, d| d.to_vec()).map_err(err)?;
    let r = verify_bounds(1, &b.spec, &b.domain, &panel, &DerivativeSource::Analytic, 0.5, &n).map_err(err)?;
    let cfg = DerivativeConfig::new(20_000, 707, Some(b.interior.clone()));
    let g = grad_estimate(&b.spec, &b.domain, &[0.5, 0.0], &[1.0, 0.0], &cfg).map_err(err)?;
    let close = (g.extrapolated[0] - 1.0).abs() <= g.ci95[0] + 0.05;
    Ok((
        r.pass && panel.len() == 30 && close,
        format!(
            "panel of {}: N = {:.4}, held-out max {:.4} ({}); grad = {:.4} ± {:.4} vs 1.0 ({:?})",
            panel.len(),
            r.n_calibrated,
            r.held_out_max,
            if r.pass { "ok" } else { "exceeds" },
            g.extrapolated[0],
            g.ci95[0],
            g.verdict
        ),
    ))
}

fn ac8() -> Check {
    let b = tp1();
    let cfg = DerivativeConfig::new(100_000, 808, Some(b.interior.clone()));
    let h = hessian_estimate(&b.spec, &b.domain, &[0.5, 0.0], &[1.0, 0.0], &cfg).map_err(err)?;
    let close = (h.extrapolated[0] - 2.0).abs() <= h.ci95[0] + 0.15;
    let t2 = builtin("tp2").expect("tp2");
    let n = norms(&t2)?;
    let mut panel =
        approach_panel(&t2.domain, &[1.5], &[vec![1.0]], 12, t2.domain.delta1, &|_, _| vec![1.0]).map_err(err)?;
    panel.extend(
        approach_panel(&t2.domain, &[1.5], &[vec![-1.0]], 12, t2.domain.delta1, &|_, _| vec![1.0]).map_err(err)?,
    );
    let r = verify_bounds(2, &t2.spec, &t2.domain, &panel, &DerivativeSource::Analytic, 0.5, &n).map_err(err)?;
    Ok((
        close && r.pass,
        format!(
            "hess = {:.4} ± {:.4} vs 2.0 ({:?}, quotients {:?}); tp2 order-2 panel held-out max {:.4} vs N = {:.4}",
            h.extrapolated[0],
            h.ci95[0],
            h.verdict,
            round(&h.quotient.iter().map(|q| q[0]).collect::<Vec<_>>()),
            r.held_out_max,
            r.n_calibrated
        ),
    ))
}

fn ac9() -> Check {
    let b = tp1();
    let n = norms(&b)?;
    let ys = b.domain.boundary_samples(&[0.0, 0.0], 16, 1e-9, 0);
    let nc = calibrate_normal_constant(&b.spec, &b.domain, &ys, &n).map_err(err)? * 1.1;
    let r =
        normal_derivative_bound(&b.spec, &b.domain, &[1.0, 0.0], &NormalDerivativeConfig::new(100_000, 909), &n, nc)
            .map_err(err)?;
    let pass = (r.measured - 2.0).abs() <= 0.1 && r.measured <= r.bound && r.verdict == NormalVerdict::Pass;
    Ok((
        pass,
        format!(
            "|u_n| = {:.4} (SE {:.4}), bound N(|g|_2 + |f0|_0) = {:.4} with N = {:.4}",
            r.measured, r.extrapolated_stderr, r.bound, nc
        ),
    ))
}

fn ac10() -> Check {
    let (a, bnd, kappa) = (0.1, 4.0, 1.0);
    let dom = DomainSpec::new(
        Arc::new(IntervalLevelSet { axis: 0, a, b: bnd, kappa }),
        0.3,
        0.02,
        vec![(a, bnd)],
        kappa * (bnd - a) * (bnd - a) / 4.0,
    )
    .map_err(err)?;
    let scheme = InteriorScheme::zero(1, 1.0);
    let mut rng = aux_rng(1010, 0);
    let mut disagreements = 0;
    let mut passes = 0;
    for _ in 0..1000 {
        let x: f64 = rng.random_range(a + 1e-3..bnd - 1e-3);
        let b1: f64 = rng.random_range(-3.0..3.0);
        let beta: f64 = rng.random_range(-3.0..0.0);
        let spec = ProblemSpec {
            name: "h10-family".into(),
            dims: Dims { d: 1, d1: 1, k: 1 },
            diffusion: Arc::new(ScalarPolyDiffusion { sigma: vec![0.0, 1.0], drift: vec![0.0, b1] }),
            driver: Arc::new(ZeroDriver),
            g: Arc::new(Quadratic::constant(1, 0.0)),
            constants: Constants::new(1.0, 1.5, 0.3, beta, 10.0),
            exact: None,
        };
        let r = check_h10(&spec, &dom, &scheme, 0.5, beta, &[(vec![x], vec![1.0])]).map_err(err)?;
        // 2β + 1 + 2b₁ + σ'² ≤ a(x) with σ' = 1 and a = x²/2
        let direct = 2.0 * beta + 1.0 + 2.0 * b1 + 1.0 <= 0.5 * x * x;
        disagreements += usize::from(r.pass != direct);
        passes += usize::from(direct);
    }
    Ok((disagreements == 0, format!("1000 triples, {passes} satisfy the inequality, {disagreements} disagreements")))
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).expect("write config");
    p
}

fn cli_run(cmd: &str, config: &Path, out: &Path) -> std::result::Result<i32, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_bsdeflow"))
        .args([cmd, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(err)?;
    Ok(status.status.code().unwrap_or(-1))
}

fn ac11() -> Check {
    use bsdeflow_core::perturbed::derivative_estimates;
    let b = tp1();
    let mut parts = Vec::new();
    let mut ok = true;
    // library runs
    let a = {
        let e = simulate_ensemble(&b.spec, &b.domain, &[0.5, 0.0], &SimConfig::new(1e-3, 20_000, 1111)).map_err(err)?;
        serde_json::to_string(&estimate_u_driver_free(&e, &b.spec).map_err(err)?).map_err(err)?
    };
    let a2 = {
        let e = simulate_ensemble(&b.spec, &b.domain, &[0.5, 0.0], &SimConfig::new(1e-3, 20_000, 1111)).map_err(err)?;
        serde_json::to_string(&estimate_u_driver_free(&e, &b.spec).map_err(err)?).map_err(err)?
    };
    ok &= a == a2;
    let cfg = DerivativeConfig::new(2_000, 1112, Some(b.interior.clone()));
    let d1 = serde_json::to_string(
        &derivative_estimates(&b.spec, &b.domain, &[0.5, 0.0], &[1.0, 0.0], &cfg, true).map_err(err)?,
    )
    .map_err(err)?;
    let d2 = serde_json::to_string(
        &derivative_estimates(&b.spec, &b.domain, &[0.5, 0.0], &[1.0, 0.0], &cfg, true).map_err(err)?,
    )
    .map_err(err)?;
    ok &= d1 == d2;
    parts.push(format!("library solve/derivative reruns identical: {}", a == a2 && d1 == d2));
    // CLI runs into two directories
    let tmp = tempfile::tempdir().map_err(err)?;
    let runs = [
        ("solve", "seed = 5\n[problem]\nbuiltin = \"tp1\"\n[numerics]\nn_paths = 5000\n[[points]]\nx = [0.5, 0.0]\n"),
        ("grad", "seed = 5\n[problem]\nbuiltin = \"tp1\"\n[numerics]\nn_paths = 2000\n[[points]]\nx = [0.5, 0.0]\nxi0 = [1.0, 0.0]\n"),
        ("verify-quasi", "seed = 5\n[problem]\nbuiltin = \"tp1\"\n[numerics]\nn_paths = 2000\n[quasi]\nflow_paths = 500\n[[points]]\nx = [0.5, 0.0]\nxi0 = [1.0, 0.0]\n"),
        ("verify-bounds", "seed = 5\n[problem]\nbuiltin = \"tp2\"\n[bounds]\norders = [1, 2]\ncenter = [1.5]\nper_ray = 12\n"),
        ("verify-barriers", "seed = 5\n[problem]\nbuiltin = \"tp1\"\n[numerics]\nn_paths = 1000\n[barriers]\nbarriers = [\"b2\"]\ndirections = [[1.0, 0.0]]\n"),
        ("hypotheses", "seed = 5\n[problem]\nbuiltin = \"tp2\"\n"),
    ];
    for (cmd, body) in runs {
        let cfgp = write_config(tmp.path(), &format!("{cmd}.toml"), body);
        let (o1, o2) = (tmp.path().join(format!("{cmd}-1")), tmp.path().join(format!("{cmd}-2")));
        let c1 = cli_run(cmd, &cfgp, &o1)?;
        let c2 = cli_run(cmd, &cfgp, &o2)?;
        let mut same = c1 == c2 && c1 != 2;
        for f in ["report.json", "summary.txt", "bounds.csv"] {
            let (p1, p2) = (o1.join(f), o2.join(f));
            if p1.exists() || p2.exists() {
                same &= std::fs::read(&p1).ok() == std::fs::read(&p2).ok();
            }
        }
        same &= o1.join("report.json").exists() && o1.join("meta.json").exists();
        ok &= same;
        parts.push(format!("{cmd}: {}", if same { "identical" } else { "DIFFERENT" }));
    }
    Ok((ok, parts.join("; ")))
}

fn main() {
    type Criterion = (&'static str, fn() -> Check);
    let criteria: [Criterion; 11] = [
        ("harmonic oracle", ac1),
        ("exit-time lemma", ac2),
        ("flow-derivative convergence", ac3),
        ("martingale definition", ac4),
        ("supermartingale barriers", ac5),
        ("barrier ordering", ac6),
        ("gradient bound", ac7),
        ("Hessian bound", ac8),
        ("normal-derivative bound", ac9),
        ("H10 reduction", ac10),
        ("determinism", ac11),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().trim_start_matches("AC").parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        println!(
            "AC{id:<2} {} {name}: {detail} [{:.1} s]",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
        if !pass {
            failed.push(format!("AC{id}"));
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing {}", failed.join(", "));
        std::process::exit(1);
    }
}
