//! Experiment runners.

use std::path::Path;

use bsdeflow_core::barriers::{
    calibrate_lambda, calibrated_barrier_test, BarrierKind, BarrierSpec, CalibratedBarrierReport, CalibrationPlan,
    LambdaCalibration,
};
use bsdeflow_core::bsde::{
    default_basis, estimate_u_driver_free, solve_picard, BackwardInput, BsdeSolution, Method, PicardConfig,
};
use bsdeflow_core::estimates::{
    analytic_derivative, approach_panel, calibrate_normal_constant, normal_derivative_bound, verify_bounds,
    BoundReport, DerivativeSource, NormalDerivativeConfig, NormalDerivativeReport,
};
use bsdeflow_core::linalg;
use bsdeflow_core::perturbed::{
    derivative_estimates, flow_convergence, DerivativeConfig, DerivativeEstimate, FlowConvergence,
};
use bsdeflow_core::problem::{
    builtin, check_derivatives, check_h10, check_h7, compute_norms, unit_direction_samples, validate_hypotheses,
    DerivativeGateReport, DomainSpec, H10Report, H7Report, HypothesisReport, InteriorScheme, NormConfig, ProblemSpec,
    Quadratic, SmoothField,
};
use bsdeflow_core::quasi::{martingale_statistic, MartingaleReport, QuasiSpec, SchemeSelector, TestFunction};
use bsdeflow_core::rng::derive_seed;
use bsdeflow_core::sde::{exit_statistics, simulate_ensemble, ExitStatistics, Recording, SimConfig, Verdict};
use serde::Serialize;
use thiserror::Error;

use crate::config::{BarrierName, ConfigError, Experiment, ExperimentConfig, MethodChoice, SchemeChoice, SourceChoice};
use crate::user::UserProblem;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("hypothesis checks failed (rerun with --force to proceed): {0}")]
    Hypotheses(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Hypotheses(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

fn rt<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Where the problem came from, embedded in every report.
#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemRecord {
    Builtin(String),
    User(Box<UserProblem>),
}

pub struct Loaded {
    pub spec: ProblemSpec,
    /// Domain with the configured `λ`, `δ₁`.
    pub domain: DomainSpec,
    pub interior: Option<InteriorScheme>,
    pub record: ProblemRecord,
}

pub fn load_problem(cfg: &ExperimentConfig, base: &Path) -> Result<Loaded, CliError> {
    let (spec, domain, interior, record) = match (&cfg.problem.builtin, &cfg.problem.file) {
        (Some(name), _) => {
            let b = builtin(name)
                .ok_or_else(|| ConfigError::field("problem.builtin", format!("unknown problem `{name}`")))?;
            (b.spec, b.domain, Some(b.interior), ProblemRecord::Builtin(name.clone()))
        }
        (None, Some(file)) => {
            let path = base.join(file);
            let src = std::fs::read_to_string(&path).map_err(|e| ConfigError::Io { path: path.clone(), source: e })?;
            let user: UserProblem = toml::from_str(&src)
                .map_err(|e| ConfigError::Parse { file: path.display().to_string(), message: e.to_string() })?;
            let c = user.clone().compile().map_err(|e| {
                let e = e.located(&src);
                ConfigError::Parse { file: path.display().to_string(), message: e.to_string() }
            })?;
            (c.spec, c.domain, c.interior, ProblemRecord::User(Box::new(user)))
        }
        (None, None) => return Err(ConfigError::field("problem", "give builtin or file").into()),
    };
    let lambda = cfg.numerics.lambda.unwrap_or(domain.lambda);
    let delta1 = cfg.numerics.delta1.unwrap_or(domain.delta1);
    cfg.validate_for(spec.dims.d, lambda, delta1)?;
    let domain =
        domain.with_regions(lambda, delta1).map_err(|e| ConfigError::field("numerics.lambda", e.to_string()))?;
    Ok(Loaded { spec, domain, interior, record })
}

/// Results of the checks run before every experiment.
#[derive(Clone, Debug, Serialize)]
pub struct GateReport {
    pub h7: H7Report,
    pub beta: f64,
    pub domain: HypothesisReport,
    pub derivatives: Option<DerivativeGateReport>,
    pub derivative_error: Option<String>,
    /// Moment condition of the interior scheme at the configured order.
    pub h10: Option<H10Report>,
    pub pass: bool,
}

impl GateReport {
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.h7.pass {
            out.push(format!("H7 ({})", self.h7.failing().join("; ")));
        }
        for c in self.domain.checks.iter().filter(|c| !c.pass) {
            out.push(format!("{} (margin {:e} at {:?})", c.name, c.margin, c.witness));
        }
        if let Some(e) = &self.derivative_error {
            out.push(format!("derivative callbacks: {e}"));
        }
        if let Some(h) = self.h10.as_ref().filter(|h| !h.pass) {
            out.push(format!("H10 (margin {:e} at x = {:?}, y = {:?})", h.worst_margin, h.witness_x, h.witness_y));
        }
        out
    }
}

fn beta(cfg: &ExperimentConfig, spec: &ProblemSpec) -> f64 {
    cfg.numerics.beta.unwrap_or(spec.constants.beta)
}

pub fn hypothesis_gate(cfg: &ExperimentConfig, p: &Loaded) -> Result<GateReport, CliError> {
    let seed = cfg.seed.expect("validated");
    let c = p.spec.constants;
    let b = beta(cfg, &p.spec);
    let h7 = check_h7(c.mu, c.l, c.l0, b, c.vartheta);
    let inner = p.domain.grid(cfg.numerics.grid, false);
    let domain = validate_hypotheses(&p.spec, &p.domain, &inner).map_err(rt)?;
    let (derivatives, derivative_error) =
        match check_derivatives(&p.spec, &p.domain, &inner, cfg.numerics.fd_tolerance, derive_seed(seed, 0xFD)) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
    let h10 = match (&p.interior, needs_interior(cfg, p)) {
        (Some(s), true) => {
            let core: Vec<Vec<f64>> = inner.iter().filter(|x| p.domain.region(x).interior).cloned().collect();
            if core.is_empty() {
                None
            } else {
                let samples = unit_direction_samples(&core, 4 * core.len(), derive_seed(seed, 0x10));
                Some(check_h10(&p.spec, &p.domain, s, cfg.numerics.p, b, &samples).map_err(rt)?)
            }
        }
        _ => None,
    };
    let pass = h7.pass && domain.all_pass() && derivative_error.is_none() && h10.as_ref().is_none_or(|h| h.pass);
    Ok(GateReport { h7, beta: b, domain, derivatives, derivative_error, h10, pass })
}

/// Whether the experiment evolves the interior scheme.
fn needs_interior(cfg: &ExperimentConfig, p: &Loaded) -> bool {
    let exp = cfg.experiment.expect("resolved");
    let sel = selector(cfg, p.interior.is_some());
    match exp {
        Experiment::Solve => false,
        Experiment::Grad | Experiment::Hess | Experiment::VerifyQuasi => sel.needs_interior(),
        Experiment::VerifyBarriers => {
            cfg.barriers.barriers.iter().any(|b| matches!(b, BarrierName::B2 | BarrierName::B4))
        }
        Experiment::VerifyBounds => cfg.bounds.source == SourceChoice::Perturbed && sel.needs_interior(),
        Experiment::Hypotheses => true,
    }
}

fn scheme(choice: SchemeChoice, p: f64) -> SchemeSelector {
    match choice {
        SchemeChoice::Zero => SchemeSelector::Zero,
        SchemeChoice::Boundary => SchemeSelector::Boundary { p },
        SchemeChoice::Interior => SchemeSelector::Interior,
        SchemeChoice::Switching => SchemeSelector::Switching { p },
    }
}

fn selector(cfg: &ExperimentConfig, has_interior: bool) -> SchemeSelector {
    let default = if has_interior { SchemeChoice::Switching } else { SchemeChoice::Zero };
    scheme(cfg.numerics.scheme.unwrap_or(default), cfg.numerics.p)
}

fn method(cfg: &ExperimentConfig, p: &Loaded) -> Method {
    match cfg.numerics.method {
        MethodChoice::DriverFree => Method::DriverFree,
        MethodChoice::Picard => Method::Picard,
        MethodChoice::Auto => {
            let pts = p.domain.grid(5, false);
            if p.spec.driver.is_zero() || p.spec.driver_is_x_only(&pts, 8, cfg.seed.expect("validated")) {
                Method::DriverFree
            } else {
                Method::Picard
            }
        }
    }
}

/// Machine-readable result of one experiment.
pub struct Outcome {
    pub results: serde_json::Value,
    pub pass: bool,
    pub summary: Vec<String>,
    /// `(file name, contents)` of an optional CSV table.
    pub csv: Option<(String, String)>,
}

fn json<T: Serialize>(v: &T) -> Result<serde_json::Value, CliError> {
    serde_json::to_value(v).map_err(rt)
}

pub fn run(cfg: &ExperimentConfig, p: &Loaded, gate: &GateReport) -> Result<Outcome, CliError> {
    match cfg.experiment.expect("resolved") {
        Experiment::Solve => solve(cfg, p),
        Experiment::Grad => derivatives(cfg, p, false),
        Experiment::Hess => derivatives(cfg, p, true),
        Experiment::VerifyBarriers => verify_barriers(cfg, p),
        Experiment::VerifyQuasi => verify_quasi(cfg, p),
        Experiment::VerifyBounds => verify_bounds_exp(cfg, p),
        Experiment::Hypotheses => Ok(Outcome {
            results: json(gate)?,
            pass: gate.pass,
            summary: if gate.pass {
                vec!["all hypothesis checks pass".into()]
            } else {
                gate.failures().into_iter().map(|f| format!("FAIL {f}")).collect()
            },
            csv: None,
        }),
    }
}

fn need_points(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.points.is_empty() {
        return Err(ConfigError::field("points", "this experiment needs at least one point").into());
    }
    Ok(())
}

fn need_xi0(cfg: &ExperimentConfig, i: usize) -> Result<Vec<f64>, CliError> {
    cfg.points[i]
        .xi0
        .clone()
        .ok_or_else(|| ConfigError::field(&format!("points[{i}].xi0"), "required for this experiment").into())
}

fn sim_config(cfg: &ExperimentConfig, n_paths: usize, seed: u64) -> SimConfig {
    SimConfig { h: cfg.numerics.h, n_paths, t_max: cfg.numerics.t_max, seed, recording: Recording::ExitOnly }
}

#[derive(Serialize)]
struct SolveRow {
    x: Vec<f64>,
    solution: BsdeSolution,
    exact: Option<f64>,
    /// `|Y₀ − u(x)|`
    error: Option<f64>,
    /// Allowed error `3·SE + tolerance`.
    allowed: Option<f64>,
    exit: ExitStatistics,
    pass: bool,
}

fn solve(cfg: &ExperimentConfig, p: &Loaded) -> Result<Outcome, CliError> {
    need_points(cfg)?;
    let seed = cfg.seed.expect("validated");
    let m = method(cfg, p);
    let tol = cfg.numerics.tolerance.unwrap_or(0.01);
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (i, pt) in cfg.points.iter().enumerate() {
        let ens = simulate_ensemble(
            &p.spec,
            &p.domain,
            &pt.x,
            &sim_config(cfg, cfg.numerics.n_paths, derive_seed(seed, i as u64)),
        )
        .map_err(rt)?;
        let exit = exit_statistics(&ens, &p.domain).map_err(rt)?;
        let solution = match m {
            Method::DriverFree => estimate_u_driver_free(&ens, &p.spec).map_err(rt)?,
            Method::Picard => {
                let input = BackwardInput::from_ensemble(&ens, &p.spec);
                solve_picard(&input, &p.spec, &default_basis(&p.spec, &p.domain), &PicardConfig::default())
                    .map_err(rt)?
            }
        };
        let exact = p.spec.exact.as_ref().map(|e| {
            let mut v = vec![0.0; p.spec.dims.k];
            e.value(&pt.x, &mut v);
            v[0]
        });
        let error = exact.map(|u| (solution.y0[0] - u).abs());
        let allowed = exact.map(|_| 3.0 * solution.y0_stderr[0] + tol);
        let oracle = match (error, allowed) {
            (Some(e), Some(a)) => e <= a,
            _ => true,
        };
        let pass = oracle && solution.converged && exit.verdict != Verdict::Fail;
        summary.push(format!(
            "{} x = {:?}: Y0 = {:.6} ± {:.6}{} | E[tau] = {:.5} (psi = {:.5})",
            if pass { "PASS" } else { "FAIL" },
            pt.x,
            solution.y0[0],
            solution.y0_ci95[0],
            exact.map(|u| format!(" (exact {u:.6})")).unwrap_or_default(),
            exit.mean,
            exit.psi_x0,
        ));
        rows.push(SolveRow { x: pt.x.clone(), solution, exact, error, allowed, exit, pass });
    }
    let pass = rows.iter().all(|r| r.pass);
    Ok(Outcome { results: json(&rows)?, pass, summary, csv: None })
}

fn exact_derivative(spec: &ProblemSpec, second: bool, x: &[f64], xi0: &[f64]) -> Option<Vec<f64>> {
    let e = spec.exact.as_ref()?;
    let (d, k) = (x.len(), spec.dims.k);
    Some(if second {
        let mut hs = vec![0.0; k * d * d];
        e.hessian(x, &mut hs);
        (0..k)
            .map(|c| {
                let h = &hs[c * d * d..(c + 1) * d * d];
                let mut hx = vec![0.0; d];
                linalg::matvec(h, d, d, xi0, &mut hx);
                linalg::dot(&hx, xi0)
            })
            .collect()
    } else {
        let mut j = vec![0.0; k * d];
        e.jacobian(x, &mut j);
        (0..k).map(|c| linalg::dot(&j[c * d..(c + 1) * d], xi0)).collect()
    })
}

fn derivative_config(cfg: &ExperimentConfig, p: &Loaded, n_paths: usize, seed: u64) -> DerivativeConfig {
    let mut dc = DerivativeConfig::new(n_paths, seed, p.interior.clone());
    dc.deltas = cfg.numerics.deltas.clone();
    dc.h = cfg.numerics.h;
    dc.t_max = cfg.numerics.t_max;
    dc.selector = selector(cfg, p.interior.is_some());
    dc.method = method(cfg, p);
    dc
}

#[derive(Serialize)]
struct DerivativeRow {
    estimate: DerivativeEstimate,
    exact: Option<Vec<f64>>,
    tolerance: f64,
    pass: bool,
}

fn derivatives(cfg: &ExperimentConfig, p: &Loaded, second: bool) -> Result<Outcome, CliError> {
    need_points(cfg)?;
    let seed = cfg.seed.expect("validated");
    let tol = cfg.numerics.tolerance.unwrap_or(if second { 0.15 } else { 0.05 });
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (i, pt) in cfg.points.iter().enumerate() {
        let xi0 = need_xi0(cfg, i)?;
        let dc = derivative_config(cfg, p, cfg.numerics.n_paths, derive_seed(seed, i as u64));
        let (g, h) = derivative_estimates(&p.spec, &p.domain, &pt.x, &xi0, &dc, second).map_err(rt)?;
        let estimate = if second { h.expect("second order requested") } else { g };
        let exact = exact_derivative(&p.spec, second, &pt.x, &xi0);
        let pass = match &exact {
            Some(ex) => ex
                .iter()
                .zip(estimate.extrapolated.iter().zip(&estimate.ci95))
                .all(|(u, (e, ci))| (e - u).abs() <= ci + tol),
            None => estimate.verdict != bsdeflow_core::perturbed::EstimateVerdict::ConvergenceFailure,
        };
        summary.push(format!(
            "{} x = {:?}, xi0 = {:?}: {:.5} ± {:.5} ({:?}){}",
            if pass { "PASS" } else { "FAIL" },
            pt.x,
            xi0,
            estimate.extrapolated[0],
            estimate.ci95[0],
            estimate.verdict,
            exact.as_ref().map(|u| format!(" exact {:.5}", u[0])).unwrap_or_default(),
        ));
        rows.push(DerivativeRow { estimate, exact, tolerance: tol, pass });
    }
    let pass = rows.iter().all(|r| r.pass);
    Ok(Outcome { results: json(&rows)?, pass, summary, csv: None })
}

/// Grid point of largest `ψ`.
fn deepest_point(dom: &DomainSpec, resolution: usize) -> Vec<f64> {
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for x in dom.grid(resolution, false) {
        let v = dom.psi.value(&x);
        if v > best.0 {
            best = (v, x);
        }
    }
    best.1
}

/// Point where `ψ = level` on the ray `center + t·dir`, by bisection between the center and
/// the exit from `D`.
fn level_point(dom: &DomainSpec, center: &[f64], dir: &[f64], level: f64) -> Option<Vec<f64>> {
    let n = linalg::norm(dir);
    let u: Vec<f64> = dir.iter().map(|v| v / n).collect();
    let reach: f64 = dom.bbox.iter().map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt();
    let t_exit = dom.ray_exit(center, &u, reach, 1e-12)?;
    let at = |t: f64| -> Vec<f64> { center.iter().zip(&u).map(|(c, v)| c + t * v).collect() };
    if !(dom.psi.value(center) > level) {
        return None;
    }
    let (mut lo, mut hi) = (0.0, t_exit);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if dom.psi.value(&at(mid)) > level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(at(0.5 * (lo + hi)))
}

fn default_directions(d: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            e
        })
        .collect();
    if d > 1 {
        out.push(vec![1.0 / (d as f64).sqrt(); d]);
    }
    out
}

#[derive(Serialize)]
struct BarrierResults {
    ordering: LambdaCalibration,
    ordering_pass: bool,
    tests: Vec<CalibratedBarrierReport>,
}

fn verify_barriers(cfg: &ExperimentConfig, p: &Loaded) -> Result<Outcome, CliError> {
    let seed = cfg.seed.expect("validated");
    let s = &cfg.barriers;
    let d = p.spec.dims.d;
    let interior_x0 = s.interior_x0.clone().unwrap_or_else(|| deepest_point(&p.domain, cfg.numerics.grid));
    let ray = s.boundary_ray.clone().unwrap_or_else(|| default_directions(d).remove(0));
    let xi0s = if s.directions.is_empty() { default_directions(d) } else { s.directions.clone() };
    let plan = CalibrationPlan {
        lambdas: CalibrationPlan::halving(p.domain.lambda, s.halvings),
        k1_start: cfg.numerics.k1,
        k1_max: s.k1_max,
        beta: beta(cfg, &p.spec),
        z_crit: cfg.numerics.z_crit,
        clip: cfg.numerics.clip,
        checkpoints: cfg.numerics.checkpoints.clone(),
        n_paths: cfg.numerics.n_paths,
        h: None,
        pilot_seed: derive_seed(seed, 0xB0),
        confirm_seed: derive_seed(seed, 0xB1),
    };
    let template = BarrierSpec::b1(p.domain.lambda, cfg.numerics.k1).map_err(rt)?;
    let ordering = calibrate_lambda(
        &p.domain,
        &template,
        p.domain.lambda,
        &interior_x0,
        s.ordering_points,
        s.ordering_directions,
        40,
    )
    .map_err(rt)?;
    let ordering_pass = ordering.history.last().is_some_and(|r| r.pass);
    let mut summary = vec![format!(
        "{} ordering: lambda = {} after {} halvings (outer margin {:.4e}, inner margin {:.4e})",
        if ordering_pass { "PASS" } else { "FAIL" },
        ordering.lambda,
        ordering.halvings,
        ordering.history.last().map_or(f64::NAN, |r| r.outer_margin),
        ordering.history.last().map_or(f64::NAN, |r| r.inner_margin),
    )];
    let mut tests = Vec::new();
    for name in &s.barriers {
        let (kind, order) = match name {
            BarrierName::B1 => (BarrierKind::Boundary, 1),
            BarrierName::B2 => (BarrierKind::Interior, 1),
            BarrierName::B3 => (BarrierKind::Boundary, 2),
            BarrierName::B4 => (BarrierKind::Interior, 2),
        };
        if kind == BarrierKind::Interior && p.interior.is_none() {
            return Err(CliError::Runtime(format!("{name:?} needs an interior scheme; the problem defines none")));
        }
        let x0 = |dl: &DomainSpec| -> Vec<f64> {
            match kind {
                BarrierKind::Interior => interior_x0.clone(),
                BarrierKind::Boundary => {
                    level_point(dl, &interior_x0, &ray, 0.5 * dl.lambda).unwrap_or_else(|| interior_x0.clone())
                }
            }
        };
        let r = calibrated_barrier_test(&p.spec, &p.domain, p.interior.as_ref(), kind, order, &xi0s, &x0, &plan)
            .map_err(rt)?;
        let worst = r.runs.iter().flat_map(|run| run.confirmation.z.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
        summary.push(format!(
            "{} {}: lambda = {}, K1 = {}, max confirmation z = {:.3}",
            if r.pass { "PASS" } else { "FAIL" },
            r.barrier,
            r.lambda,
            r.k1,
            worst
        ));
        tests.push(r);
    }
    let pass = ordering_pass && tests.iter().all(|t| t.pass);
    Ok(Outcome { results: json(&BarrierResults { ordering, ordering_pass, tests })?, pass, summary, csv: None })
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

#[derive(Serialize)]
struct FlowVerdict {
    #[serde(flatten)]
    flow: FlowConvergence,
    window: [f64; 2],
    first_pass: bool,
    second_pass: Option<bool>,
}

#[derive(Serialize)]
struct QuasiResults {
    martingale: MartingaleReport,
    flow: FlowVerdict,
}

fn verify_quasi(cfg: &ExperimentConfig, p: &Loaded) -> Result<Outcome, CliError> {
    need_points(cfg)?;
    let seed = cfg.seed.expect("validated");
    let d = p.spec.dims.d;
    let xi0 = need_xi0(cfg, 0)?;
    let x0 = &cfg.points[0].x;
    let s = &cfg.quasi;
    let panel: Vec<(String, Quadratic)> = if s.test_functions.is_empty() {
        if d != 2 {
            return Err(ConfigError::field("quasi.test_functions", "required unless the problem is planar").into());
        }
        harmonic_panel()
    } else {
        s.test_functions
            .iter()
            .map(|t| (t.name.clone(), Quadratic { c0: t.c0, lin: t.lin.clone(), hess: t.hess.clone() }))
            .collect()
    };
    let tests: Vec<TestFunction<'_>> =
        panel.iter().map(|(n, v)| TestFunction { name: n.clone(), v: v as &dyn SmoothField }).collect();
    let ens = simulate_ensemble(&p.spec, &p.domain, x0, &sim_config(cfg, cfg.numerics.n_paths, derive_seed(seed, 0)))
        .map_err(rt)?;
    let mut q = QuasiSpec::first(selector(cfg, p.interior.is_some()), p.interior.clone(), xi0.clone());
    if s.second_order {
        q = q.with_eta(vec![0.0; d]);
    }
    let martingale =
        martingale_statistic(&tests, &ens, &p.spec, &p.domain, &q, &cfg.numerics.checkpoints, cfg.numerics.z_crit)
            .map_err(rt)?;
    let flow_paths = s.flow_paths.unwrap_or(cfg.numerics.n_paths);
    let ens2 =
        simulate_ensemble(&p.spec, &p.domain, x0, &sim_config(cfg, flow_paths, derive_seed(seed, 1))).map_err(rt)?;
    let fsel = scheme(s.flow_scheme, cfg.numerics.p);
    let fq = QuasiSpec::first(fsel, p.interior.clone(), xi0).with_eta(vec![0.0; d]);
    let flow = flow_convergence(&ens2, &p.spec, &p.domain, &fq, &cfg.numerics.deltas, s.flow_horizon).map_err(rt)?;
    let within = |r: &[f64]| r.iter().all(|v| s.ratio_window[0] <= *v && *v <= s.ratio_window[1]);
    let first_pass = within(&flow.first_ratio);
    let second_pass = s.second_order.then(|| within(&flow.second_symmetric_ratio));
    let max_z = martingale.rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
    let summary = vec![
        format!(
            "{} martingale test: {} rows, max |z| = {:.3} (critical {})",
            if martingale.pass { "PASS" } else { "FAIL" },
            martingale.rows.len(),
            max_z,
            martingale.z_crit
        ),
        format!("{} flow first-order ratios {:?}", if first_pass { "PASS" } else { "FAIL" }, flow.first_ratio),
        format!(
            "{} flow second-order ratios {:?} (one-sided {:?})",
            if second_pass.unwrap_or(true) { "PASS" } else { "FAIL" },
            flow.second_symmetric_ratio,
            flow.second_one_sided_ratio
        ),
    ];
    let pass = martingale.pass && first_pass && second_pass.unwrap_or(true);
    let flow = FlowVerdict { flow, window: s.ratio_window, first_pass, second_pass };
    Ok(Outcome { results: json(&QuasiResults { martingale, flow })?, pass, summary, csv: None })
}

fn panel_directions(cfg: &ExperimentConfig, d: usize) -> Vec<Vec<f64>> {
    let s = &cfg.bounds;
    if !s.directions.is_empty() {
        return s.directions.clone();
    }
    match d {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..s.rays)
            .map(|i| {
                let t = 0.3 + std::f64::consts::TAU * i as f64 / s.rays as f64;
                vec![t.cos(), t.sin()]
            })
            .collect(),
        _ => default_directions(d).into_iter().take(d).collect(),
    }
}

#[derive(Serialize)]
struct NormalRow {
    report: NormalDerivativeReport,
    exact: Option<f64>,
    tolerance: f64,
    pass: bool,
}

#[derive(Serialize)]
struct BoundResults {
    bounds: Vec<BoundReport>,
    normal: Vec<NormalRow>,
}

fn verify_bounds_exp(cfg: &ExperimentConfig, p: &Loaded) -> Result<Outcome, CliError> {
    let seed = cfg.seed.expect("validated");
    let s = &cfg.bounds;
    let d = p.spec.dims.d;
    let norms = compute_norms(
        &p.spec,
        &p.domain,
        &NormConfig { resolution: cfg.numerics.grid, seed: derive_seed(seed, 0x40), ..NormConfig::default() },
    )
    .map_err(rt)?;
    let center = s.center.clone().unwrap_or_else(|| deepest_point(&p.domain, cfg.numerics.grid));
    let dirs = panel_directions(cfg, d);
    let psi_min = s.psi_min.unwrap_or(p.domain.delta1);
    let panel = approach_panel(&p.domain, &center, &dirs, s.per_ray, psi_min, &|_, dir| dir.to_vec()).map_err(rt)?;
    let source = match s.source {
        SourceChoice::Analytic => DerivativeSource::Analytic,
        SourceChoice::Perturbed => DerivativeSource::Perturbed(Box::new(derivative_config(
            cfg,
            p,
            cfg.numerics.n_paths,
            derive_seed(seed, 0x41),
        ))),
    };
    let mut summary = Vec::new();
    let mut bounds = Vec::new();
    for &order in &s.orders {
        let r =
            verify_bounds(order, &p.spec, &p.domain, &panel, &source, s.calibration_fraction, &norms).map_err(rt)?;
        summary.push(format!(
            "{} order {order}: N = {:.5}, held-out max ratio {:.5} ({} points)",
            if r.pass { "PASS" } else { "FAIL" },
            r.n_calibrated,
            r.held_out_max,
            r.points.len()
        ));
        bounds.push(r);
    }
    let mut normal = Vec::new();
    if !s.normal_points.is_empty() {
        let samples = p.domain.boundary_samples(&center, s.normal_calibration, 1e-9, derive_seed(seed, 0x42));
        let n = calibrate_normal_constant(&p.spec, &p.domain, &samples, &norms).map_err(rt)? * s.normal_margin;
        let tol = cfg.numerics.tolerance.unwrap_or(0.1);
        for (i, y) in s.normal_points.iter().enumerate() {
            let mut nc = NormalDerivativeConfig::new(
                s.normal_paths.unwrap_or(cfg.numerics.n_paths),
                derive_seed(seed, 0x50 + i as u64),
            );
            nc.h = cfg.numerics.h;
            nc.tolerance = tol;
            let report = normal_derivative_bound(&p.spec, &p.domain, y, &nc, &norms, n).map_err(rt)?;
            let exact = analytic_derivative(&p.spec, 1, y, &report.normal).ok();
            let ok_exact = exact.is_none_or(|u| (report.measured - u).abs() <= tol);
            let pass = ok_exact && report.verdict == bsdeflow_core::estimates::NormalVerdict::Pass;
            summary.push(format!(
                "{} normal derivative at {:?}: {:.5} ± {:.5}{}, bound {:.5}",
                if pass { "PASS" } else { "FAIL" },
                y,
                report.measured,
                bsdeflow_core::stats::Z95 * report.extrapolated_stderr,
                exact.map(|u| format!(" (exact {u:.5})")).unwrap_or_default(),
                report.bound
            ));
            normal.push(NormalRow { report, exact, tolerance: tol, pass });
        }
    }
    let pass = bounds.iter().all(|b| b.pass) && normal.iter().all(|n| n.pass);
    let csv = bounds_csv(&bounds)?;
    Ok(Outcome {
        results: json(&BoundResults { bounds, normal })?,
        pass,
        summary,
        csv: Some(("bounds.csv".into(), csv)),
    })
}

fn bounds_csv(bounds: &[BoundReport]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "order",
        "index",
        "x",
        "xi0",
        "psi",
        "measured",
        "stderr",
        "shape",
        "ratio",
        "calibration",
        "witness",
    ])
    .map_err(rt)?;
    let join = |v: &[f64]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ");
    for b in bounds {
        for (i, pt) in b.points.iter().enumerate() {
            let se = b.measured_stderr.as_ref().map(|s| s[i].to_string()).unwrap_or_default();
            w.write_record([
                b.order.to_string(),
                i.to_string(),
                join(&pt.x),
                join(&pt.xi0),
                b.psi[i].to_string(),
                b.measured[i].to_string(),
                se,
                b.rhs_shape[i].to_string(),
                b.ratio[i].to_string(),
                b.calibration[i].to_string(),
                b.witnesses.contains(&i).to_string(),
            ])
            .map_err(rt)?;
        }
    }
    String::from_utf8(w.into_inner().map_err(rt)?).map_err(rt)
}
