//! Perturbed forward processes on shared noise and the difference quotients of `Y₀`.
//!
//! With controls `(r, π, P)` (and tilde controls) read from the base quasi-derivative
//! construction and a signed step `s·δ`,
//!
//! ```text
//! c = 1 + 2sδ r + δ² r̃,   θ = sδ π + ½δ² π̃,   R = e^{sδP} e^{½δ²P̃}
//! dX^δ = c b(X^δ) dt − √c σ(X^δ) R θ dt + √c σ(X^δ) R dW,   X^δ_0 = x + sδξ₀ + ½δ²η₀.
//! ```
//!
//! Under the measure with density `exp(∫θ·dW − ½∫|θ|² dt)` the noise `W − ∫θ dt` is a
//! Brownian motion, so `Y₀^δ = E[e^{∫θ·dW − ½∫|θ|²dt}(g(X^δ_τ) + ∫ c f dt)]` for drivers
//! depending on `x` only. General drivers go through the backward solver with the factor
//! `c`, the drift `θ` and the rotation `R` attached to each path.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bsde::{self, BackwardInput, BackwardPath, BsdeError, Method, PicardConfig};
use crate::linalg;
use crate::problem::{Dims, DomainSpec, InteriorScheme, ProblemSpec};
use crate::quasi::{QuasiCoeffs, QuasiError, QuasiSpec, QuasiTrajectory, QuasiWalker, SchemeSelector, StopReason};
use crate::rng::GaussianStream;
use crate::sde::{bisect_exit, simulate_ensemble, PathEnsemble, SdeError, SimConfig};
use crate::stats::{self, Summary};

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(
        "smallness guard violated on path {path} at step {step} (c = {factor}, |θ| = {theta}); \
         try δ ≤ {advice:e}"
    )]
    Guard { path: usize, step: usize, factor: f64, theta: f64, advice: f64 },
    #[error("rotation is not orthogonal (defect {defect:e}) on path {path} at step {step}")]
    Rotation { path: usize, step: usize, defect: f64 },
    #[error(transparent)]
    Quasi(#[from] QuasiError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Bsde(#[from] BsdeError),
}

pub type Result<T> = std::result::Result<T, PerturbError>;

/// What to do when `0 ≤ c ≤ 2` or `|δπ| + ½δ²|π̃| ≤ 1` fails.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuardPolicy {
    Reject,
    /// Switch the perturbation off (`c = 1`, `θ = 0`, `R = I`) for the rest of the path.
    Truncate,
}

pub const ORTHOGONALITY_TOL: f64 = 1e-10;

/// Controls of one step for a signed perturbation `sd = s·δ`.
#[derive(Clone, Debug)]
struct Controls {
    c: f64,
    theta: Vec<f64>,
    rot: Vec<f64>,
    scratch: Vec<f64>,
    scratch2: Vec<f64>,
}

impl Controls {
    fn new(d1: usize) -> Self {
        Controls {
            c: 1.0,
            theta: vec![0.0; d1],
            rot: linalg::identity(d1),
            scratch: vec![0.0; d1 * d1],
            scratch2: vec![0.0; d1 * d1],
        }
    }

    /// Fills the controls from `co`; returns `(c, |δπ| + ½δ²|π̃|)` for the guard.
    fn set(&mut self, co: &QuasiCoeffs, sd: f64, d1: usize) -> (f64, f64) {
        let dd = sd * sd;
        self.c = 1.0 + 2.0 * sd * co.r + dd * co.r_tilde;
        for i in 0..d1 {
            self.theta[i] = sd * co.pi[i] + 0.5 * dd * co.pi_tilde[i];
        }
        for (s, p) in self.scratch.iter_mut().zip(&co.p) {
            *s = sd * p;
        }
        linalg::expm_skew(&self.scratch, d1, &mut self.rot);
        if co.p_tilde.iter().any(|v| *v != 0.0) {
            for (s, p) in self.scratch.iter_mut().zip(&co.p_tilde) {
                *s = 0.5 * dd * p;
            }
            linalg::expm_skew(&self.scratch, d1, &mut self.scratch2);
            self.scratch.copy_from_slice(&self.rot);
            linalg::matmul(&self.scratch, d1, d1, &self.scratch2, d1, &mut self.rot);
        }
        let size = sd.abs() * linalg::norm(&co.pi) + 0.5 * dd * linalg::norm(&co.pi_tilde);
        (self.c, size)
    }
}

fn guard_ok(c: f64, size: f64) -> bool {
    (0.0..=2.0).contains(&c) && size <= 1.0
}

/// Largest `δ` that would have met the guard for these coefficients.
fn guard_advice(co: &QuasiCoeffs) -> f64 {
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut c = Controls::new(co.pi.len());
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let ok = [mid, -mid].iter().all(|&sd| {
            let (f, s) = c.set(co, sd, co.pi.len());
            guard_ok(f, s)
        });
        if ok {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// One perturbed path advanced in lockstep with its base.
struct PertPath {
    sd: f64,
    x: Vec<f64>,
    prev: Vec<f64>,
    log_w: f64,
    f_acc: Vec<f64>,
    active: bool,
    truncated: Option<usize>,
    done: bool,
    exit: Vec<f64>,
    steps: u64,
    capped: bool,
    ctl: Controls,
    v: Vec<f64>,
    sigma: Vec<f64>,
    drift: Vec<f64>,
    fv: Vec<f64>,
    max_defect: f64,
}

impl PertPath {
    fn new(dims: Dims, x0: Vec<f64>, sd: f64) -> Self {
        let Dims { d, d1, k } = dims;
        PertPath {
            sd,
            prev: x0.clone(),
            exit: x0.clone(),
            x: x0,
            log_w: 0.0,
            f_acc: vec![0.0; k],
            active: true,
            truncated: None,
            done: false,
            steps: 0,
            capped: false,
            ctl: Controls::new(d1),
            v: vec![0.0; d1],
            sigma: vec![0.0; d * d1],
            drift: vec![0.0; d],
            fv: vec![0.0; k],
            max_defect: 0.0,
        }
    }

    /// Sets the controls for the next step. `co = None` switches the perturbation off.
    fn prepare(&mut self, co: Option<&QuasiCoeffs>, d1: usize, guard: GuardPolicy, path: usize) -> Result<()> {
        let Some(co) = co.filter(|_| self.active) else {
            self.active = false;
            return Ok(());
        };
        let (c, size) = self.ctl.set(co, self.sd, d1);
        if !guard_ok(c, size) {
            match guard {
                GuardPolicy::Reject => {
                    return Err(PerturbError::Guard {
                        path,
                        step: self.steps as usize,
                        factor: c,
                        theta: size,
                        advice: guard_advice(co),
                    })
                }
                GuardPolicy::Truncate => {
                    self.active = false;
                    self.truncated = Some(self.steps as usize);
                    return Ok(());
                }
            }
        }
        let defect = linalg::orthogonality_defect(&self.ctl.rot, d1);
        self.max_defect = self.max_defect.max(defect);
        if defect > ORTHOGONALITY_TOL {
            return Err(PerturbError::Rotation { path, step: self.steps as usize, defect });
        }
        Ok(())
    }

    /// One Euler step with increment `dw`; `with_f` accumulates `w c f(X^δ) h`.
    fn advance(&mut self, spec: &ProblemSpec, dom: &DomainSpec, dw: &[f64], h: f64, cap: u64, with_f: bool) {
        if self.done {
            return;
        }
        let Dims { d, d1, .. } = spec.dims;
        let c = if self.active { self.ctl.c } else { 1.0 };
        if with_f {
            let zy = vec![0.0; spec.dims.k];
            let zz = vec![0.0; spec.dims.k * d1];
            spec.driver.value(&self.x, &zy, &zz, &mut self.fv);
            let wgt = self.log_w.exp() * c * h;
            for (a, f) in self.f_acc.iter_mut().zip(&self.fv) {
                *a += wgt * f;
            }
        }
        spec.diffusion.sigma(&self.x, &mut self.sigma);
        spec.diffusion.drift(&self.x, &mut self.drift);
        self.prev.copy_from_slice(&self.x);
        if self.active {
            let th = &self.ctl.theta;
            linalg::matvec(&self.ctl.rot, d1, d1, dw, &mut self.v);
            // R θ enters through σR(ΔW − θh)
            let mut rth = vec![0.0; d1];
            linalg::matvec(&self.ctl.rot, d1, d1, th, &mut rth);
            for l in 0..d1 {
                self.v[l] -= rth[l] * h;
            }
            let sc = c.sqrt();
            for i in 0..d {
                let row = &self.sigma[i * d1..(i + 1) * d1];
                let noise: f64 = row.iter().zip(&self.v).map(|(s, w)| s * w).sum();
                self.x[i] += sc * noise + c * self.drift[i] * h;
            }
            self.log_w += linalg::dot(th, dw) - 0.5 * linalg::dot(th, th) * h;
        } else {
            for i in 0..d {
                let row = &self.sigma[i * d1..(i + 1) * d1];
                let noise: f64 = row.iter().zip(dw).map(|(s, w)| s * w).sum();
                self.x[i] += noise + self.drift[i] * h;
            }
        }
        self.steps += 1;
        if dom.psi.value(&self.x) <= 0.0 {
            self.exit = bisect_exit(dom, &self.prev, &self.x).1;
            self.done = true;
        } else if self.steps >= cap {
            self.exit.copy_from_slice(&self.x);
            self.capped = true;
            self.done = true;
        }
    }

    /// `w_τ g(X^δ_τ) + Σ w c f h` into `out`.
    fn sample(&self, spec: &ProblemSpec, out: &mut [f64]) {
        spec.g.value(&self.exit, out);
        let w = self.log_w.exp();
        for (o, a) in out.iter_mut().zip(&self.f_acc) {
            *o = w * *o + a;
        }
    }
}

/// `x + sδξ₀ + ½δ²η₀`.
pub fn start_shift(x: &[f64], xi0: &[f64], eta0: Option<&[f64]>, delta: f64, sign: f64) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, xi)| xi + sign * delta * xi0[i] + 0.5 * delta * delta * eta0.map_or(0.0, |e| e[i]))
        .collect()
}

/// One perturbed path of a [`PerturbationRun`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbedPath {
    /// `(n + 1) × d`
    pub states: Vec<f64>,
    /// `n` time-change factors (1 once the perturbation is off).
    pub factor: Vec<f64>,
    /// `n × d₁`
    pub theta: Vec<f64>,
    /// `n × d₁ × d₁`
    pub rot: Vec<f64>,
    pub exit_index: usize,
    pub exit_point: Vec<f64>,
    pub capped: bool,
    /// Step at which the guard switched the perturbation off.
    pub truncated: Option<usize>,
    pub log_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRun {
    pub delta: f64,
    pub sign: f64,
    pub start_shift: Vec<f64>,
    pub h: f64,
    /// Seed of the base ensemble whose increments drive every path.
    pub shared_noise_seed: u64,
    pub paths: Vec<PerturbedPath>,
    /// Largest `‖RᵀR − I‖` over all steps.
    pub max_orthogonality_defect: f64,
}

impl PerturbationRun {
    pub fn truncated_fraction(&self) -> f64 {
        self.paths.iter().filter(|p| p.truncated.is_some()).count() as f64 / self.paths.len().max(1) as f64
    }

    /// Paths with their controls for the backward solver.
    pub fn backward_input(&self, spec: &ProblemSpec) -> BackwardInput {
        let Dims { d1, .. } = spec.dims;
        let paths = self
            .paths
            .par_iter()
            .enumerate()
            .map(|(p, pp)| {
                let n = pp.exit_index;
                let mut dw = vec![0.0; n * d1];
                let mut s = GaussianStream::new(self.shared_noise_seed, p as u64, d1, 0);
                for i in 0..n {
                    s.next_into(self.h.sqrt(), &mut dw[i * d1..(i + 1) * d1]);
                }
                let mut terminal = vec![0.0; spec.dims.k];
                spec.g.value(&pp.exit_point, &mut terminal);
                BackwardPath {
                    states: pp.states.clone(),
                    dw,
                    terminal,
                    factor: Some(pp.factor.clone()),
                    theta: Some(pp.theta.clone()),
                    rot: Some(pp.rot.clone()),
                }
            })
            .collect();
        BackwardInput { dims: spec.dims, h: self.h, paths, capped: self.paths.iter().map(|p| p.capped).collect() }
    }
}

/// Simulates `X^{sδ}` on the ensemble's noise with controls from the trajectory trace.
pub fn simulate_perturbed(
    ens: &PathEnsemble,
    spec: &ProblemSpec,
    dom: &DomainSpec,
    traj: &QuasiTrajectory,
    delta: f64,
    sign: f64,
    guard: GuardPolicy,
) -> Result<PerturbationRun> {
    let Dims { d, d1, .. } = spec.dims;
    if !(delta >= 0.0) || (sign != 1.0 && sign != -1.0) {
        return Err(PerturbError::InvalidArgument("need δ ≥ 0 and sign ±1".into()));
    }
    if traj.paths.len() != ens.n_paths {
        return Err(PerturbError::InvalidArgument("trajectory and ensemble sizes differ".into()));
    }
    let x0 = start_shift(&ens.x0, &traj.xi_init, traj.eta_init.as_deref(), delta, sign);
    if !dom.contains(&x0) {
        return Err(PerturbError::InvalidArgument(format!("shifted start {x0:?} is outside D; shrink δ")));
    }
    let sd = sign * delta;
    let h = ens.h;
    let runs: Vec<Result<(PerturbedPath, f64)>> = (0..ens.n_paths)
        .into_par_iter()
        .map(|p| {
            let qp = &traj.paths[p];
            let mut pp = PertPath::new(spec.dims, x0.clone(), sd);
            let mut stream = GaussianStream::new(ens.seed, p as u64, d1, 0);
            let mut dw = vec![0.0; d1];
            let mut states = x0.clone();
            let (mut factor, mut theta, mut rot) = (Vec::new(), Vec::new(), Vec::new());
            while !pp.done {
                let i = pp.steps as usize;
                pp.prepare(qp.coeffs.get(i), d1, guard, p)?;
                if pp.active {
                    factor.push(pp.ctl.c);
                    theta.extend_from_slice(&pp.ctl.theta);
                    rot.extend_from_slice(&pp.ctl.rot);
                } else {
                    factor.push(1.0);
                    theta.extend(std::iter::repeat_n(0.0, d1));
                    rot.extend_from_slice(&linalg::identity(d1));
                }
                stream.next_into(h.sqrt(), &mut dw);
                pp.advance(spec, dom, &dw, h, ens.cap_steps, false);
                states.extend_from_slice(&pp.x);
            }
            debug_assert_eq!(states.len(), (pp.steps as usize + 1) * d);
            Ok((
                PerturbedPath {
                    states,
                    factor,
                    theta,
                    rot,
                    exit_index: pp.steps as usize,
                    exit_point: pp.exit.clone(),
                    capped: pp.capped,
                    truncated: pp.truncated,
                    log_weight: pp.log_w,
                },
                pp.max_defect,
            ))
        })
        .collect();
    let mut paths = Vec::with_capacity(ens.n_paths);
    let mut defect: f64 = 0.0;
    for r in runs {
        let (p, m) = r?;
        defect = defect.max(m);
        paths.push(p);
    }
    Ok(PerturbationRun {
        delta,
        sign,
        start_shift: x0,
        h,
        shared_noise_seed: ens.seed,
        paths,
        max_orthogonality_defect: defect,
    })
}

/// Per-path samples of a streaming ladder run.
struct LadderPath {
    base: Vec<f64>,
    plus: Vec<Vec<f64>>,
    minus: Vec<Vec<f64>>,
    truncated: Vec<bool>,
    clipped: bool,
}

/// Runs the base quasi-derivatives and every `±δ` of the ladder on one path in one pass.
fn ladder_path(
    ens: &PathEnsemble,
    spec: &ProblemSpec,
    dom: &DomainSpec,
    q: &QuasiSpec,
    deltas: &[f64],
    minus: bool,
    guard: GuardPolicy,
    p: usize,
) -> Result<LadderPath> {
    let Dims { d1, k, .. } = spec.dims;
    let h = ens.h;
    let with_f = !spec.driver.is_zero();
    let mut w = QuasiWalker::new(spec, dom, q, ens, p)?;
    let mut perts: Vec<PertPath> = Vec::with_capacity(deltas.len() * 2);
    for &dl in deltas {
        for s in if minus { &[1.0, -1.0][..] } else { &[1.0][..] } {
            let x0 = start_shift(&ens.x0, &q.xi0, q.eta0.as_deref(), dl, *s);
            perts.push(PertPath::new(spec.dims, x0, s * dl));
        }
    }
    while w.stopped().is_none() && perts.iter().any(|pp| !pp.done) {
        for pp in perts.iter_mut() {
            if !pp.done {
                pp.prepare(Some(w.coeffs()), d1, guard, p)?;
            }
        }
        w.step();
        let dw = w.last_increment();
        for pp in perts.iter_mut() {
            pp.advance(spec, dom, dw, h, ens.cap_steps, with_f);
        }
    }
    let clipped = w.stopped() == Some(StopReason::Clipped);
    let mut stream = w.noise();
    let mut dw = vec![0.0; d1];
    let sqrt_h = h.sqrt();
    for pp in perts.iter_mut() {
        pp.active = false;
    }
    while perts.iter().any(|pp| !pp.done) {
        stream.next_into(sqrt_h, &mut dw);
        for pp in perts.iter_mut() {
            pp.advance(spec, dom, &dw, h, ens.cap_steps, with_f);
        }
    }
    let mut base = vec![0.0; k];
    bsde::driver_free_sample(ens, spec, p, &mut base);
    let mut plus = Vec::with_capacity(deltas.len());
    let mut mins = Vec::with_capacity(deltas.len());
    let stride = if minus { 2 } else { 1 };
    for j in 0..deltas.len() {
        let mut y = vec![0.0; k];
        perts[j * stride].sample(spec, &mut y);
        plus.push(y);
        if minus {
            let mut y = vec![0.0; k];
            perts[j * stride + 1].sample(spec, &mut y);
            mins.push(y);
        }
    }
    let truncated = perts.iter().map(|pp| pp.truncated.is_some()).collect();
    Ok(LadderPath { base, plus, minus: mins, truncated, clipped })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateVerdict {
    Converged,
    /// The quotients move non-monotonically by more than their noise.
    ConvergenceFailure,
    /// The confidence interval is wider than the estimate.
    Inconclusive,
}

/// Gradient or Hessian report: `{x, xi0, delta[], quotient[], extrapolated, CI, verdict}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivativeEstimate {
    pub order: u8,
    pub x: Vec<f64>,
    pub xi0: Vec<f64>,
    pub delta: Vec<f64>,
    /// `delta.len() × k`
    pub quotient: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    pub extrapolated: Vec<f64>,
    pub extrapolated_stderr: Vec<f64>,
    #[serde(rename = "CI")]
    pub ci95: Vec<f64>,
    pub verdict: EstimateVerdict,
    pub method: Method,
    pub h: f64,
    pub n_paths: usize,
    /// Fraction of perturbed paths on which the guard switched the perturbation off, per δ.
    pub truncated_fraction: Vec<f64>,
    /// Fraction of base paths stopped by the `|ξ| ≥ n` clip.
    pub clipped_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct DerivativeConfig {
    /// Decreasing, at least three values.
    pub deltas: Vec<f64>,
    pub n_paths: usize,
    /// Upper bound for the time step; the run uses `min(h, δ_min²)`.
    pub h: f64,
    pub t_max: Option<f64>,
    pub seed: u64,
    pub selector: SchemeSelector,
    pub interior: Option<InteriorScheme>,
    pub method: Method,
    pub guard: GuardPolicy,
    pub clip: Option<f64>,
    pub picard: PicardConfig,
}

impl DerivativeConfig {
    pub fn new(n_paths: usize, seed: u64, interior: Option<InteriorScheme>) -> Self {
        let selector = if interior.is_some() { SchemeSelector::Switching { p: 1.0 } } else { SchemeSelector::Zero };
        DerivativeConfig {
            deltas: vec![0.1, 0.05, 0.025],
            n_paths,
            h: 1e-3,
            t_max: None,
            seed,
            selector,
            interior,
            method: Method::DriverFree,
            guard: GuardPolicy::Truncate,
            clip: None,
            picard: PicardConfig::default(),
        }
    }

    pub fn step(&self) -> f64 {
        let dmin = self.deltas.iter().copied().fold(f64::INFINITY, f64::min);
        self.h.min(dmin * dmin)
    }

    fn validate(&self, dom: &DomainSpec, x: &[f64]) -> Result<()> {
        if self.deltas.len() < 3 || self.deltas.windows(2).any(|w| !(w[0] > w[1])) || !(self.deltas[2] > 0.0) {
            return Err(PerturbError::InvalidArgument("need at least three decreasing positive deltas".into()));
        }
        if !(dom.psi.value(x) > dom.delta1) {
            return Err(PerturbError::InvalidArgument(format!(
                "ψ(x) = {} must exceed δ₁ = {}",
                dom.psi.value(x),
                dom.delta1
            )));
        }
        Ok(())
    }
}

/// Richardson weights for an error model `Q(δ) = Q₀ + cδ^order`.
pub fn richardson_weights_order(d1: f64, d2: f64, order: i32) -> (f64, f64) {
    stats::richardson_weights(d1.powi(order), d2.powi(order))
}

/// Builds the report from per-path quotient samples (`paths × deltas × k`).
fn summarize(
    order: u8,
    x: &[f64],
    xi0: &[f64],
    cfg: &DerivativeConfig,
    h: f64,
    k: usize,
    samples: &[Vec<Vec<f64>>],
    truncated_fraction: Vec<f64>,
    clipped_fraction: f64,
) -> DerivativeEstimate {
    let nd = cfg.deltas.len();
    let np = samples.len();
    let col = |j: usize, c: usize| -> Vec<f64> { samples.iter().map(|s| s[j][c]).collect() };
    let mut quotient = vec![vec![0.0; k]; nd];
    let mut stderr = vec![vec![0.0; k]; nd];
    for j in 0..nd {
        for c in 0..k {
            let s = Summary::of(&col(j, c));
            quotient[j][c] = s.mean;
            stderr[j][c] = s.stderr;
        }
    }
    // symmetric second quotients have O(δ²) bias, one-sided first quotients O(δ)
    let rich_order = if order == 1 { 1 } else { 2 };
    let (w1, w2) = richardson_weights_order(cfg.deltas[nd - 2], cfg.deltas[nd - 1], rich_order);
    let mut extrapolated = vec![0.0; k];
    let mut ext_se = vec![0.0; k];
    let mut failure = false;
    for c in 0..k {
        let e: Vec<f64> = (0..np).map(|p| w1 * samples[p][nd - 2][c] + w2 * samples[p][nd - 1][c]).collect();
        let s = Summary::of(&e);
        extrapolated[c] = s.mean;
        ext_se[c] = s.stderr;
        // successive differences with their own noise
        let mut signs = Vec::new();
        for j in 0..nd - 1 {
            let diff: Vec<f64> = (0..np).map(|p| samples[p][j + 1][c] - samples[p][j][c]).collect();
            let sd = Summary::of(&diff);
            if sd.mean.abs() > 2.0 * sd.stderr {
                signs.push(sd.mean.signum());
            }
        }
        failure |= signs.windows(2).any(|w| w[0] != w[1]);
    }
    let ci95: Vec<f64> = ext_se.iter().map(|s| stats::Z95 * s).collect();
    let inconclusive = extrapolated.iter().zip(&ci95).any(|(e, ci)| *ci > e.abs());
    let verdict = if failure {
        EstimateVerdict::ConvergenceFailure
    } else if inconclusive {
        EstimateVerdict::Inconclusive
    } else {
        EstimateVerdict::Converged
    };
    DerivativeEstimate {
        order,
        x: x.to_vec(),
        xi0: xi0.to_vec(),
        delta: cfg.deltas.clone(),
        quotient,
        stderr,
        extrapolated,
        extrapolated_stderr: ext_se,
        ci95,
        verdict,
        method: cfg.method,
        h,
        n_paths: np,
        truncated_fraction,
        clipped_fraction,
    }
}

/// First- and second-order estimates at `x` along `ξ₀` (with `η₀ = 0`).
/// `second = false` skips the `−δ` runs and returns only the gradient.
pub fn derivative_estimates(
    spec: &ProblemSpec,
    dom: &DomainSpec,
    x: &[f64],
    xi0: &[f64],
    cfg: &DerivativeConfig,
    second: bool,
) -> Result<(DerivativeEstimate, Option<DerivativeEstimate>)> {
    cfg.validate(dom, x)?;
    let h = cfg.step();
    let mut sim = SimConfig::new(h, cfg.n_paths, cfg.seed);
    sim.t_max = cfg.t_max;
    let ens = simulate_ensemble(spec, dom, x, &sim)?;
    let d = spec.dims.d;
    let mut q = QuasiSpec::first(cfg.selector, cfg.interior.clone(), xi0.to_vec());
    if second {
        q = q.with_eta(vec![0.0; d]);
    }
    if let Some(n) = cfg.clip {
        q = q.with_clip(n);
    }
    match cfg.method {
        Method::DriverFree => {
            let probe = vec![x.to_vec()];
            if !spec.driver_is_x_only(&probe, 10, cfg.seed) {
                return Err(PerturbError::Bsde(BsdeError::DriverNotFree));
            }
            ladder_estimates(&ens, spec, dom, &q, cfg, second, h)
        }
        Method::Picard => picard_estimates(&ens, spec, dom, &q, cfg, second, h),
    }
}

fn ladder_estimates(
    ens: &PathEnsemble,
    spec: &ProblemSpec,
    dom: &DomainSpec,
    q: &QuasiSpec,
    cfg: &DerivativeConfig,
    second: bool,
    h: f64,
) -> Result<(DerivativeEstimate, Option<DerivativeEstimate>)> {
    let k = spec.dims.k;
    let recs: Vec<Result<LadderPath>> = (0..ens.n_paths)
        .into_par_iter()
        .map(|p| ladder_path(ens, spec, dom, q, &cfg.deltas, second, cfg.guard, p))
        .collect();
    let recs: Vec<LadderPath> = recs.into_iter().collect::<Result<_>>()?;
    let nd = cfg.deltas.len();
    let first: Vec<Vec<Vec<f64>>> = recs
        .iter()
        .map(|r| (0..nd).map(|j| (0..k).map(|c| (r.plus[j][c] - r.base[c]) / cfg.deltas[j]).collect()).collect())
        .collect();
    let stride = if second { 2 } else { 1 };
    let trunc_plus: Vec<f64> =
        (0..nd).map(|j| recs.iter().filter(|r| r.truncated[j * stride]).count() as f64 / recs.len() as f64).collect();
    let clipped = recs.iter().filter(|r| r.clipped).count() as f64 / recs.len() as f64;
    let g = summarize(1, &ens.x0, &q.xi0, cfg, h, k, &first, trunc_plus, clipped);
    if !second {
        return Ok((g, None));
    }
    let sec: Vec<Vec<Vec<f64>>> = recs
        .iter()
        .map(|r| {
            (0..nd)
                .map(|j| {
                    let dd = cfg.deltas[j] * cfg.deltas[j];
                    (0..k).map(|c| (r.plus[j][c] - 2.0 * r.base[c] + r.minus[j][c]) / dd).collect()
                })
                .collect()
        })
        .collect();
    let trunc_any: Vec<f64> = (0..nd)
        .map(|j| {
            recs.iter().filter(|r| r.truncated[2 * j] || r.truncated[2 * j + 1]).count() as f64 / recs.len() as f64
        })
        .collect();
    let hs = summarize(2, &ens.x0, &q.xi0, cfg, h, k, &sec, trunc_any, clipped);
    Ok((g, Some(hs)))
}

/// Backward-solver route for drivers depending on `(y, z)`. Runs are solved independently,
/// so the standard errors of the quotients treat `Y₀^δ` and `Y₀` as independent.
fn picard_estimates(
    ens: &PathEnsemble,
    spec: &ProblemSpec,
    dom: &DomainSpec,
    q: &QuasiSpec,
    cfg: &DerivativeConfig,
    second: bool,
    h: f64,
) -> Result<(DerivativeEstimate, Option<DerivativeEstimate>)> {
    let k = spec.dims.k;
    let traj = crate::quasi::evolve_first(ens, spec, dom, q)?;
    let traj = match &q.eta0 {
        Some(e) => crate::quasi::evolve_second(ens, spec, dom, &traj, e, q.interior.as_ref())?,
        None => traj,
    };
    let basis = bsde::default_basis(spec, dom);
    let base = bsde::solve_picard(&BackwardInput::from_ensemble(ens, spec), spec, &basis, &cfg.picard)?;
    let solve = |delta: f64, sign: f64| -> Result<(bsde::BsdeSolution, f64)> {
        let run = simulate_perturbed(ens, spec, dom, &traj, delta, sign, cfg.guard)?;
        let sol = bsde::solve_picard(&run.backward_input(spec), spec, &basis, &cfg.picard)?;
        Ok((sol, run.truncated_fraction()))
    };
    let nd = cfg.deltas.len();
    let mut plus = Vec::with_capacity(nd);
    let mut minus = Vec::with_capacity(nd);
    for &dl in &cfg.deltas {
        plus.push(solve(dl, 1.0)?);
        if second {
            minus.push(solve(dl, -1.0)?);
        }
    }
    let build = |order: u8| -> DerivativeEstimate {
        let mut quotient = vec![vec![0.0; k]; nd];
        let mut stderr = vec![vec![0.0; k]; nd];
        for j in 0..nd {
            let dl = cfg.deltas[j];
            for c in 0..k {
                let (yp, sp) = (plus[j].0.y0[c], plus[j].0.y0_stderr[c]);
                let (y, s) = (base.y0[c], base.y0_stderr[c]);
                if order == 1 {
                    quotient[j][c] = (yp - y) / dl;
                    stderr[j][c] = (sp * sp + s * s).sqrt() / dl;
                } else {
                    let (ym, sm) = (minus[j].0.y0[c], minus[j].0.y0_stderr[c]);
                    quotient[j][c] = (yp - 2.0 * y + ym) / (dl * dl);
                    stderr[j][c] = (sp * sp + 4.0 * s * s + sm * sm).sqrt() / (dl * dl);
                }
            }
        }
        let rich_order = if order == 1 { 1 } else { 2 };
        let (w1, w2) = richardson_weights_order(cfg.deltas[nd - 2], cfg.deltas[nd - 1], rich_order);
        let extrapolated: Vec<f64> = (0..k).map(|c| w1 * quotient[nd - 2][c] + w2 * quotient[nd - 1][c]).collect();
        let ext_se: Vec<f64> =
            (0..k).map(|c| ((w1 * stderr[nd - 2][c]).powi(2) + (w2 * stderr[nd - 1][c]).powi(2)).sqrt()).collect();
        let ci95: Vec<f64> = ext_se.iter().map(|s| stats::Z95 * s).collect();
        let mut failure = false;
        for c in 0..k {
            let signs: Vec<f64> = (0..nd - 1)
                .filter_map(|j| {
                    let diff = quotient[j + 1][c] - quotient[j][c];
                    let se = (stderr[j + 1][c].powi(2) + stderr[j][c].powi(2)).sqrt();
                    (diff.abs() > 2.0 * se).then_some(diff.signum())
                })
                .collect();
            failure |= signs.windows(2).any(|w| w[0] != w[1]);
        }
        let inconclusive = extrapolated.iter().zip(&ci95).any(|(e, ci)| *ci > e.abs());
        let truncated_fraction =
            (0..nd).map(|j| if order == 1 { plus[j].1 } else { plus[j].1.max(minus[j].1) }).collect();
        DerivativeEstimate {
            order,
            x: ens.x0.clone(),
            xi0: q.xi0.clone(),
            delta: cfg.deltas.clone(),
            quotient,
            stderr,
            extrapolated,
            extrapolated_stderr: ext_se,
            ci95,
            verdict: if failure {
                EstimateVerdict::ConvergenceFailure
            } else if inconclusive {
                EstimateVerdict::Inconclusive
            } else {
                EstimateVerdict::Converged
            },
            method: Method::Picard,
            h,
            n_paths: ens.n_paths,
            truncated_fraction,
            clipped_fraction: traj.flagged(StopReason::Clipped) as f64 / ens.n_paths as f64,
        }
    };
    let g = build(1);
    let hs = second.then(|| build(2));
    Ok((g, hs))
}

/// Estimate of `u_(ξ₀)(x)` from the quotients `(Y₀^δ − Y₀)/δ`.
pub fn grad_estimate(
    spec: &ProblemSpec,
    dom: &DomainSpec,
    x: &[f64],
    xi0: &[f64],
    cfg: &DerivativeConfig,
) -> Result<DerivativeEstimate> {
    Ok(derivative_estimates(spec, dom, x, xi0, cfg, false)?.0)
}

/// Estimate of `u_(ξ₀)(ξ₀)(x)` from `(Y₀^δ − 2Y₀ + Y₀^{−δ})/δ²` with `η₀ = 0`.
pub fn hessian_estimate(
    spec: &ProblemSpec,
    dom: &DomainSpec,
    x: &[f64],
    xi0: &[f64],
    cfg: &DerivativeConfig,
) -> Result<DerivativeEstimate> {
    Ok(derivative_estimates(spec, dom, x, xi0, cfg, true)?.1.expect("second order requested"))
}

/// Central difference `(u(x + δξ₀) − u(x − δξ₀))/(2δ)` from two independent driver-free
/// ensembles, with its standard error.
pub fn central_difference(
    spec: &ProblemSpec,
    dom: &DomainSpec,
    x: &[f64],
    xi0: &[f64],
    delta: f64,
    n_paths: usize,
    h: f64,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let up = start_shift(x, xi0, None, delta, 1.0);
    let dn = start_shift(x, xi0, None, delta, -1.0);
    let su = crate::rng::derive_seed(seed, 1);
    let sd = crate::rng::derive_seed(seed, 2);
    let eu = simulate_ensemble(spec, dom, &up, &SimConfig::new(h, n_paths, su))?;
    let ed = simulate_ensemble(spec, dom, &dn, &SimConfig::new(h, n_paths, sd))?;
    let a = bsde::estimate_u_driver_free(&eu, spec)?;
    let b = bsde::estimate_u_driver_free(&ed, spec)?;
    let est = a.y0.iter().zip(&b.y0).map(|(u, v)| (u - v) / (2.0 * delta)).collect();
    let se = a.y0_stderr.iter().zip(&b.y0_stderr).map(|(u, v)| (u * u + v * v).sqrt() / (2.0 * delta)).collect();
    Ok((est, se))
}

/// Mean over paths of the sup-errors of the flow quotients on `[0, τ₁ ∧ τ^δ ∧ T ∧ γ]`, where `τ₁`
/// is the stop of the quasi-derivatives and `γ` the first step at which some `±δ` of the ladder
/// breaks a smallness guard.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConvergence {
    pub delta: Vec<f64>,
    /// `|(X^δ − X)/δ − ξ|`
    pub first: Vec<f64>,
    /// `|(X^δ − 2X + X^{−δ})/δ² − η|`
    pub second_symmetric: Vec<f64>,
    /// `|2(X^δ − X − δξ)/δ² − η|`
    pub second_one_sided: Vec<f64>,
    /// Error ratios between consecutive deltas.
    pub first_ratio: Vec<f64>,
    pub second_symmetric_ratio: Vec<f64>,
    pub second_one_sided_ratio: Vec<f64>,
    pub n_paths: usize,
    pub horizon: f64,
    /// Fraction of paths whose window ended at the first smallness-guard violation of the ladder.
    pub guard_stopped: f64,
}

pub fn flow_convergence(
    ens: &PathEnsemble,
    spec: &ProblemSpec,
    dom: &DomainSpec,
    q: &QuasiSpec,
    deltas: &[f64],
    horizon: f64,
) -> Result<FlowConvergence> {
    let Dims { d, d1, .. } = spec.dims;
    let h = ens.h;
    let second = q.eta0.is_some();
    let nd = deltas.len();
    let q = QuasiSpec { horizon: Some(horizon), ..q.clone() };
    let per: Vec<Result<(Vec<[f64; 3]>, bool)>> = (0..ens.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut w = QuasiWalker::new(spec, dom, &q, ens, p)?;
            let mut perts: Vec<PertPath> = Vec::with_capacity(2 * nd);
            for &dl in deltas {
                for s in [1.0, -1.0] {
                    let x0 = start_shift(&ens.x0, &q.xi0, q.eta0.as_deref(), dl, s);
                    perts.push(PertPath::new(spec.dims, x0, s * dl));
                }
            }
            let mut worst = vec![[0.0f64; 3]; nd];
            let mut alive = vec![true; nd];
            let mut guard_stop = false;
            while w.stopped().is_none() {
                for pp in perts.iter_mut() {
                    pp.prepare(Some(w.coeffs()), d1, GuardPolicy::Truncate, p)?;
                }
                if perts.iter().any(|pp| pp.truncated.is_some()) {
                    guard_stop = true;
                    break;
                }
                w.step();
                let dw = w.last_increment().to_vec();
                for pp in perts.iter_mut() {
                    pp.advance(spec, dom, &dw, h, u64::MAX, false);
                }
                if w.stopped() == Some(StopReason::DomainExit) {
                    break;
                }
                let x = w.state();
                for j in 0..nd {
                    let (up, dn) = (&perts[2 * j], &perts[2 * j + 1]);
                    alive[j] &= !up.done && !dn.done;
                    if !alive[j] {
                        continue;
                    }
                    let dl = deltas[j];
                    let mut e = [0.0f64; 3];
                    for i in 0..d {
                        let xi = w.xi()[i];
                        e[0] = e[0].max(((up.x[i] - x[i]) / dl - xi).abs());
                        if second {
                            let eta = w.eta().expect("second order")[i];
                            e[1] = e[1].max(((up.x[i] - 2.0 * x[i] + dn.x[i]) / (dl * dl) - eta).abs());
                            e[2] = e[2].max((2.0 * (up.x[i] - x[i] - dl * xi) / (dl * dl) - eta).abs());
                        }
                    }
                    for c in 0..3 {
                        worst[j][c] = worst[j][c].max(e[c]);
                    }
                }
            }
            Ok((worst, guard_stop))
        })
        .collect();
    let per: Vec<(Vec<[f64; 3]>, bool)> = per.into_iter().collect::<Result<_>>()?;
    let guard_stopped = per.iter().filter(|v| v.1).count() as f64 / per.len().max(1) as f64;
    let per: Vec<Vec<[f64; 3]>> = per.into_iter().map(|v| v.0).collect();
    let mean = |j: usize, c: usize| per.iter().map(|v| v[j][c]).sum::<f64>() / per.len() as f64;
    let col = |c: usize| (0..nd).map(|j| mean(j, c)).collect::<Vec<_>>();
    let ratio = |v: &[f64]| v.windows(2).map(|w| w[0] / w[1]).collect::<Vec<_>>();
    let (first, ss, os) = (col(0), col(1), col(2));
    Ok(FlowConvergence {
        delta: deltas.to_vec(),
        first_ratio: ratio(&first),
        second_symmetric_ratio: ratio(&ss),
        second_one_sided_ratio: ratio(&os),
        first,
        second_symmetric: ss,
        second_one_sided: os,
        n_paths: ens.n_paths,
        horizon,
        guard_stopped,
    })
}
