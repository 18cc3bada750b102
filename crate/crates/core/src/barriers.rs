//! Barrier functions of the quasi-derivative moment estimates and their statistical tests.
//!
//! ```text
//! φ(x)         = λ² + ψ − ψ²/(4λ)
//! B_{2p−1}(x,y) = (λ + √ψ + ψ)|y|^{4p} + K₁ φ^{(8p−1)/2} ψ_(y)^{4p} / ψ^{4p−1}    on {δ₁ < ψ < λ}
//! B_{2p}(y)     = λ^{3/4}|y|^{4p}                                               on {ψ > λ²}
//! ```
//!
//! `B₁, B₃` are the boundary barriers for `p = 1, 2` and `B₂, B₄` the interior ones. The
//! supermartingale property is checked by one-sided z-tests on checkpoint means of the
//! stopped (and, for interior barriers, discounted) processes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::problem::{DomainSpec, ProblemSpec};
use crate::quasi::{phi, QuasiError, QuasiSpec, QuasiWalker, SchemeSelector, StopReason};
use crate::sde::PathEnsemble;
use crate::stats::{bonferroni_family_level, Summary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BarrierError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("ψ(x) = {psi} ≤ 0: x is outside D")]
    Domain { psi: f64 },
    #[error(transparent)]
    Quasi(#[from] QuasiError),
}

pub type Result<T> = std::result::Result<T, BarrierError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BarrierKind {
    /// `B_{2p−1}`; `B₁` for `p = 1`, `B₃` for `p = 2`.
    Boundary,
    /// `B_{2p}`; `B₂` for `p = 1`, `B₄` for `p = 2`.
    Interior,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierSpec {
    pub kind: BarrierKind,
    /// Moment order: the barrier is homogeneous of degree `4p` in `y`.
    pub p: u32,
    pub lambda: f64,
    pub k1: f64,
}

impl BarrierSpec {
    pub fn new(kind: BarrierKind, p: u32, lambda: f64, k1: f64) -> Result<Self> {
        if p == 0 {
            return Err(BarrierError::InvalidArgument("moment order must be at least 1".into()));
        }
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(BarrierError::InvalidArgument(format!("lambda must lie in (0, 1), got {lambda}")));
        }
        if !(k1 >= 1.0 && k1.is_finite()) {
            return Err(BarrierError::InvalidArgument(format!("K1 must be at least 1, got {k1}")));
        }
        Ok(BarrierSpec { kind, p, lambda, k1 })
    }

    pub fn b1(lambda: f64, k1: f64) -> Result<Self> {
        Self::new(BarrierKind::Boundary, 1, lambda, k1)
    }

    pub fn b2(lambda: f64) -> Result<Self> {
        Self::new(BarrierKind::Interior, 1, lambda, 1.0)
    }

    pub fn b3(lambda: f64, k1: f64) -> Result<Self> {
        Self::new(BarrierKind::Boundary, 2, lambda, k1)
    }

    pub fn b4(lambda: f64) -> Result<Self> {
        Self::new(BarrierKind::Interior, 2, lambda, 1.0)
    }

    /// `B1`, `B2`, … by index `2p − 1` or `2p`.
    pub fn name(&self) -> String {
        match self.kind {
            BarrierKind::Boundary => format!("B{}", 2 * self.p - 1),
            BarrierKind::Interior => format!("B{}", 2 * self.p),
        }
    }

    /// Degree of homogeneity in `y`.
    pub fn degree(&self) -> i32 {
        4 * self.p as i32
    }

    fn with_lambda(self, lambda: f64) -> Self {
        BarrierSpec { lambda, ..self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierValue {
    pub value: f64,
    /// `φ(x)` for boundary barriers.
    pub phi: Option<f64>,
}

/// Boundary barrier from `ψ(x)` and `ψ_(y)(x)`.
fn boundary_value(b: &BarrierSpec, psi: f64, psi_y: f64, y_norm: f64) -> (f64, f64) {
    let q = 4 * b.p as i32;
    let ph = phi(b.lambda, psi);
    let first = (b.lambda + psi.sqrt() + psi) * y_norm.powi(q);
    let second = b.k1 * ph.powf((8.0 * b.p as f64 - 1.0) / 2.0) * psi_y.powi(q) / psi.powi(q - 1);
    (first + second, ph)
}

fn interior_value(b: &BarrierSpec, y_norm: f64) -> f64 {
    b.lambda.powf(0.75) * y_norm.powi(4 * b.p as i32)
}

pub fn eval_barrier(b: &BarrierSpec, dom: &DomainSpec, x: &[f64], y: &[f64]) -> Result<BarrierValue> {
    match b.kind {
        BarrierKind::Interior => Ok(BarrierValue { value: interior_value(b, linalg::norm(y)), phi: None }),
        BarrierKind::Boundary => {
            let psi = dom.psi.value(x);
            if !(psi > 0.0) {
                return Err(BarrierError::Domain { psi });
            }
            let mut g = vec![0.0; x.len()];
            dom.psi.gradient(x, &mut g);
            let (value, ph) = boundary_value(b, psi, linalg::dot(&g, y), linalg::norm(y));
            Ok(BarrierValue { value, phi: Some(ph) })
        }
    }
}

/// Points with `|ψ − level| ≤ tol` on rays from `center`, found by bisection; `center`
/// must satisfy `ψ(center) > level`. Rays are evenly spaced in 1-d and 2-d and follow a
/// deterministic quasi-uniform pattern otherwise.
pub fn level_set_samples(dom: &DomainSpec, center: &[f64], level: f64, n: usize, tol: f64) -> Vec<Vec<f64>> {
    let d = dom.dim();
    let diam: f64 = dom.bbox.iter().map(|(lo, hi)| (hi - lo).powi(2)).sum::<f64>().sqrt();
    if !(dom.psi.value(center) > level) {
        return Vec::new();
    }
    let golden = 0.618_033_988_749_894_9_f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let dir: Vec<f64> = match d {
            1 => vec![if i % 2 == 0 { 1.0 } else { -1.0 }],
            _ => {
                let t = std::f64::consts::TAU * i as f64 / n as f64;
                let mut v = vec![0.0; d];
                v[0] = t.cos();
                v[1] = t.sin();
                for (j, c) in v.iter_mut().enumerate().skip(2) {
                    *c = ((i as f64 + 1.0) * golden * (j as f64 + 1.0)).fract() - 0.5;
                }
                let nv = linalg::norm(&v);
                v.iter().map(|c| c / nv).collect()
            }
        };
        let at = |s: f64| -> Vec<f64> { center.iter().zip(&dir).map(|(c, u)| c + s * u).collect() };
        let f = |s: f64| dom.psi.value(&at(s)) - level;
        let steps = 512;
        let mut lo = 0.0;
        let mut hi = None;
        for j in 1..=steps {
            let s = diam * j as f64 / steps as f64;
            if f(s) <= 0.0 {
                hi = Some(s);
                break;
            }
            lo = s;
        }
        let Some(mut hi) = hi else { continue };
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        let s = if f(lo).abs() <= f(hi).abs() { lo } else { hi };
        if f(s).abs() <= tol {
            out.push(at(s));
        }
    }
    out
}

/// Evenly spread unit directions in `R^d` (with their negatives when `d ≥ 2`).
pub fn direction_panel(d: usize, n: usize) -> Vec<Vec<f64>> {
    if d == 1 {
        return (0..n).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }]).collect();
    }
    (0..n)
        .map(|i| {
            let t = std::f64::consts::PI * i as f64 / n as f64;
            let mut v = vec![0.0; d];
            v[0] = t.cos();
            v[1] = t.sin();
            v
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    pub lambda: f64,
    pub k1: f64,
    /// Worst `(B₁ − 4B₂)/|y|⁴` on `{ψ = λ}`.
    pub outer_margin: f64,
    /// Worst `(B₂ − 4B₁)/|y|⁴` on `{ψ = λ²}`.
    pub inner_margin: f64,
    /// `λ² ≤ φ ≤ 2λ` and `ψ ≤ 2φ` at every evaluated point.
    pub phi_bounds: bool,
    pub n_outer: usize,
    pub n_inner: usize,
    pub n_directions: usize,
    pub pass: bool,
}

pub const LEVEL_TOL: f64 = 1e-6;

/// Deterministic check of `B₁ ≥ 4B₂` on `{ψ = λ}` and `4B₁ ≤ B₂` on `{ψ = λ²}` for the
/// boundary/interior pair of the same order.
pub fn ordering_check(
    dom: &DomainSpec,
    boundary: &BarrierSpec,
    interior: &BarrierSpec,
    outer: &[Vec<f64>],
    inner: &[Vec<f64>],
    ys: &[Vec<f64>],
) -> Result<OrderingReport> {
    if boundary.kind != BarrierKind::Boundary || interior.kind != BarrierKind::Interior {
        return Err(BarrierError::InvalidArgument("expected a boundary and an interior barrier".into()));
    }
    if boundary.lambda != interior.lambda || boundary.p != interior.p {
        return Err(BarrierError::InvalidArgument("barriers must share λ and the moment order".into()));
    }
    let lam = boundary.lambda;
    for (pts, level) in [(outer, lam), (inner, lam * lam)] {
        if let Some(x) = pts.iter().find(|x| (dom.psi.value(x) - level).abs() > LEVEL_TOL) {
            return Err(BarrierError::InvalidArgument(format!(
                "sample {x:?} is not within {LEVEL_TOL} of the level set ψ = {level}"
            )));
        }
    }
    let q = boundary.degree();
    let mut phi_ok = true;
    let mut margin = |pts: &[Vec<f64>], outer_side: bool| -> Result<f64> {
        let mut worst = f64::INFINITY;
        for x in pts {
            for y in ys {
                let b1 = eval_barrier(boundary, dom, x, y)?;
                let b2 = eval_barrier(interior, dom, x, y)?.value;
                let ph = b1.phi.expect("boundary barrier");
                let psi = dom.psi.value(x);
                phi_ok &= lam * lam <= ph && ph <= 2.0 * lam && psi <= 2.0 * ph;
                let yn = linalg::norm(y);
                let m = if outer_side { b1.value - 4.0 * b2 } else { b2 - 4.0 * b1.value };
                let m = if yn > 0.0 { m / yn.powi(q) } else { m };
                worst = worst.min(m);
            }
        }
        Ok(worst)
    };
    let outer_margin = margin(outer, true)?;
    let inner_margin = margin(inner, false)?;
    Ok(OrderingReport {
        lambda: lam,
        k1: boundary.k1,
        outer_margin,
        inner_margin,
        phi_bounds: phi_ok,
        n_outer: outer.len(),
        n_inner: inner.len(),
        n_directions: ys.len(),
        pass: phi_ok && outer_margin >= 0.0 && inner_margin >= 0.0 && !outer.is_empty() && !inner.is_empty(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaCalibration {
    pub lambda: f64,
    pub halvings: u32,
    pub history: Vec<OrderingReport>,
}

/// Halves `λ` from `start` until [`ordering_check`] passes on level-set samples around
/// `center` (`n_points` per level, `n_dirs` directions).
pub fn calibrate_lambda(
    dom: &DomainSpec,
    template: &BarrierSpec,
    start: f64,
    center: &[f64],
    n_points: usize,
    n_dirs: usize,
    max_halvings: u32,
) -> Result<LambdaCalibration> {
    let ys = direction_panel(dom.dim(), n_dirs);
    let mut lam = start;
    let mut history = Vec::new();
    for k in 0..=max_halvings {
        let b = BarrierSpec::new(BarrierKind::Boundary, template.p, lam, template.k1)?;
        let i = BarrierSpec::new(BarrierKind::Interior, template.p, lam, 1.0)?;
        let outer = level_set_samples(dom, center, lam, n_points, LEVEL_TOL * 1e-3);
        let inner = level_set_samples(dom, center, lam * lam, n_points, LEVEL_TOL * 1e-3);
        let rep = ordering_check(dom, &b, &i, &outer, &inner, &ys)?;
        let pass = rep.pass;
        history.push(rep);
        if pass {
            return Ok(LambdaCalibration { lambda: lam, halvings: k, history });
        }
        lam *= 0.5;
    }
    Err(BarrierError::InvalidArgument(format!(
        "ordering check still fails after {max_halvings} halvings of λ (last λ = {})",
        lam * 2.0
    )))
}

/// State of one path at a checkpoint time, or at its stop if that came first.
#[derive(Clone, Debug, PartialEq)]
struct Snapshot {
    x: Vec<f64>,
    xi: Vec<f64>,
    t: f64,
}

/// Per-path data gathered once and re-evaluated for every barrier constant.
#[derive(Clone, Debug)]
pub struct BarrierSamples {
    pub selector: SchemeSelector,
    pub x0: Vec<f64>,
    pub xi0: Vec<f64>,
    pub checkpoints: Vec<f64>,
    pub seed: u64,
    pub clip: Option<f64>,
    snaps: Vec<Vec<Snapshot>>,
    /// `∫(|ξ|^{4p} + (ψ_(ξ)/ψ)^{4p}) dt` (boundary) or `∫e^{4pβt}|ξ|^{4p} dt` (interior) to the stop.
    pub moment: Vec<f64>,
    /// `∫(|r|⁴ + |π|⁴ + ‖P‖⁴ + |r̃|²) dt` to the stop.
    pub control_moment: Vec<f64>,
    pub stops: Vec<StopReason>,
}

impl BarrierSamples {
    pub fn n_paths(&self) -> usize {
        self.snaps.len()
    }

    pub fn count(&self, reason: StopReason) -> usize {
        self.stops.iter().filter(|s| **s == reason).count()
    }
}

/// Point of the segment `a → b` on the level `{ψ = level}` with the fraction used.
fn cross_level(dom: &DomainSpec, a: &[f64], b: &[f64], level: f64) -> f64 {
    let at = |t: f64| -> Vec<f64> { a.iter().zip(b).map(|(u, v)| u + t * (v - u)).collect() };
    let fa = dom.psi.value(a) - level;
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let fm = dom.psi.value(&at(mid)) - level;
        if (fm > 0.0) == (fa > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Walks every path of `ens` with `q`, recording the stopped state at each checkpoint and
/// the moment integrals to the stop. At a region exit the last step is cut where the
/// segment meets the region boundary, so recorded states stay in the closed region.
pub fn collect_samples(
    ens: &PathEnsemble,
    spec: &ProblemSpec,
    dom: &DomainSpec,
    q: &QuasiSpec,
    checkpoints: &[f64],
    p: u32,
    beta: f64,
) -> Result<BarrierSamples> {
    if checkpoints.is_empty() || checkpoints.windows(2).any(|w| !(w[0] < w[1])) || !(checkpoints[0] > 0.0) {
        return Err(BarrierError::InvalidArgument("checkpoints must be positive and increasing".into()));
    }
    let level = match q.selector {
        SchemeSelector::Boundary { .. } => None,
        SchemeSelector::Interior => Some(dom.lambda * dom.lambda),
        _ => return Err(BarrierError::InvalidArgument("barrier tests need the boundary or interior scheme".into())),
    };
    let h = ens.h;
    let d = spec.dims.d;
    let idx: Vec<u64> = checkpoints.iter().map(|t| (t / h).round() as u64).collect();
    let q4 = 4 * p as i32;
    let per: Vec<Result<(Vec<Snapshot>, f64, f64, StopReason)>> = (0..ens.n_paths)
        .into_par_iter()
        .map(|path| {
            let mut w = QuasiWalker::new(spec, dom, q, ens, path)?;
            let mut snaps = Vec::with_capacity(idx.len());
            let mut grad = vec![0.0; d];
            let (mut moment, mut ctrl) = (0.0, 0.0);
            let mut prev_x = w.state().to_vec();
            let mut prev_xi = w.xi().to_vec();
            let mut stop_snap: Option<Snapshot> = None;
            loop {
                let i = w.step_index();
                while snaps.len() < idx.len() && idx[snaps.len()] <= i {
                    snaps.push(Snapshot { x: w.state().to_vec(), xi: w.xi().to_vec(), t: i as f64 * h });
                }
                if w.stopped().is_some() {
                    break;
                }
                let x = w.state();
                let xi = w.xi();
                let t = i as f64 * h;
                let xn = linalg::norm(xi).powi(q4);
                moment += match level {
                    None => {
                        dom.psi.gradient(x, &mut grad);
                        xn + (linalg::dot(&grad, xi) / dom.psi.value(x)).powi(q4)
                    }
                    Some(_) => (4.0 * p as f64 * beta * t).exp() * xn,
                } * h;
                let c = w.coeffs();
                ctrl +=
                    (c.r.powi(4) + linalg::norm(&c.pi).powi(4) + linalg::frobenius(&c.p).powi(4) + c.r_tilde.powi(2))
                        * h;
                prev_x.copy_from_slice(x);
                prev_xi.copy_from_slice(xi);
                if let Some(reason) = w.step() {
                    if matches!(reason, StopReason::RegionExit | StopReason::DomainExit) {
                        let psi = dom.psi.value(w.state());
                        let lvl = level.unwrap_or(if psi >= dom.lambda { dom.lambda } else { dom.delta1 });
                        let theta = cross_level(dom, &prev_x, w.state(), lvl);
                        let lerp = |a: &[f64], b: &[f64]| -> Vec<f64> {
                            a.iter().zip(b).map(|(u, v)| u + theta * (v - u)).collect()
                        };
                        stop_snap = Some(Snapshot {
                            x: lerp(&prev_x, w.state()),
                            xi: lerp(&prev_xi, w.xi()),
                            t: (i as f64 + theta) * h,
                        });
                    } else if reason == StopReason::Singular {
                        stop_snap = Some(Snapshot { x: prev_x.clone(), xi: prev_xi.clone(), t });
                    }
                }
            }
            let last = stop_snap.clone().unwrap_or_else(|| Snapshot {
                x: w.state().to_vec(),
                xi: w.xi().to_vec(),
                t: w.step_index() as f64 * h,
            });
            // checkpoints after the stop see the stopped state
            while snaps.len() < idx.len() {
                snaps.push(last.clone());
            }
            if let Some(s) = &stop_snap {
                let stop_time = s.t;
                for (k, snap) in snaps.iter_mut().enumerate() {
                    if checkpoints[k] >= stop_time - 1e-12 {
                        *snap = s.clone();
                    }
                }
            }
            Ok((snaps, moment, ctrl, w.stopped().expect("loop ends at the stop")))
        })
        .collect();
    let mut out = BarrierSamples {
        selector: q.selector,
        x0: ens.x0.clone(),
        xi0: q.xi0.clone(),
        checkpoints: checkpoints.to_vec(),
        seed: ens.seed,
        clip: q.clip,
        snaps: Vec::with_capacity(ens.n_paths),
        moment: Vec::with_capacity(ens.n_paths),
        control_moment: Vec::with_capacity(ens.n_paths),
        stops: Vec::with_capacity(ens.n_paths),
    };
    for r in per {
        let (s, m, c, st) = r?;
        out.snaps.push(s);
        out.moment.push(m);
        out.control_moment.push(c);
        out.stops.push(st);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    /// The barrier itself exceeds its initial value at some checkpoint.
    Reject,
    /// Only the square-root process rejects.
    SqrtReject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupermartingaleReport {
    pub barrier: String,
    pub scheme: SchemeSelector,
    pub x0: Vec<f64>,
    pub xi0: Vec<f64>,
    pub checkpoints: Vec<f64>,
    pub b0: f64,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub z: Vec<f64>,
    pub sqrt_b0: f64,
    pub sqrt_mean: Vec<f64>,
    pub sqrt_z: Vec<f64>,
    pub z_crit: f64,
    /// One-sided family-wise level of the rule across checkpoints.
    pub family_level: f64,
    pub verdict: Verdict,
    pub lambda: f64,
    #[serde(rename = "K1")]
    pub k1: f64,
    pub n: Option<f64>,
    pub beta: f64,
    pub seed: u64,
    pub n_paths: usize,
    pub clipped: usize,
    pub singular: usize,
}

fn z_upper(s: &Summary, bound: f64) -> f64 {
    crate::stats::z_score(s.mean, bound, s.stderr)
}

/// One-sided tests of `E[e^{4pβ(t∧τ)}B(X_{t∧τ}, ξ_{t∧τ})] ≤ B(x₀, ξ₀)` (and the √ version
/// with `e^{2pβ}`); the discount applies to interior barriers only.
pub fn supermartingale_test(
    b: &BarrierSpec,
    dom: &DomainSpec,
    samples: &BarrierSamples,
    beta: f64,
    z_crit: f64,
) -> Result<SupermartingaleReport> {
    match (b.kind, samples.selector) {
        (BarrierKind::Boundary, SchemeSelector::Boundary { p }) if (p - b.p as f64).abs() < 1e-12 => {}
        (BarrierKind::Interior, SchemeSelector::Interior) => {}
        _ => {
            return Err(BarrierError::InvalidArgument(format!(
                "{} cannot be tested on trajectories of the {:?} scheme",
                b.name(),
                samples.selector
            )))
        }
    }
    let rate = match b.kind {
        BarrierKind::Interior => 4.0 * b.p as f64 * beta,
        BarrierKind::Boundary => 0.0,
    };
    let b0 = eval_barrier(b, dom, &samples.x0, &samples.xi0)?.value;
    let m = samples.checkpoints.len();
    let mut mean = Vec::with_capacity(m);
    let mut stderr = Vec::with_capacity(m);
    let mut z = Vec::with_capacity(m);
    let mut sqrt_mean = Vec::with_capacity(m);
    let mut sqrt_z = Vec::with_capacity(m);
    for k in 0..m {
        let mut vals = Vec::with_capacity(samples.n_paths());
        let mut roots = Vec::with_capacity(samples.n_paths());
        for snaps in &samples.snaps {
            let s = &snaps[k];
            let v = eval_barrier(b, dom, &s.x, &s.xi)?.value;
            vals.push((rate * s.t).exp() * v);
            roots.push((0.5 * rate * s.t).exp() * v.sqrt());
        }
        let sv = Summary::of(&vals);
        let sr = Summary::of(&roots);
        mean.push(sv.mean);
        stderr.push(sv.stderr);
        z.push(z_upper(&sv, b0));
        sqrt_mean.push(sr.mean);
        sqrt_z.push(z_upper(&sr, b0.sqrt()));
    }
    let verdict = if z.iter().any(|v| *v > z_crit) {
        Verdict::Reject
    } else if sqrt_z.iter().any(|v| *v > z_crit) {
        Verdict::SqrtReject
    } else {
        Verdict::Pass
    };
    Ok(SupermartingaleReport {
        barrier: b.name(),
        scheme: samples.selector,
        x0: samples.x0.clone(),
        xi0: samples.xi0.clone(),
        checkpoints: samples.checkpoints.clone(),
        b0,
        mean,
        stderr,
        z,
        sqrt_b0: b0.sqrt(),
        sqrt_mean,
        sqrt_z,
        z_crit,
        family_level: bonferroni_family_level(z_crit, 2 * m, false),
        verdict,
        lambda: b.lambda,
        k1: b.k1,
        n: samples.clip,
        beta,
        seed: samples.seed,
        n_paths: samples.n_paths(),
        clipped: samples.count(StopReason::Clipped),
        singular: samples.count(StopReason::Singular),
    })
}

/// One moment bound `E[I] ≤ N·B(x₀, ξ₀)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub name: String,
    pub mean: f64,
    pub stderr: f64,
    pub b0: f64,
    /// Constant fixed on the pilot run.
    pub n_calibrated: f64,
    pub z: f64,
    pub pass: bool,
}

/// Calibrated constant `(mean + z·SE)/B₀` of a pilot sample.
fn pilot_constant(s: &Summary, b0: f64, z_crit: f64) -> f64 {
    (s.mean + z_crit * s.stderr) / b0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierProtocol {
    pub barrier: String,
    /// `K₁` values tried on the pilot run, in order.
    pub k1_tried: Vec<f64>,
    pub k1: f64,
    pub pilot: SupermartingaleReport,
    pub confirmation: SupermartingaleReport,
    pub moments: Vec<MomentCheck>,
    pub pass: bool,
}

/// Pilot calibration of `K₁` (doubling from `template.k1` until the pilot passes) and of the
/// moment constants, then a confirmation on `confirm`, which must use a fresh seed.
pub fn barrier_protocol(
    template: &BarrierSpec,
    dom: &DomainSpec,
    pilot: &BarrierSamples,
    confirm: &BarrierSamples,
    beta: f64,
    z_crit: f64,
    max_k1: f64,
) -> Result<BarrierProtocol> {
    if pilot.seed == confirm.seed {
        return Err(BarrierError::InvalidArgument("confirmation samples must use a fresh seed".into()));
    }
    let mut k1 = template.k1;
    let mut tried = Vec::new();
    let mut pilot_rep;
    loop {
        let b = BarrierSpec { k1, ..*template };
        tried.push(k1);
        pilot_rep = supermartingale_test(&b, dom, pilot, beta, z_crit)?;
        if pilot_rep.verdict == Verdict::Pass || template.kind == BarrierKind::Interior || 2.0 * k1 > max_k1 {
            break;
        }
        k1 *= 2.0;
    }
    let b = BarrierSpec { k1, ..*template };
    let confirmation = supermartingale_test(&b, dom, confirm, beta, z_crit)?;
    let b0 = confirmation.b0;
    let mut moments = Vec::new();
    for (name, p, c) in
        [("state", &pilot.moment, &confirm.moment), ("controls", &pilot.control_moment, &confirm.control_moment)]
    {
        let sp = Summary::of(p);
        let sc = Summary::of(c);
        let n = pilot_constant(&sp, b0, z_crit);
        let z = crate::stats::z_score(sc.mean, n * b0, sc.stderr);
        moments.push(MomentCheck {
            name: name.into(),
            mean: sc.mean,
            stderr: sc.stderr,
            b0,
            n_calibrated: n,
            z,
            pass: z <= z_crit,
        });
    }
    let pass =
        pilot_rep.verdict == Verdict::Pass && confirmation.verdict == Verdict::Pass && moments.iter().all(|m| m.pass);
    Ok(BarrierProtocol { barrier: b.name(), k1_tried: tried, k1, pilot: pilot_rep, confirmation, moments, pass })
}

/// Settings of a calibrated barrier experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPlan {
    /// `λ` values tried in order (boundary barriers); interior barriers use the first.
    pub lambdas: Vec<f64>,
    pub k1_start: f64,
    pub k1_max: f64,
    pub beta: f64,
    pub z_crit: f64,
    /// Localization level `n`.
    pub clip: f64,
    pub checkpoints: Vec<f64>,
    pub n_paths: usize,
    /// Time step; `min(10⁻³, λ²/200)` when absent.
    pub h: Option<f64>,
    pub pilot_seed: u64,
    pub confirm_seed: u64,
}

impl CalibrationPlan {
    /// Halvings of `lambda0`, starting from it.
    pub fn halving(lambda0: f64, count: usize) -> Vec<f64> {
        (0..count).map(|k| lambda0 / 2f64.powi(k as i32)).collect()
    }

    fn step(&self, lambda: f64) -> f64 {
        self.h.unwrap_or((lambda * lambda / 200.0).min(1e-3))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibratedBarrierReport {
    pub barrier: String,
    pub lambda: f64,
    pub delta1: f64,
    #[serde(rename = "K1")]
    pub k1: f64,
    pub h: f64,
    /// `(λ, K₁, all pilots passed)` in the order tried.
    pub tried: Vec<(f64, f64, bool)>,
    pub runs: Vec<BarrierProtocol>,
    pub pass: bool,
}

/// Strip parameters used with a given `λ`: the domain's `δ₁` while it stays below `λ²/2`.
pub fn regions_for(dom: &DomainSpec, lambda: f64) -> (f64, f64) {
    let d1 = if dom.delta1 < 0.5 * lambda * lambda { dom.delta1 } else { 0.25 * lambda * lambda };
    (lambda, d1)
}

/// Calibrates `(λ, K₁)` on pilot ensembles for every direction in `xi0s`, freezes them and
/// confirms on fresh ensembles. `x0` maps the calibrated domain to the start point.
#[allow(clippy::too_many_arguments)]
pub fn calibrated_barrier_test(
    spec: &ProblemSpec,
    dom: &DomainSpec,
    interior: Option<&crate::problem::InteriorScheme>,
    kind: BarrierKind,
    p: u32,
    xi0s: &[Vec<f64>],
    x0: &dyn Fn(&DomainSpec) -> Vec<f64>,
    plan: &CalibrationPlan,
) -> Result<CalibratedBarrierReport> {
    use crate::sde::{simulate_ensemble, SimConfig};
    if plan.pilot_seed == plan.confirm_seed {
        return Err(BarrierError::InvalidArgument("confirmation must use a fresh seed".into()));
    }
    if plan.lambdas.is_empty() || xi0s.is_empty() {
        return Err(BarrierError::InvalidArgument("need at least one λ and one direction".into()));
    }
    let selector = match kind {
        BarrierKind::Boundary => SchemeSelector::Boundary { p: p as f64 },
        BarrierKind::Interior => SchemeSelector::Interior,
    };
    let lambdas = match kind {
        BarrierKind::Boundary => &plan.lambdas[..],
        BarrierKind::Interior => &plan.lambdas[..1],
    };
    let samples = |dom_l: &DomainSpec, xi0: &[f64], seed: u64, h: f64| -> Result<BarrierSamples> {
        let start = x0(dom_l);
        let ens = simulate_ensemble(spec, dom_l, &start, &SimConfig::new(h, plan.n_paths, seed))
            .map_err(|e| BarrierError::InvalidArgument(e.to_string()))?;
        let q = QuasiSpec::first(selector, interior.cloned(), xi0.to_vec()).with_clip(plan.clip);
        collect_samples(&ens, spec, dom_l, &q, &plan.checkpoints, p, plan.beta)
    };
    let mut tried = Vec::new();
    let mut chosen = None;
    'outer: for &lam in lambdas {
        let (l, d1) = regions_for(dom, lam);
        let dom_l = dom.with_regions(l, d1).map_err(|e| BarrierError::InvalidArgument(e.to_string()))?;
        let h = plan.step(lam);
        let pilots: Vec<BarrierSamples> =
            xi0s.iter().map(|xi| samples(&dom_l, xi, plan.pilot_seed, h)).collect::<Result<_>>()?;
        let mut k1 = match kind {
            BarrierKind::Boundary => plan.k1_start,
            BarrierKind::Interior => 1.0,
        };
        loop {
            let b = BarrierSpec::new(kind, p, lam, k1)?;
            let mut ok = true;
            for s in &pilots {
                ok &= supermartingale_test(&b, &dom_l, s, plan.beta, plan.z_crit)?.verdict == Verdict::Pass;
            }
            tried.push((lam, k1, ok));
            if ok {
                chosen = Some((b, dom_l, h, pilots));
                break 'outer;
            }
            if kind == BarrierKind::Interior || 2.0 * k1 > plan.k1_max {
                break;
            }
            k1 *= 2.0;
        }
    }
    let Some((b, dom_l, h, pilots)) = chosen else {
        let (lam, k1, _) = *tried.last().expect("at least one attempt");
        return Ok(CalibratedBarrierReport {
            barrier: BarrierSpec::new(kind, p, lam, k1)?.name(),
            lambda: lam,
            delta1: regions_for(dom, lam).1,
            k1,
            h: plan.step(lam),
            tried,
            runs: Vec::new(),
            pass: false,
        });
    };
    let mut runs = Vec::new();
    for (xi, pilot) in xi0s.iter().zip(&pilots) {
        let confirm = samples(&dom_l, xi, plan.confirm_seed, h)?;
        runs.push(barrier_protocol(&b, &dom_l, pilot, &confirm, plan.beta, plan.z_crit, b.k1)?);
    }
    Ok(CalibratedBarrierReport {
        barrier: b.name(),
        lambda: b.lambda,
        delta1: dom_l.delta1,
        k1: b.k1,
        h,
        tried,
        pass: runs.iter().all(|r| r.pass),
        runs,
    })
}

impl BarrierSpec {
    /// Same barrier at another `λ`.
    pub fn at_lambda(&self, lambda: f64) -> Result<Self> {
        let b = self.with_lambda(lambda);
        BarrierSpec::new(b.kind, b.p, b.lambda, b.k1)
    }
}
