//! Problem data: coefficients, level-set domains, interior coefficient schemes, and the
//! sample-based hypothesis checks that gate every experiment.

mod builtin;
mod fields;
mod norms;

pub use builtin::{builtin, builtin_names, euler_exponents, tp2_solution, Builtin};
pub use fields::{
    ConstantDiffusion, ConstantField, ConstantLevelSet, IntervalLevelSet, LinearDriver, PowerSum1d, Quadratic,
    QuadraticBall, ScalarPolyDiffusion, Tp3Laplacian, Tp3Solution, Tp3Source, ZeroDriver,
};
pub use norms::{compute_norms, FNorms, GNorms, NormConfig, NormReport, PsiNorms};

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::rng::aux_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{what} is not finite at x = {point:?}")]
    NonFinite { what: String, point: Vec<f64> },
    #[error(
        "derivative callback {what} disagrees with central differences at x = {point:?} \
         (analytic {analytic:e}, finite difference {finite_difference:e})"
    )]
    DerivativeMismatch { what: String, point: Vec<f64>, analytic: f64, finite_difference: f64 },
}

pub type Result<T> = std::result::Result<T, ProblemError>;

/// State, noise and system dimensions `(d, d₁, k)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub d1: usize,
    pub k: usize,
}

/// Forward coefficients with directional derivatives. Matrices are row-major `d × d₁`.
pub trait Diffusion: Send + Sync {
    fn sigma(&self, x: &[f64], out: &mut [f64]);
    /// `σ_(y)(x)`, the derivative of `σ` along `y`.
    fn sigma_dir(&self, x: &[f64], y: &[f64], out: &mut [f64]);
    /// `σ_(y)(z)(x)`.
    fn sigma_dir2(&self, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]);
    fn drift(&self, x: &[f64], out: &mut [f64]);
    fn drift_dir(&self, x: &[f64], y: &[f64], out: &mut [f64]);
    fn drift_dir2(&self, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]);
}

/// Driver `f(x, y, z)` with `y ∈ R^k` and `z ∈ R^{k×d₁}` (row-major).
pub trait Driver: Send + Sync {
    fn value(&self, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]);
    /// `∂f/∂x`, `k × d`.
    fn fx(&self, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]);
    /// `∂f/∂y`, `k × k`.
    fn fy(&self, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]);
    /// `∂f/∂z`, `k × (k d₁)`.
    fn fz(&self, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]);
    /// `true` only when `f` vanishes identically.
    fn is_zero(&self) -> bool {
        false
    }
}

/// A `C²` map `R^d → R^k`: value, Jacobian (`k × d`) and Hessians (`k × d × d`).
pub trait SmoothField: Send + Sync {
    fn value(&self, x: &[f64], out: &mut [f64]);
    fn jacobian(&self, x: &[f64], out: &mut [f64]);
    fn hessian(&self, x: &[f64], out: &mut [f64]);
}

/// Scalar level-set function `ψ` with `D = {ψ > 0}`.
pub trait LevelSet: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    /// Row-major `d × d`.
    fn hessian(&self, x: &[f64], out: &mut [f64]);
}

/// Structural constants of the problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub mu: f64,
    pub l: f64,
    pub l0: f64,
    pub beta: f64,
    pub vartheta: f64,
    pub k0: f64,
}

impl Constants {
    /// Fills in `ϑ = (−2μ + L₀²)/2`.
    pub fn new(mu: f64, l: f64, l0: f64, beta: f64, k0: f64) -> Self {
        Constants { mu, l, l0, beta, vartheta: (-2.0 * mu + l0 * l0) / 2.0, k0 }
    }
}

#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub dims: Dims,
    pub diffusion: Arc<dyn Diffusion>,
    pub driver: Arc<dyn Driver>,
    pub g: Arc<dyn SmoothField>,
    pub constants: Constants,
    /// Known solution, when there is one.
    pub exact: Option<Arc<dyn SmoothField>>,
}

impl std::fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dims", &self.dims)
            .field("constants", &self.constants)
            .field("exact", &self.exact.is_some())
            .finish()
    }
}

impl ProblemSpec {
    /// `σ(x)` into a fresh buffer.
    pub fn sigma(&self, x: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.dims.d * self.dims.d1];
        self.diffusion.sigma(x, &mut s);
        s
    }

    /// `a(x) = ½σσ*`, row-major `d × d`.
    pub fn a(&self, x: &[f64]) -> Vec<f64> {
        let Dims { d, d1, .. } = self.dims;
        let s = self.sigma(x);
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = 0.5 * (0..d1).map(|l| s[i * d1 + l] * s[j * d1 + l]).sum::<f64>();
            }
        }
        a
    }

    /// `Lv(x)` for a scalar function given its gradient and Hessian at `x`.
    pub fn generator(&self, x: &[f64], grad: &[f64], hess: &[f64]) -> f64 {
        let d = self.dims.d;
        let a = self.a(x);
        let mut b = vec![0.0; d];
        self.diffusion.drift(x, &mut b);
        let second: f64 = a.iter().zip(hess).map(|(u, v)| u * v).sum();
        second + linalg::dot(&b, grad)
    }

    /// `Lψ(x)`.
    pub fn generator_psi(&self, psi: &dyn LevelSet, x: &[f64]) -> f64 {
        let d = self.dims.d;
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        psi.gradient(x, &mut grad);
        psi.hessian(x, &mut hess);
        self.generator(x, &grad, &hess)
    }

    /// `true` when `f_y` and `f_z` vanish at `samples` random points of the box `[-radius, radius]`
    /// in `(y, z)` with `x` drawn from `points`.
    pub fn driver_is_x_only(&self, points: &[Vec<f64>], samples: usize, seed: u64) -> bool {
        let Dims { k, d1, .. } = self.dims;
        if points.is_empty() {
            return true;
        }
        let mut rng = aux_rng(seed, 0xD1);
        let mut fy = vec![0.0; k * k];
        let mut fz = vec![0.0; k * k * d1];
        for _ in 0..samples {
            let x = &points[rng.random_range(0..points.len())];
            let y: Vec<f64> = (0..k).map(|_| rng.random_range(-10.0..10.0)).collect();
            let z: Vec<f64> = (0..k * d1).map(|_| rng.random_range(-10.0..10.0)).collect();
            self.driver.fy(x, &y, &z, &mut fy);
            self.driver.fz(x, &y, &z, &mut fz);
            if fy.iter().chain(&fz).any(|v| *v != 0.0) {
                return false;
            }
        }
        true
    }
}

/// Region of a point relative to `λ` and `δ₁`. The two interior regions overlap on
/// `λ² < ψ < λ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub inside: bool,
    /// `δ₁ < ψ < λ`.
    pub near_boundary: bool,
    /// `ψ > λ²`.
    pub interior: bool,
}

#[derive(Clone)]
pub struct DomainSpec {
    pub psi: Arc<dyn LevelSet>,
    pub lambda: f64,
    pub delta1: f64,
    /// Axis-aligned box containing `D̄`, used for sampling grids.
    pub bbox: Vec<(f64, f64)>,
    /// `|ψ|₀`, an upper bound of `ψ` over `D`.
    pub psi_sup: f64,
}

impl std::fmt::Debug for DomainSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DomainSpec")
            .field("lambda", &self.lambda)
            .field("delta1", &self.delta1)
            .field("bbox", &self.bbox)
            .field("psi_sup", &self.psi_sup)
            .finish()
    }
}

impl DomainSpec {
    pub fn new(psi: Arc<dyn LevelSet>, lambda: f64, delta1: f64, bbox: Vec<(f64, f64)>, psi_sup: f64) -> Result<Self> {
        let dom = DomainSpec { psi, lambda, delta1, bbox, psi_sup };
        dom.validate()?;
        Ok(dom)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(ProblemError::InvalidArgument(format!("lambda must lie in (0, 1), got {}", self.lambda)));
        }
        if !(self.delta1 > 0.0 && self.delta1 < self.lambda * self.lambda) {
            return Err(ProblemError::InvalidArgument(format!(
                "delta1 must lie in (0, lambda^2) = (0, {}), got {}",
                self.lambda * self.lambda,
                self.delta1
            )));
        }
        if self.bbox.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(ProblemError::InvalidArgument("empty bounding box".into()));
        }
        if !(self.psi_sup > 0.0) {
            return Err(ProblemError::InvalidArgument("psi_sup must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.bbox.len()
    }

    /// Same domain with different region parameters.
    pub fn with_regions(&self, lambda: f64, delta1: f64) -> Result<Self> {
        DomainSpec::new(self.psi.clone(), lambda, delta1, self.bbox.clone(), self.psi_sup)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.psi.value(x) > 0.0
    }

    pub fn region(&self, x: &[f64]) -> Region {
        let p = self.psi.value(x);
        Region {
            inside: p > 0.0,
            near_boundary: p > self.delta1 && p < self.lambda,
            interior: p > self.lambda * self.lambda,
        }
    }

    /// Tensor grid with `resolution` nodes per axis over the bounding box, keeping points of
    /// `D̄` (`closed`) or of `D`.
    pub fn grid(&self, resolution: usize, closed: bool) -> Vec<Vec<f64>> {
        let d = self.dim();
        let n = resolution.max(2);
        let total = n.pow(d as u32);
        let mut out = Vec::new();
        let mut x = vec![0.0; d];
        for idx in 0..total {
            let mut rem = idx;
            for (j, (lo, hi)) in self.bbox.iter().enumerate() {
                let i = rem % n;
                rem /= n;
                x[j] = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            }
            let p = self.psi.value(&x);
            if p > 0.0 || (closed && p >= 0.0) {
                out.push(x.clone());
            }
        }
        out
    }

    /// Points just inside `∂D` (`0 < ψ ≤ tol`) found by bisection along rays from `center`.
    /// Directions are evenly spaced in 1-d and 2-d and uniformly random otherwise.
    pub fn boundary_samples(&self, center: &[f64], n: usize, tol: f64, seed: u64) -> Vec<Vec<f64>> {
        let d = self.dim();
        let diam: f64 = self.bbox.iter().map(|(lo, hi)| (hi - lo).powi(2)).sum::<f64>().sqrt();
        let mut rng = aux_rng(seed, 0xB0);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let dir: Vec<f64> = match d {
                1 => vec![if i % 2 == 0 { 1.0 } else { -1.0 }],
                2 => {
                    let t = std::f64::consts::TAU * i as f64 / n as f64;
                    vec![t.cos(), t.sin()]
                }
                _ => {
                    let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
                    let nv = linalg::norm(&v);
                    v.iter().map(|c| c / nv).collect()
                }
            };
            let at = |s: f64| -> Vec<f64> { center.iter().zip(&dir).map(|(c, u)| c + s * u).collect() };
            if let Some(p) = self.ray_exit(center, &dir, diam, tol) {
                out.push(at(p));
            }
        }
        out
    }

    /// Parameter `s` on the ray `center + s·dir` with `0 < ψ ≤ tol`, if the ray leaves `D`
    /// within length `reach`.
    pub fn ray_exit(&self, center: &[f64], dir: &[f64], reach: f64, tol: f64) -> Option<f64> {
        let at = |s: f64| -> Vec<f64> { center.iter().zip(dir).map(|(c, u)| c + s * u).collect() };
        if self.psi.value(center) <= 0.0 {
            return None;
        }
        let steps = 256;
        let mut lo = 0.0;
        let mut hi = None;
        for j in 1..=steps {
            let s = reach * j as f64 / steps as f64;
            if self.psi.value(&at(s)) <= 0.0 {
                hi = Some(s);
                break;
            }
            lo = s;
        }
        let mut hi = hi?;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let p = self.psi.value(&at(mid));
            if p > 0.0 {
                lo = mid;
                if p <= tol {
                    break;
                }
            } else {
                hi = mid;
            }
        }
        let p = self.psi.value(&at(lo));
        (p > 0.0 && p <= tol).then_some(lo)
    }
}

type VecMap = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
type ScalarMap = dyn Fn(&[f64]) -> f64 + Send + Sync;
type PairMap = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;

/// Interior coefficient scheme `(ρ, M, Q)`: `ρ(x) ∈ R^d`, `M(x) ∈ R`, and
/// `Q(x, y) ∈ R^{d₁×d₁}` skew-symmetric and linear in `y`.
#[derive(Clone)]
pub struct InteriorScheme {
    pub rho: Arc<VecMap>,
    pub m: Arc<ScalarMap>,
    pub q: Arc<PairMap>,
}

impl std::fmt::Debug for InteriorScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("InteriorScheme { .. }")
    }
}

impl InteriorScheme {
    /// Constant `ρ`, `M` and `Q(x, y) = Σ_l y_l Q_l` with each `Q_l` a `d₁ × d₁` matrix.
    /// Only the antisymmetric part of each `Q_l` is kept.
    pub fn constant(rho: Vec<f64>, m: f64, q_basis: Vec<Vec<f64>>, d1: usize) -> Self {
        let q_basis: Vec<Vec<f64>> = q_basis.iter().map(|q| linalg::skew_part(q, d1)).collect();
        InteriorScheme {
            rho: Arc::new(move |_x, out| out.copy_from_slice(&rho)),
            m: Arc::new(move |_x| m),
            q: Arc::new(move |_x, y, out| {
                out.iter_mut().for_each(|o| *o = 0.0);
                for (yl, ql) in y.iter().zip(&q_basis) {
                    for (o, v) in out.iter_mut().zip(ql) {
                        *o += yl * v;
                    }
                }
            }),
        }
    }

    /// `ρ = 0`, `Q = 0`, constant `M`.
    pub fn zero(d: usize, m: f64) -> Self {
        InteriorScheme::constant(vec![0.0; d], m, Vec::new(), 0)
    }

    pub fn rho_at(&self, x: &[f64], d: usize) -> Vec<f64> {
        let mut r = vec![0.0; d];
        (self.rho)(x, &mut r);
        r
    }

    pub fn q_at(&self, x: &[f64], y: &[f64], d1: usize) -> Vec<f64> {
        let mut q = vec![0.0; d1 * d1];
        (self.q)(x, y, &mut q);
        q
    }

    /// Checks skew-symmetry and linearity of `Q` at random `y, z` for each point.
    pub fn validate(&self, dims: Dims, points: &[Vec<f64>], seed: u64) -> Result<()> {
        let Dims { d, d1, .. } = dims;
        let mut rng = aux_rng(seed, 0x51);
        for x in points {
            let y: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let alpha: f64 = rng.random_range(-2.0..2.0);
            let qy = self.q_at(x, &y, d1);
            if linalg::skew_defect(&qy, d1) != 0.0 {
                return Err(ProblemError::InvalidArgument(format!("Q(x, y) is not skew-symmetric at x = {x:?}")));
            }
            let qz = self.q_at(x, &z, d1);
            let comb: Vec<f64> = y.iter().zip(&z).map(|(a, b)| alpha * a + b).collect();
            let qc = self.q_at(x, &comb, d1);
            for i in 0..d1 * d1 {
                let expect = alpha * qy[i] + qz[i];
                if (qc[i] - expect).abs() > 1e-12 * (1.0 + expect.abs()) {
                    return Err(ProblemError::InvalidArgument(format!("Q(x, ·) is not linear at x = {x:?}")));
                }
            }
            let r = self.rho_at(x, d);
            let m = (self.m)(x);
            if !r.iter().all(|v| v.is_finite()) || !m.is_finite() {
                return Err(ProblemError::NonFinite { what: "rho or M".into(), point: x.clone() });
            }
        }
        Ok(())
    }
}

/// One hypothesis verdict: `pass` iff `margin ≤ 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisCheck {
    pub name: String,
    pub pass: bool,
    pub margin: f64,
    pub witness: Vec<f64>,
    pub detail: String,
}

impl HypothesisCheck {
    fn from_margin(name: &str, margin: f64, witness: Vec<f64>, detail: String) -> Self {
        HypothesisCheck { name: name.into(), pass: margin <= 0.0, margin, witness, detail }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    pub checks: Vec<HypothesisCheck>,
    pub grid_points: usize,
    pub boundary_points: usize,
}

impl HypothesisReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, name: &str) -> Option<&HypothesisCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Tolerance on `ψ` for points treated as boundary samples.
pub const BOUNDARY_TOL: f64 = 1e-3;

/// Slack on `|ψ_x| ≥ 1` for points within `10⁻¹⁰` of the boundary.
pub const GRADIENT_SLACK: f64 = 1e-8;

/// Sample-based checks of the domain hypotheses, the coefficient bound against `K₀` and
/// non-degeneracy of the normal diffusion.
///
/// The margins are:
/// - `H2`: `max_grid(Lψ + 1)`;
/// - `H2-gradient`: `max_boundary(1 − |ψ_x|) − 10⁻⁸`;
/// - `H3`: `Σ|σ_ij|₂ + Σ|b_i|₂ + |ψ|₂ − K₀` from grid suprema (`|ψ|₄` is not checked);
/// - `H9`: `−min_boundary ⟨a n, n⟩`;
/// - `PSD`: `−min_grid λ_min(a)` minus `10⁻¹⁰`.
///
/// Boundary samples are the grid points with `ψ ≤ 10⁻³` together with points found by
/// bisection along rays from the grid point of largest `ψ`; the gradient condition uses
/// the bisected points only.
pub fn validate_hypotheses(spec: &ProblemSpec, dom: &DomainSpec, grid: &[Vec<f64>]) -> Result<HypothesisReport> {
    let Dims { d, d1, .. } = spec.dims;
    if grid.is_empty() {
        return Err(ProblemError::InvalidArgument("empty grid".into()));
    }
    for x in grid {
        if x.len() != d {
            return Err(ProblemError::InvalidArgument(format!("grid point {x:?} has wrong dimension")));
        }
        let p = dom.psi.value(x);
        if !p.is_finite() {
            return Err(ProblemError::NonFinite { what: "psi".into(), point: x.clone() });
        }
        if p <= 0.0 {
            return Err(ProblemError::InvalidArgument(format!("grid point {x:?} is outside D")));
        }
    }

    // H2, interior part
    let mut h2 = (f64::NEG_INFINITY, grid[0].clone());
    for x in grid {
        let lpsi = spec.generator_psi(dom.psi.as_ref(), x);
        if !lpsi.is_finite() {
            return Err(ProblemError::NonFinite { what: "L psi".into(), point: x.clone() });
        }
        if lpsi + 1.0 > h2.0 {
            h2 = (lpsi + 1.0, x.clone());
        }
    }
    let interior_margin = h2.0;

    let center = grid.iter().max_by(|a, b| dom.psi.value(a).total_cmp(&dom.psi.value(b))).expect("nonempty grid");
    let rays = if d == 1 { 2 } else { 64 };
    // |ψ_x| ≥ 1 only holds on ∂D itself, so it is checked on points bisected to ψ ≤ 10⁻¹⁰
    let on_boundary = dom.boundary_samples(center, rays, 1e-10, 0);
    let mut boundary: Vec<Vec<f64>> = grid.iter().filter(|x| dom.psi.value(x) <= BOUNDARY_TOL).cloned().collect();
    boundary.extend(on_boundary.iter().cloned());

    let mut grad = vec![0.0; d];
    let mut h2_boundary = (f64::NEG_INFINITY, Vec::new());
    let mut h9 = (f64::NEG_INFINITY, Vec::new());
    for x in &boundary {
        dom.psi.gradient(x, &mut grad);
        let gn = linalg::norm(&grad);
        if !gn.is_finite() {
            return Err(ProblemError::NonFinite { what: "psi_x".into(), point: x.clone() });
        }
        if dom.psi.value(x) <= 1e-10 && 1.0 - gn - GRADIENT_SLACK > h2_boundary.0 {
            h2_boundary = (1.0 - gn - GRADIENT_SLACK, x.clone());
        }
        let a = spec.a(x);
        let n: Vec<f64> = grad.iter().map(|g| g / gn).collect();
        let mut an = vec![0.0; d];
        linalg::matvec(&a, d, d, &n, &mut an);
        let ann = linalg::dot(&an, &n);
        if -ann > h9.0 {
            h9 = (-ann, x.clone());
        }
    }
    let mut checks = vec![
        HypothesisCheck::from_margin(
            "H2",
            interior_margin,
            h2.1.clone(),
            format!("max(L psi + 1) = {interior_margin:.6e} over {} grid points", grid.len()),
        ),
        HypothesisCheck::from_margin(
            "H2-gradient",
            h2_boundary.0,
            h2_boundary.1.clone(),
            format!("max(1 - |psi_x| - slack) = {:.6e} over {} boundary points", h2_boundary.0, on_boundary.len()),
        ),
    ];

    // H3 from grid suprema of the entries of σ, b and of ψ with first and second derivatives.
    let h3 = coefficient_bound(spec, dom, grid);
    checks.push(HypothesisCheck::from_margin(
        "H3",
        h3.0 - spec.constants.k0,
        h3.1,
        format!(
            "sum |sigma_ij|_2 + sum |b_i|_2 + |psi|_2 = {:.6e} against K0 = {} (|psi|_4 not checked)",
            h3.0, spec.constants.k0
        ),
    ));

    checks.push(HypothesisCheck::from_margin(
        "H9",
        h9.0,
        h9.1,
        format!("min <a n, n> = {:.6e} over {} boundary points", -h9.0, boundary.len()),
    ));

    let mut psd = (f64::NEG_INFINITY, grid[0].clone());
    for x in grid {
        let a = spec.a(x);
        let m = nalgebra::DMatrix::from_row_slice(d, d, &a);
        let min_eig = m.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
        if -min_eig > psd.0 {
            psd = (-min_eig, x.clone());
        }
    }
    let _ = d1;
    checks.push(HypothesisCheck::from_margin(
        "PSD",
        psd.0 - 1e-10,
        psd.1,
        format!("min eigenvalue of a = {:.6e}", -psd.0),
    ));

    Ok(HypothesisReport { checks, grid_points: grid.len(), boundary_points: boundary.len() })
}

/// Grid estimate of `Σ|σ_ij|₂ + Σ|b_i|₂ + |ψ|₂` and the point with the largest pointwise
/// contribution.
fn coefficient_bound(spec: &ProblemSpec, dom: &DomainSpec, grid: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let Dims { d, d1, .. } = spec.dims;
    let nsig = d * d1;
    // per entry: sup value, sup gradient norm, sup Hessian norm
    let mut sig = vec![[0.0f64; 3]; nsig];
    let mut drf = vec![[0.0f64; 3]; d];
    let mut psi = [0.0f64; 3];
    let mut best = (f64::NEG_INFINITY, grid[0].clone());
    let basis: Vec<Vec<f64>> = (0..d)
        .map(|l| {
            let mut e = vec![0.0; d];
            e[l] = 1.0;
            e
        })
        .collect();
    let mut s = vec![0.0; nsig];
    let mut sd = vec![vec![0.0; nsig]; d];
    let mut sdd = vec![0.0; nsig];
    let mut b = vec![0.0; d];
    let mut bd = vec![vec![0.0; d]; d];
    let mut bdd = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut h = vec![0.0; d * d];
    for x in grid {
        spec.diffusion.sigma(x, &mut s);
        spec.diffusion.drift(x, &mut b);
        for l in 0..d {
            spec.diffusion.sigma_dir(x, &basis[l], &mut sd[l]);
            spec.diffusion.drift_dir(x, &basis[l], &mut bd[l]);
        }
        let mut sig_h = vec![0.0; nsig];
        let mut drf_h = vec![0.0; d];
        for l in 0..d {
            for m in 0..d {
                spec.diffusion.sigma_dir2(x, &basis[l], &basis[m], &mut sdd);
                spec.diffusion.drift_dir2(x, &basis[l], &basis[m], &mut bdd);
                for e in 0..nsig {
                    sig_h[e] += sdd[e] * sdd[e];
                }
                for e in 0..d {
                    drf_h[e] += bdd[e] * bdd[e];
                }
            }
        }
        let mut local = 0.0;
        for e in 0..nsig {
            let gn = (0..d).map(|l| sd[l][e] * sd[l][e]).sum::<f64>().sqrt();
            let vals = [s[e].abs(), gn, sig_h[e].sqrt()];
            for t in 0..3 {
                sig[e][t] = sig[e][t].max(vals[t]);
                local += vals[t];
            }
        }
        for e in 0..d {
            let gn = (0..d).map(|l| bd[l][e] * bd[l][e]).sum::<f64>().sqrt();
            let vals = [b[e].abs(), gn, drf_h[e].sqrt()];
            for t in 0..3 {
                drf[e][t] = drf[e][t].max(vals[t]);
                local += vals[t];
            }
        }
        dom.psi.gradient(x, &mut g);
        dom.psi.hessian(x, &mut h);
        let vals = [dom.psi.value(x).abs(), linalg::norm(&g), linalg::frobenius(&h)];
        for t in 0..3 {
            psi[t] = psi[t].max(vals[t]);
            local += vals[t];
        }
        if local > best.0 {
            best = (local, x.clone());
        }
    }
    let total: f64 = sig.iter().chain(&drf).map(|v| v.iter().sum::<f64>()).sum::<f64>() + psi.iter().sum::<f64>();
    (total, best.1)
}

/// One clause of the constant relations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub name: String,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct H7Report {
    pub pass: bool,
    pub clauses: Vec<Clause>,
}

impl H7Report {
    pub fn failing(&self) -> Vec<&str> {
        self.clauses.iter().filter(|c| !c.holds).map(|c| c.name.as_str()).collect()
    }
}

/// `0 < μ < L`, `−μ + 2L₀² < 2β < 0` and `2ϑ = −2μ + L₀²` (to `10⁻¹²`).
pub fn check_h7(mu: f64, l: f64, l0: f64, beta: f64, vartheta: f64) -> H7Report {
    let clauses = vec![
        Clause { name: "0 < mu".into(), holds: 0.0 < mu },
        Clause { name: "mu < L".into(), holds: mu < l },
        Clause { name: "-mu + 2 L0^2 < 2 beta".into(), holds: -mu + 2.0 * l0 * l0 < 2.0 * beta },
        Clause { name: "2 beta < 0".into(), holds: 2.0 * beta < 0.0 },
        Clause {
            name: "2 vartheta = -2 mu + L0^2".into(),
            holds: (2.0 * vartheta - (-2.0 * mu + l0 * l0)).abs() <= 1e-12,
        },
    ];
    H7Report { pass: clauses.iter().all(|c| c.holds), clauses }
}

/// Result of the moment-order condition on the interior scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct H10Report {
    pub pass: bool,
    /// `max(LHS − RHS)` over the samples.
    pub worst_margin: f64,
    pub witness_x: Vec<f64>,
    pub witness_y: Vec<f64>,
}

/// `LHS − RHS` of the interior moment condition at `(x, y)`:
///
/// ```text
/// 2p(4p−1)‖σ_(y) + ⟨ρ,y⟩σ + σQ(x,y)‖² + 4p⟨y, b_(y) + 2⟨ρ,y⟩b⟩ − (−4pβ − 1) − 2pM⟨a y, y⟩
/// ```
pub fn h10_margin(spec: &ProblemSpec, scheme: &InteriorScheme, p: f64, beta: f64, x: &[f64], y: &[f64]) -> f64 {
    let Dims { d, d1, .. } = spec.dims;
    let sigma = spec.sigma(x);
    let mut sy = vec![0.0; d * d1];
    spec.diffusion.sigma_dir(x, y, &mut sy);
    let rho = scheme.rho_at(x, d);
    let ry = linalg::dot(&rho, y);
    let q = scheme.q_at(x, y, d1);
    let mut sq = vec![0.0; d * d1];
    linalg::matmul(&sigma, d, d1, &q, d1, &mut sq);
    let mut acc = 0.0;
    for e in 0..d * d1 {
        let v = sy[e] + ry * sigma[e] + sq[e];
        acc += v * v;
    }
    let mut b = vec![0.0; d];
    let mut by = vec![0.0; d];
    spec.diffusion.drift(x, &mut b);
    spec.diffusion.drift_dir(x, y, &mut by);
    let drift_term: f64 = (0..d).map(|i| y[i] * (by[i] + 2.0 * ry * b[i])).sum();
    let a = spec.a(x);
    let mut ay = vec![0.0; d];
    linalg::matvec(&a, d, d, y, &mut ay);
    let lhs = 2.0 * p * (4.0 * p - 1.0) * acc + 4.0 * p * drift_term;
    let rhs = (-4.0 * p * beta - 1.0) + 2.0 * p * (scheme.m)(x) * linalg::dot(&ay, y);
    lhs - rhs
}

pub fn check_h10(
    spec: &ProblemSpec,
    dom: &DomainSpec,
    scheme: &InteriorScheme,
    p: f64,
    beta: f64,
    samples: &[(Vec<f64>, Vec<f64>)],
) -> Result<H10Report> {
    if !(p > 0.0) {
        return Err(ProblemError::InvalidArgument(format!("moment order must be positive, got {p}")));
    }
    let mut worst =
        H10Report { pass: true, worst_margin: f64::NEG_INFINITY, witness_x: Vec::new(), witness_y: Vec::new() };
    for (x, y) in samples {
        if (linalg::norm(y) - 1.0).abs() > 1e-8 {
            return Err(ProblemError::InvalidArgument(format!("|y| must be 1, got {}", linalg::norm(y))));
        }
        if !dom.contains(x) {
            return Err(ProblemError::InvalidArgument(format!("sample point {x:?} is outside D")));
        }
        let m = h10_margin(spec, scheme, p, beta, x, y);
        if !m.is_finite() {
            return Err(ProblemError::NonFinite { what: "moment condition".into(), point: x.clone() });
        }
        if m > worst.worst_margin {
            worst.worst_margin = m;
            worst.witness_x = x.clone();
            worst.witness_y = y.clone();
        }
    }
    worst.pass = worst.worst_margin <= 0.0;
    Ok(worst)
}

/// `(x, y)` samples with `x` drawn from `points` and `y` uniform on the unit sphere.
pub fn unit_direction_samples(points: &[Vec<f64>], n: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = aux_rng(seed, 0x10);
    (0..n)
        .map(|i| {
            let x = points[i % points.len()].clone();
            let y: Vec<f64> = (0..x.len()).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            let ny = linalg::norm(&y);
            (x, y.iter().map(|v| v / ny).collect())
        })
        .collect()
}

/// Largest relative discrepancies found by [`check_derivatives`], per callback.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DerivativeGateReport {
    pub points: usize,
    pub worst: Vec<(String, f64)>,
}

/// Cross-checks every derivative callback against central differences of its base
/// callback along random directions, failing on the first relative discrepancy above `tol`.
pub fn check_derivatives(
    spec: &ProblemSpec,
    dom: &DomainSpec,
    points: &[Vec<f64>],
    tol: f64,
    seed: u64,
) -> Result<DerivativeGateReport> {
    let Dims { d, d1, k } = spec.dims;
    let mut rng = aux_rng(seed, 0xFD);
    let mut report = DerivativeGateReport { points: points.len(), worst: Vec::new() };
    let mut record = |what: &str, x: &[f64], an: &[f64], fd: &[f64]| -> Result<()> {
        let mut worst: f64 = 0.0;
        for (a, f) in an.iter().zip(fd) {
            if !a.is_finite() || !f.is_finite() {
                return Err(ProblemError::NonFinite { what: what.into(), point: x.to_vec() });
            }
            let rel = (a - f).abs() / a.abs().max(1.0);
            if rel > tol {
                return Err(ProblemError::DerivativeMismatch {
                    what: what.into(),
                    point: x.to_vec(),
                    analytic: *a,
                    finite_difference: *f,
                });
            }
            worst = worst.max(rel);
        }
        match report.worst.iter_mut().find(|(n, _)| n == what) {
            Some(entry) => entry.1 = entry.1.max(worst),
            None => report.worst.push((what.to_string(), worst)),
        }
        Ok(())
    };
    let unit = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let nv = linalg::norm(&v);
        v.iter().map(|c| c / nv).collect()
    };
    for x in points {
        let eps = 1e-5 * linalg::norm(x).max(1.0);
        let y = unit(&mut rng, d);
        let z = unit(&mut rng, d);
        let shift = |dir: &[f64], s: f64| -> Vec<f64> { x.iter().zip(dir).map(|(a, b)| a + s * b).collect() };
        let xp = shift(&y, eps);
        let xm = shift(&y, -eps);
        let zp = shift(&z, eps);
        let zm = shift(&z, -eps);
        let central =
            |p: &[f64], m: &[f64]| -> Vec<f64> { p.iter().zip(m).map(|(a, b)| (a - b) / (2.0 * eps)).collect() };

        let (mut sp, mut sm) = (vec![0.0; d * d1], vec![0.0; d * d1]);
        let mut an = vec![0.0; d * d1];
        spec.diffusion.sigma(&xp, &mut sp);
        spec.diffusion.sigma(&xm, &mut sm);
        spec.diffusion.sigma_dir(x, &y, &mut an);
        record("sigma_(y)", x, &an, &central(&sp, &sm))?;
        spec.diffusion.sigma_dir(&zp, &y, &mut sp);
        spec.diffusion.sigma_dir(&zm, &y, &mut sm);
        spec.diffusion.sigma_dir2(x, &y, &z, &mut an);
        record("sigma_(y)(z)", x, &an, &central(&sp, &sm))?;

        let (mut bp, mut bm) = (vec![0.0; d], vec![0.0; d]);
        let mut bn = vec![0.0; d];
        spec.diffusion.drift(&xp, &mut bp);
        spec.diffusion.drift(&xm, &mut bm);
        spec.diffusion.drift_dir(x, &y, &mut bn);
        record("b_(y)", x, &bn, &central(&bp, &bm))?;
        spec.diffusion.drift_dir(&zp, &y, &mut bp);
        spec.diffusion.drift_dir(&zm, &y, &mut bm);
        spec.diffusion.drift_dir2(x, &y, &z, &mut bn);
        record("b_(y)(z)", x, &bn, &central(&bp, &bm))?;

        field_gate("g", spec.g.as_ref(), k, d, x, &y, &z, eps, &mut record)?;
        if let Some(u) = &spec.exact {
            field_gate("exact", u.as_ref(), k, d, x, &y, &z, eps, &mut record)?;
        }

        let gp = dom.psi.value(&xp);
        let gm = dom.psi.value(&xm);
        let mut grad = vec![0.0; d];
        dom.psi.gradient(x, &mut grad);
        record("psi_x", x, &[linalg::dot(&grad, &y)], &[(gp - gm) / (2.0 * eps)])?;
        let (mut gzp, mut gzm) = (vec![0.0; d], vec![0.0; d]);
        dom.psi.gradient(&zp, &mut gzp);
        dom.psi.gradient(&zm, &mut gzm);
        let mut hess = vec![0.0; d * d];
        dom.psi.hessian(x, &mut hess);
        let mut hz = vec![0.0; d];
        linalg::matvec(&hess, d, d, &z, &mut hz);
        record("psi_xx", x, &hz, &central(&gzp, &gzm))?;

        // driver partials at a random (y, z) in the unit box
        let yv: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zv: Vec<f64> = (0..k * d1).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (mut fp, mut fm) = (vec![0.0; k], vec![0.0; k]);
        let mut fx = vec![0.0; k * d];
        spec.driver.fx(x, &yv, &zv, &mut fx);
        spec.driver.value(&xp, &yv, &zv, &mut fp);
        spec.driver.value(&xm, &yv, &zv, &mut fm);
        let mut fxy = vec![0.0; k];
        linalg::matvec(&fx, k, d, &y, &mut fxy);
        record("f_x", x, &fxy, &central(&fp, &fm))?;
        let dy = unit(&mut rng, k);
        let yp: Vec<f64> = yv.iter().zip(&dy).map(|(a, b)| a + eps * b).collect();
        let ym: Vec<f64> = yv.iter().zip(&dy).map(|(a, b)| a - eps * b).collect();
        let mut fy = vec![0.0; k * k];
        spec.driver.fy(x, &yv, &zv, &mut fy);
        spec.driver.value(x, &yp, &zv, &mut fp);
        spec.driver.value(x, &ym, &zv, &mut fm);
        let mut fyy = vec![0.0; k];
        linalg::matvec(&fy, k, k, &dy, &mut fyy);
        record("f_y", x, &fyy, &central(&fp, &fm))?;
        let dz = unit(&mut rng, k * d1);
        let zpv: Vec<f64> = zv.iter().zip(&dz).map(|(a, b)| a + eps * b).collect();
        let zmv: Vec<f64> = zv.iter().zip(&dz).map(|(a, b)| a - eps * b).collect();
        let mut fz = vec![0.0; k * k * d1];
        spec.driver.fz(x, &yv, &zv, &mut fz);
        spec.driver.value(x, &yv, &zpv, &mut fp);
        spec.driver.value(x, &yv, &zmv, &mut fm);
        let mut fzz = vec![0.0; k];
        linalg::matvec(&fz, k, k * d1, &dz, &mut fzz);
        record("f_z", x, &fzz, &central(&fp, &fm))?;
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn field_gate(
    name: &str,
    field: &dyn SmoothField,
    k: usize,
    d: usize,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    eps: f64,
    record: &mut impl FnMut(&str, &[f64], &[f64], &[f64]) -> Result<()>,
) -> Result<()> {
    let shift = |dir: &[f64], s: f64| -> Vec<f64> { x.iter().zip(dir).map(|(a, b)| a + s * b).collect() };
    let (mut vp, mut vm) = (vec![0.0; k], vec![0.0; k]);
    field.value(&shift(y, eps), &mut vp);
    field.value(&shift(y, -eps), &mut vm);
    let mut jac = vec![0.0; k * d];
    field.jacobian(x, &mut jac);
    let mut jy = vec![0.0; k];
    linalg::matvec(&jac, k, d, y, &mut jy);
    let fd: Vec<f64> = vp.iter().zip(&vm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    record(&format!("{name}_x"), x, &jy, &fd)?;
    let (mut jp, mut jm) = (vec![0.0; k * d], vec![0.0; k * d]);
    field.jacobian(&shift(z, eps), &mut jp);
    field.jacobian(&shift(z, -eps), &mut jm);
    let mut hess = vec![0.0; k * d * d];
    field.hessian(x, &mut hess);
    let mut hz = vec![0.0; k * d];
    for c in 0..k {
        linalg::matvec(&hess[c * d * d..(c + 1) * d * d], d, d, z, &mut hz[c * d..(c + 1) * d]);
    }
    let fd: Vec<f64> = jp.iter().zip(&jm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    record(&format!("{name}_xx"), x, &hz, &fd)
}

#[cfg(test)]
mod tests;
