//! Backward solvers for the random-horizon BSDE
//!
//! ```text
//! Y_t = g(X_τ) + ∫_t^τ f(X_s, Y_s, Z_s) ds − ∫_t^τ Z_s dW_s,     u(x) = Y_0.
//! ```
//!
//! Two backends: the driver-free Monte Carlo average (legal when `f` depends on `x` only)
//! and a Picard iteration whose conditional expectations are least-squares regressions
//! on a feature basis, slice by slice on the absolute time grid.
//!
//! The regression targets are realized continuation values: at slice `i` the target is
//! `S_i = g(X_τ) + Σ_{j≥i} F_j h` with `F_j` the driver evaluated at the previous iterate.
//! By the tower property this has the same conditional expectation as the one-step target
//! `Y_{i+1} + F_i h`, and slices decouple, so the driver-free value is reproduced exactly
//! when `f ≡ 0`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::problem::{check_h7, Dims, DomainSpec, ProblemSpec, SmoothField};
use crate::sde::PathEnsemble;
use crate::stats::{pairwise_sum, Summary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BsdeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("the driver depends on (y, z); use the Picard solver")]
    DriverNotFree,
    #[error("(H7) fails for the problem constants: {0}")]
    ConstantsRejected(String),
    #[error("regression system at time slice {slice} is rank deficient (rank {rank} of {features})")]
    RankDeficient { slice: usize, rank: usize, features: usize },
    #[error("non-finite value in slice {slice}")]
    NonFinite { slice: usize },
}

pub type Result<T> = std::result::Result<T, BsdeError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    DriverFree,
    Picard,
}

/// Values along one path: `Y_0, …, Y_n` (`k` each, `Y_n = g(X_τ)`) and `Z_0, …, Z_{n−1}`
/// (`k × d₁` each).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSolution {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankDiagnostic {
    pub slice: usize,
    pub rank: usize,
    pub features: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BsdeSolution {
    pub method: Method,
    pub y0: Vec<f64>,
    pub y0_stderr: Vec<f64>,
    pub y0_ci95: Vec<f64>,
    pub iterations: usize,
    /// Sup-norm change of `Y_0` in the last sweep.
    pub residual: f64,
    pub residual_history: Vec<f64>,
    pub converged: bool,
    pub n_paths: usize,
    pub capped_fraction: f64,
    /// `max|g(X_τ)| · P(capped)`, the induced bias bound.
    pub capped_bias_bound: f64,
    pub rank_deficient: Vec<RankDiagnostic>,
    /// Slices with too few alive paths for the full basis (fitted by their mean).
    pub sparse_slices: usize,
    /// Only populated by the Picard solver.
    pub paths: Option<Vec<PathSolution>>,
}

impl BsdeSolution {
    /// Summary built from per-path samples of `Y_0` (`n × k`).
    pub fn from_samples(method: Method, samples: &[f64], k: usize, capped: &[bool], g_abs_max: f64) -> Self {
        let n = samples.len() / k;
        let mut y0 = Vec::with_capacity(k);
        let mut se = Vec::with_capacity(k);
        for c in 0..k {
            let col: Vec<f64> = (0..n).map(|p| samples[p * k + c]).collect();
            let s = Summary::of(&col);
            y0.push(s.mean);
            se.push(s.stderr);
        }
        let capped_fraction = capped.iter().filter(|c| **c).count() as f64 / n.max(1) as f64;
        BsdeSolution {
            method,
            y0_ci95: se.iter().map(|s| crate::stats::Z95 * s).collect(),
            y0,
            y0_stderr: se,
            iterations: 1,
            residual: 0.0,
            residual_history: vec![0.0],
            converged: true,
            n_paths: n,
            capped_fraction,
            capped_bias_bound: g_abs_max * capped_fraction,
            rank_deficient: Vec::new(),
            sparse_slices: 0,
            paths: None,
        }
    }
}

/// `g(X_τ) + Σ_{i<τ/h} f(X_i) h` for one path of the ensemble, written to `out[..k]`.
pub fn driver_free_sample(ens: &PathEnsemble, spec: &ProblemSpec, path: usize, out: &mut [f64]) {
    let Dims { k, d1, .. } = spec.dims;
    spec.g.value(ens.exit_point(path), out);
    if spec.driver.is_zero() {
        return;
    }
    let zy = vec![0.0; k];
    let zz = vec![0.0; k * d1];
    let mut fv = vec![0.0; k];
    let mut acc = vec![0.0; k];
    let mut w = ens.walker(spec, path);
    for _ in 0..ens.exit_index[path] {
        spec.driver.value(w.state(), &zy, &zz, &mut fv);
        for (a, f) in acc.iter_mut().zip(&fv) {
            *a += f;
        }
        w.advance();
    }
    for (o, a) in out.iter_mut().zip(&acc) {
        *o += a * ens.h;
    }
}

/// Driver-free Monte Carlo estimate of `u(x₀)`. Requires `f_y = f_z = 0` at ten random points.
pub fn estimate_u_driver_free(ens: &PathEnsemble, spec: &ProblemSpec) -> Result<BsdeSolution> {
    let k = spec.dims.k;
    if ens.n_paths == 0 {
        return Err(BsdeError::InvalidArgument("empty ensemble".into()));
    }
    let probe: Vec<Vec<f64>> =
        std::iter::once(ens.x0.clone()).chain((0..ens.n_paths.min(9)).map(|p| ens.exit_point(p).to_vec())).collect();
    if !spec.driver_is_x_only(&probe, 10, ens.seed) {
        return Err(BsdeError::DriverNotFree);
    }
    let samples: Vec<f64> = (0..ens.n_paths)
        .into_par_iter()
        .flat_map_iter(|p| {
            let mut out = vec![0.0; k];
            driver_free_sample(ens, spec, p, &mut out);
            out
        })
        .collect();
    let g_max = terminal_abs_max(ens, spec);
    Ok(BsdeSolution::from_samples(Method::DriverFree, &samples, k, &ens.capped, g_max))
}

fn terminal_abs_max(ens: &PathEnsemble, spec: &ProblemSpec) -> f64 {
    let k = spec.dims.k;
    let mut gv = vec![0.0; k];
    let mut m: f64 = 0.0;
    for p in 0..ens.n_paths {
        spec.g.value(ens.exit_point(p), &mut gv);
        m = m.max(linalg::norm(&gv));
    }
    m
}

/// Regression features `x ↦ φ(x) ∈ R^m`.
pub trait Basis: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);
}

/// Monomials of total degree `≤ degree`, optionally extended by extra scalar fields.
pub struct PolyBasis {
    exponents: Vec<Vec<u32>>,
    extra: Vec<std::sync::Arc<dyn SmoothField>>,
    extra_k: Vec<usize>,
}

impl PolyBasis {
    pub fn new(d: usize, degree: u32) -> Self {
        let mut exponents = Vec::new();
        let mut cur = vec![0u32; d];
        fn rec(j: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
            if j == cur.len() {
                out.push(cur.clone());
                return;
            }
            for e in 0..=left {
                cur[j] = e;
                rec(j + 1, left - e, cur, out);
            }
            cur[j] = 0;
        }
        rec(0, degree, &mut cur, &mut exponents);
        exponents.sort_by_key(|e| e.iter().sum::<u32>());
        PolyBasis { exponents, extra: Vec::new(), extra_k: Vec::new() }
    }

    /// Adds every component of a `k`-valued field as a feature.
    pub fn with_field(mut self, field: std::sync::Arc<dyn SmoothField>, k: usize) -> Self {
        self.extra.push(field);
        self.extra_k.push(k);
        self
    }
}

impl Basis for PolyBasis {
    fn dim(&self) -> usize {
        self.exponents.len() + self.extra_k.iter().sum::<usize>()
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = x.iter().zip(e).map(|(v, p)| v.powi(*p as i32)).product();
        }
        let mut at = self.exponents.len();
        for (f, &k) in self.extra.iter().zip(&self.extra_k) {
            f.value(x, &mut out[at..at + k]);
            at += k;
        }
    }
}

struct PsiField(std::sync::Arc<dyn crate::problem::LevelSet>);

impl SmoothField for PsiField {
    fn value(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.0.value(x);
    }
    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        self.0.gradient(x, out);
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        self.0.hessian(x, out);
    }
}

/// Polynomials of total degree `≤ 3`, plus `ψ` and the components of `g` when they are not
/// already in the polynomial span (checked on a grid of `D`).
pub fn default_basis(spec: &ProblemSpec, dom: &DomainSpec) -> PolyBasis {
    let mut basis = PolyBasis::new(spec.dims.d, 3);
    let d = spec.dims.d as f64;
    let target = 8.0 * (basis.dim() + spec.dims.k + 2) as f64;
    let grid = dom.grid((target.powf(1.0 / d).ceil() as usize + 2).max(9), false);
    let psi: std::sync::Arc<dyn SmoothField> = std::sync::Arc::new(PsiField(dom.psi.clone()));
    for (field, k) in [(psi, 1), (spec.g.clone(), spec.dims.k)] {
        if !in_span(&basis, field.as_ref(), k, &grid) {
            basis = basis.with_field(field, k);
        }
    }
    basis
}

fn in_span(basis: &PolyBasis, field: &dyn SmoothField, k: usize, grid: &[Vec<f64>]) -> bool {
    let m = basis.dim();
    if grid.len() < 2 * (m + 1) {
        return false;
    }
    let mut feats = vec![0.0; grid.len() * m];
    let mut vals = vec![0.0; grid.len() * k];
    for (i, x) in grid.iter().enumerate() {
        basis.eval(x, &mut feats[i * m..(i + 1) * m]);
        field.value(x, &mut vals[i * k..(i + 1) * k]);
    }
    let (fit, _, _) = fit_slice(&feats, m, &vals, k, 0);
    let scale = vals.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    fit.iter().zip(&vals).all(|(f, v)| (f - v).abs() <= 1e-9 * scale)
}

/// One path of a backward problem. Optional per-step factors realize the perturbed
/// equation `−dY = [f(X, Y, Z) c + Z̃θ] dt − Z̃ dW` with `Z = Z̃Rᵀ/√c`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BackwardPath {
    /// `(n + 1) × d`
    pub states: Vec<f64>,
    /// `n × d₁`
    pub dw: Vec<f64>,
    /// `k`
    pub terminal: Vec<f64>,
    /// `n` time-change factors `c`.
    pub factor: Option<Vec<f64>>,
    /// `n × d₁` drift controls `θ`.
    pub theta: Option<Vec<f64>>,
    /// `n × d₁ × d₁` rotations `R`.
    pub rot: Option<Vec<f64>>,
}

impl BackwardPath {
    pub fn steps(&self, d: usize) -> usize {
        self.states.len() / d - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackwardInput {
    pub dims: Dims,
    pub h: f64,
    pub paths: Vec<BackwardPath>,
    pub capped: Vec<bool>,
}

impl BackwardInput {
    /// Replays the ensemble's states and increments through the Euler recursion.
    pub fn from_ensemble(ens: &PathEnsemble, spec: &ProblemSpec) -> Self {
        let Dims { k, d1, .. } = spec.dims;
        let paths = (0..ens.n_paths)
            .into_par_iter()
            .map(|p| {
                let n = ens.exit_index[p] as usize;
                let mut w = ens.walker(spec, p);
                let mut states = Vec::with_capacity((n + 1) * spec.dims.d);
                let mut dw = Vec::with_capacity(n * d1);
                states.extend_from_slice(w.state());
                for _ in 0..n {
                    w.advance();
                    states.extend_from_slice(w.state());
                    dw.extend_from_slice(w.last_increment());
                }
                let mut terminal = vec![0.0; k];
                spec.g.value(ens.exit_point(p), &mut terminal);
                BackwardPath { states, dw, terminal, factor: None, theta: None, rot: None }
            })
            .collect();
        BackwardInput { dims: spec.dims, h: ens.h, paths, capped: ens.capped.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardConfig {
    pub max_iter: usize,
    pub tol: f64,
    /// Rank deficiency is an error instead of a recorded diagnostic.
    pub strict_rank: bool,
    /// Run even when (H7) fails for the problem constants (the result is flagged).
    pub allow_noncontractive: bool,
    /// Keep per-path `Y`, `Z` in the solution.
    pub keep_paths: bool,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig { max_iter: 20, tol: 1e-6, strict_rank: false, allow_noncontractive: true, keep_paths: false }
    }
}

/// Eigenvalues below this fraction of the largest are dropped from the normal equations.
const RANK_TOL: f64 = 1e-10;

/// Numerical rank of a slice design. Features constant on the slice merge into the
/// intercept, so `full` counts the intercept plus the non-constant features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rank {
    rank: usize,
    full: usize,
}

/// Column sums of the rows `row(i, buf)`, `i < n`: plain sums within chunks of 256 rows,
/// pairwise across chunks, so the result does not depend on scheduling.
fn chunked_sums(n: usize, width: usize, row: impl Fn(usize, &mut [f64])) -> Vec<f64> {
    let mut buf = vec![0.0; width];
    let parts: Vec<Vec<f64>> = (0..n)
        .step_by(256)
        .map(|start| {
            let mut acc = vec![0.0; width];
            for i in start..(start + 256).min(n) {
                row(i, &mut buf);
                for (a, b) in acc.iter_mut().zip(&buf) {
                    *a += b;
                }
            }
            acc
        })
        .collect();
    (0..width).map(|c| pairwise_sum(&parts.iter().map(|p| p[c]).collect::<Vec<_>>())).collect()
}

/// Least-squares fit of `targets` (`n × t`) on standardized `features` (`n × m`), returning
/// fitted values and the numerical rank. The intercept is always included.
fn fit_slice(features: &[f64], m: usize, targets: &[f64], t: usize, min_paths: usize) -> (Vec<f64>, Rank, bool) {
    let n = targets.len() / t;
    let nf = n as f64;
    let tmean: Vec<f64> = chunked_sums(n, t, |i, b| b.copy_from_slice(&targets[i * t..(i + 1) * t]))
        .into_iter()
        .map(|v| v / nf)
        .collect();
    let mut fitted = vec![0.0; n * t];
    for i in 0..n {
        fitted[i * t..(i + 1) * t].copy_from_slice(&tmean);
    }
    if n < min_paths || m == 0 {
        return (fitted, Rank { rank: 1, full: 1 }, n < min_paths);
    }
    let fmean: Vec<f64> = chunked_sums(n, m, |i, b| b.copy_from_slice(&features[i * m..(i + 1) * m]))
        .into_iter()
        .map(|v| v / nf)
        .collect();
    let fsd: Vec<f64> = chunked_sums(n, m, |i, b| {
        for j in 0..m {
            b[j] = (features[i * m + j] - fmean[j]).powi(2);
        }
    })
    .into_iter()
    .map(|v| (v / nf).sqrt())
    .collect();
    let active: Vec<usize> = (0..m).filter(|&j| fsd[j] > 1e-12 * (1.0 + fmean[j].abs())).collect();
    let q = active.len();
    if q == 0 {
        return (fitted, Rank { rank: 1, full: 1 }, false);
    }
    let mut z = vec![0.0; n * q];
    for i in 0..n {
        for (a, &j) in active.iter().enumerate() {
            z[i * q + a] = (features[i * m + j] - fmean[j]) / fsd[j];
        }
    }
    // upper triangle of the Gram matrix, then the right-hand sides
    let width = q * q + q * t;
    let sums = chunked_sums(n, width, |i, b| {
        let zi = &z[i * q..(i + 1) * q];
        for a in 0..q {
            for c in a..q {
                b[a * q + c] = zi[a] * zi[c];
            }
            for c in 0..t {
                b[q * q + a * t + c] = zi[a] * (targets[i * t + c] - tmean[c]);
            }
        }
    });
    let mut gram = vec![0.0; q * q];
    for a in 0..q {
        for c in a..q {
            gram[a * q + c] = sums[a * q + c] / nf;
            gram[c * q + a] = gram[a * q + c];
        }
    }
    let rhs: Vec<f64> = sums[q * q..].iter().map(|v| v / nf).collect();
    let eig = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_row_slice(q, q, &gram));
    let lmax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let mut coef = vec![0.0; q * t];
    let mut rank = 1;
    for (e, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam <= RANK_TOL * lmax {
            continue;
        }
        rank += 1;
        let v = eig.eigenvectors.column(e);
        for c in 0..t {
            let proj: f64 = (0..q).map(|a| v[a] * rhs[a * t + c]).sum::<f64>() / lam;
            for a in 0..q {
                coef[a * t + c] += v[a] * proj;
            }
        }
    }
    for i in 0..n {
        for a in 0..q {
            let s = z[i * q + a];
            for c in 0..t {
                fitted[i * t + c] += s * coef[a * t + c];
            }
        }
    }
    // dropped constant features count towards the rank only through the intercept
    (fitted, Rank { rank, full: q + 1 }, false)
}

/// Ordinary least squares `y ≈ Xβ` (no implicit intercept) with the coefficient covariance
/// `s²(XᵀX)⁺`, for inspecting a single slice.
#[derive(Clone, Debug, PartialEq)]
pub struct OlsFit {
    pub coef: Vec<f64>,
    pub cov: Vec<f64>,
    pub rank: usize,
}

impl OlsFit {
    pub fn fit(features: &[f64], m: usize, y: &[f64]) -> Result<Self> {
        let n = y.len();
        if m == 0 || features.len() != n * m || n <= m {
            return Err(BsdeError::InvalidArgument(format!("need more than {m} rows, got {n}")));
        }
        let x = nalgebra::DMatrix::from_row_slice(n, m, features);
        let yv = nalgebra::DVector::from_column_slice(y);
        let xtx = x.transpose() * &x;
        let eig = nalgebra::SymmetricEigen::new(xtx);
        let lmax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let mut pinv = nalgebra::DMatrix::zeros(m, m);
        let mut rank = 0;
        for (e, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam > RANK_TOL * lmax {
                rank += 1;
                let v = eig.eigenvectors.column(e);
                pinv += v * v.transpose() / lam;
            }
        }
        let coef = &pinv * (x.transpose() * &yv);
        let resid = &yv - &x * &coef;
        let s2 = resid.norm_squared() / (n - rank) as f64;
        let cov = pinv * s2;
        Ok(OlsFit { coef: coef.iter().copied().collect(), cov: cov.transpose().iter().copied().collect(), rank })
    }

    /// Fitted value and its standard error at the feature vector `phi`.
    pub fn predict(&self, phi: &[f64]) -> (f64, f64) {
        let m = self.coef.len();
        let v = linalg::dot(&self.coef, phi);
        let mut var = 0.0;
        for a in 0..m {
            for b in 0..m {
                var += phi[a] * self.cov[a * m + b] * phi[b];
            }
        }
        (v, var.max(0.0).sqrt())
    }
}

/// Picard iteration with least-squares conditional expectations.
pub fn solve_picard(
    input: &BackwardInput,
    spec: &ProblemSpec,
    basis: &dyn Basis,
    cfg: &PicardConfig,
) -> Result<BsdeSolution> {
    let Dims { d, d1, k } = input.dims;
    let h = input.h;
    let np = input.paths.len();
    if np == 0 {
        return Err(BsdeError::InvalidArgument("empty ensemble".into()));
    }
    if basis.dim() == 0 {
        return Err(BsdeError::InvalidArgument("basis must have at least one function".into()));
    }
    let c = spec.constants;
    let h7 = check_h7(c.mu, c.l, c.l0, c.beta, c.vartheta);
    if !h7.pass && !cfg.allow_noncontractive {
        return Err(BsdeError::ConstantsRejected(h7.failing().join(", ")));
    }
    let m = basis.dim();
    let kd = k * d1;
    let steps: Vec<usize> = input.paths.iter().map(|p| p.steps(d)).collect();
    let n_slices = steps.iter().copied().max().unwrap_or(0);
    // paths alive at slice i, in path order
    let mut alive: Vec<Vec<usize>> = vec![Vec::new(); n_slices];
    for (p, &n) in steps.iter().enumerate() {
        for slot in alive.iter_mut().take(n) {
            slot.push(p);
        }
    }
    let x_only =
        spec.driver_is_x_only(&input.paths.iter().take(10).map(|p| p.states[..d].to_vec()).collect::<Vec<_>>(), 10, 0);
    let min_paths = (2 * (m + 1)).max(10);

    // fitted Y and Z̃ per path and step
    let mut yfit: Vec<Vec<f64>> = steps.iter().map(|&n| vec![0.0; n * k]).collect();
    let mut zfit: Vec<Vec<f64>> = steps.iter().map(|&n| vec![0.0; n * kd]).collect();
    let mut prev_y0: Option<Vec<f64>> = None;
    let mut history = Vec::new();
    let mut rank_deficient = Vec::new();
    let mut sparse = 0;
    let mut converged = false;
    let mut y0_summary = (vec![0.0; k], vec![0.0; k]);
    let mut iterations = 0;

    for _ in 0..cfg.max_iter.max(1) {
        iterations += 1;
        // continuation values S_i = terminal + Σ_{j≥i} F_j h, with S_n = terminal
        let cont: Vec<Vec<f64>> = (0..np)
            .into_par_iter()
            .map(|p| {
                let path = &input.paths[p];
                let n = steps[p];
                let mut s = vec![0.0; (n + 1) * k];
                s[n * k..].copy_from_slice(&path.terminal);
                let mut fv = vec![0.0; k];
                let mut zmat = vec![0.0; kd];
                for j in (0..n).rev() {
                    let x = &path.states[j * d..(j + 1) * d];
                    let yj = &yfit[p][j * k..(j + 1) * k];
                    let zt = &zfit[p][j * kd..(j + 1) * kd];
                    let cj = path.factor.as_ref().map_or(1.0, |f| f[j]);
                    // Z = Z̃ Rᵀ / √c
                    match &path.rot {
                        Some(rot) if cj > 0.0 => {
                            let r = &rot[j * d1 * d1..(j + 1) * d1 * d1];
                            for row in 0..k {
                                for col in 0..d1 {
                                    zmat[row * d1 + col] =
                                        (0..d1).map(|l| zt[row * d1 + l] * r[col * d1 + l]).sum::<f64>() / cj.sqrt();
                                }
                            }
                        }
                        _ if cj > 0.0 => {
                            for (zm, z) in zmat.iter_mut().zip(zt) {
                                *zm = z / cj.sqrt();
                            }
                        }
                        _ => zmat.iter_mut().for_each(|v| *v = 0.0),
                    }
                    spec.driver.value(x, yj, &zmat, &mut fv);
                    for row in 0..k {
                        let mut inc = fv[row] * cj;
                        if let Some(th) = &path.theta {
                            let t = &th[j * d1..(j + 1) * d1];
                            inc += (0..d1).map(|l| zt[row * d1 + l] * t[l]).sum::<f64>();
                        }
                        s[j * k + row] = s[(j + 1) * k + row] + inc * h;
                    }
                }
                s
            })
            .collect();

        let s0: Vec<f64> = (0..np).flat_map(|p| cont[p][..k].to_vec()).collect();
        let y0: Vec<f64> =
            (0..k).map(|c| Summary::of(&(0..np).map(|p| s0[p * k + c]).collect::<Vec<_>>()).mean).collect();
        let se: Vec<f64> =
            (0..k).map(|c| Summary::of(&(0..np).map(|p| s0[p * k + c]).collect::<Vec<_>>()).stderr).collect();
        if y0.iter().any(|v| !v.is_finite()) {
            return Err(BsdeError::NonFinite { slice: 0 });
        }

        let fits: Vec<(Rank, Vec<f64>, Vec<f64>, usize, bool)> = (0..n_slices)
            .into_par_iter()
            .map(|i| {
                let ids = &alive[i];
                let mut feats = vec![0.0; ids.len() * m];
                let t = k + kd;
                let mut targets = vec![0.0; ids.len() * t];
                for (r, &p) in ids.iter().enumerate() {
                    let path = &input.paths[p];
                    basis.eval(&path.states[i * d..(i + 1) * d], &mut feats[r * m..(r + 1) * m]);
                    let row = &mut targets[r * t..(r + 1) * t];
                    row[..k].copy_from_slice(&cont[p][i * k..(i + 1) * k]);
                    let dw = &path.dw[i * d1..(i + 1) * d1];
                    for c in 0..k {
                        let next = cont[p][(i + 1) * k + c];
                        for col in 0..d1 {
                            row[k + c * d1 + col] = next * dw[col] / h;
                        }
                    }
                }
                // slice 0 has every path at x₀: the fit is the mean
                let (mm, mp) = if i == 0 { (0, 0) } else { (m, min_paths) };
                let (fit, rank, thin) = fit_slice(&feats, mm, &targets, t, mp);
                let mut fy = Vec::with_capacity(ids.len() * k);
                let mut fz = Vec::with_capacity(ids.len() * kd);
                for row in fit.chunks(t) {
                    fy.extend_from_slice(&row[..k]);
                    fz.extend_from_slice(&row[k..]);
                }
                (rank, fy, fz, i, thin)
            })
            .collect();

        rank_deficient.clear();
        sparse = 0;
        for (rank, fy, fz, i, thin) in fits {
            if thin {
                sparse += 1;
            } else if rank.rank < rank.full {
                if cfg.strict_rank {
                    return Err(BsdeError::RankDeficient { slice: i, rank: rank.rank, features: rank.full });
                }
                rank_deficient.push(RankDiagnostic { slice: i, rank: rank.rank, features: rank.full });
            }
            if fy.iter().chain(&fz).any(|v| !v.is_finite()) {
                return Err(BsdeError::NonFinite { slice: i });
            }
            for (r, &p) in alive[i].iter().enumerate() {
                yfit[p][i * k..(i + 1) * k].copy_from_slice(&fy[r * k..(r + 1) * k]);
                zfit[p][i * kd..(i + 1) * kd].copy_from_slice(&fz[r * kd..(r + 1) * kd]);
            }
        }

        let residual = match &prev_y0 {
            Some(prev) => y0.iter().zip(prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
            None => f64::INFINITY,
        };
        y0_summary = (y0.clone(), se);
        prev_y0 = Some(y0);
        if x_only {
            history.push(0.0);
            converged = true;
            break;
        }
        history.push(residual);
        if residual < cfg.tol {
            converged = true;
            break;
        }
    }

    let capped_fraction = input.capped.iter().filter(|c| **c).count() as f64 / np as f64;
    let g_max = input.paths.iter().map(|p| linalg::norm(&p.terminal)).fold(0.0, f64::max);
    let paths = cfg.keep_paths.then(|| {
        (0..np)
            .map(|p| {
                let mut y = yfit[p].clone();
                y.extend_from_slice(&input.paths[p].terminal);
                PathSolution { y, z: zfit[p].clone() }
            })
            .collect()
    });
    let (y0, se) = y0_summary;
    Ok(BsdeSolution {
        method: Method::Picard,
        y0_ci95: se.iter().map(|s| crate::stats::Z95 * s).collect(),
        y0,
        y0_stderr: se,
        iterations,
        residual: *history.last().unwrap_or(&0.0),
        residual_history: history,
        converged,
        n_paths: np,
        capped_fraction,
        capped_bias_bound: g_max * capped_fraction,
        rank_deficient,
        sparse_slices: sparse,
        paths,
    })
}

/// `(‖Y‖, ‖Z‖)` with `‖V‖² = E[Σ_{i<n} e^{2β t_i} |V_i|² h]`, computed component-wise
/// over all entries of `V`.
pub fn mbeta_norm(solution: &BsdeSolution, h: f64, beta: f64, k: usize, d1: usize) -> Result<(f64, f64)> {
    let paths =
        solution.paths.as_ref().ok_or_else(|| BsdeError::InvalidArgument("solution has no per-path values".into()))?;
    let mut ys = Vec::with_capacity(paths.len());
    let mut zs = Vec::with_capacity(paths.len());
    for p in paths {
        let n = p.z.len() / (k * d1).max(1);
        let (mut sy, mut sz) = (0.0, 0.0);
        for i in 0..n {
            let w = (2.0 * beta * i as f64 * h).exp() * h;
            sy += w * p.y[i * k..(i + 1) * k].iter().map(|v| v * v).sum::<f64>();
            sz += w * p.z[i * k * d1..(i + 1) * k * d1].iter().map(|v| v * v).sum::<f64>();
        }
        ys.push(sy);
        zs.push(sz);
    }
    let n = paths.len().max(1) as f64;
    Ok(((pairwise_sum(&ys) / n).sqrt(), (pairwise_sum(&zs) / n).sqrt()))
}

/// `E[sup_t |Y_t|²] + E∫|Y|² dt + E∫‖Z‖² dt` from per-path values.
pub fn apriori_functional(solution: &BsdeSolution, h: f64, k: usize, d1: usize) -> Result<f64> {
    let paths =
        solution.paths.as_ref().ok_or_else(|| BsdeError::InvalidArgument("solution has no per-path values".into()))?;
    let vals: Vec<f64> = paths
        .iter()
        .map(|p| {
            let n = p.z.len() / (k * d1);
            let sup = p.y.chunks(k).map(|y| y.iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max);
            let iy: f64 = p.y[..n * k].iter().map(|v| v * v).sum::<f64>() * h;
            let iz: f64 = p.z.iter().map(|v| v * v).sum::<f64>() * h;
            sup + iy + iz
        })
        .collect();
    Ok(pairwise_sum(&vals) / vals.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::*;
    use crate::sde::{simulate_ensemble, SimConfig};
    use std::sync::Arc;

    #[test]
    fn poly_basis_counts_monomials() {
        assert_eq!(PolyBasis::new(2, 3).dim(), 10);
        assert_eq!(PolyBasis::new(1, 3).dim(), 4);
        assert_eq!(PolyBasis::new(3, 2).dim(), 10);
        let mut out = vec![0.0; 10];
        PolyBasis::new(2, 3).eval(&[2.0, 3.0], &mut out);
        assert_eq!(out[0], 1.0);
        assert!(out.contains(&12.0) && out.contains(&27.0));
    }

    #[test]
    fn constant_terminal_value_has_zero_variance() {
        let b = builtin("tp1").unwrap();
        let spec = ProblemSpec { g: Arc::new(ConstantField { value: vec![2.5] }), ..b.spec };
        let ens = simulate_ensemble(&spec, &b.domain, &[0.3, 0.0], &SimConfig::new(0.01, 200, 1)).unwrap();
        let sol = estimate_u_driver_free(&ens, &spec).unwrap();
        assert_eq!(sol.y0, vec![2.5]);
        assert_eq!(sol.y0_stderr, vec![0.0]);
    }

    #[test]
    fn driver_free_refuses_solution_dependent_drivers() {
        let b = builtin("tp3-semilinear").unwrap();
        let ens = simulate_ensemble(&b.spec, &b.domain, &[0.3, 0.0], &SimConfig::new(0.01, 20, 1)).unwrap();
        assert_eq!(estimate_u_driver_free(&ens, &b.spec), Err(BsdeError::DriverNotFree));
    }

    #[test]
    fn picard_with_zero_driver_reproduces_driver_free() {
        let b = builtin("tp1").unwrap();
        let ens = simulate_ensemble(&b.spec, &b.domain, &[0.5, 0.0], &SimConfig::new(0.01, 2000, 3)).unwrap();
        let free = estimate_u_driver_free(&ens, &b.spec).unwrap();
        let input = BackwardInput::from_ensemble(&ens, &b.spec);
        let basis = default_basis(&b.spec, &b.domain);
        let pic = solve_picard(&input, &b.spec, &basis, &PicardConfig::default()).unwrap();
        assert_eq!(pic.iterations, 1);
        assert!((pic.y0[0] - free.y0[0]).abs() < 1e-12);
    }

    #[test]
    fn terminal_value_is_exact_on_every_path() {
        let b = builtin("tp2").unwrap();
        let ens = simulate_ensemble(&b.spec, &b.domain, &[1.5], &SimConfig::new(0.01, 300, 3)).unwrap();
        let input = BackwardInput::from_ensemble(&ens, &b.spec);
        let basis = default_basis(&b.spec, &b.domain);
        let cfg = PicardConfig { keep_paths: true, ..Default::default() };
        let sol = solve_picard(&input, &b.spec, &basis, &cfg).unwrap();
        for (p, ps) in sol.paths.as_ref().unwrap().iter().enumerate() {
            assert_eq!(*ps.y.last().unwrap(), ens.exit_point(p)[0]);
        }
    }

    #[test]
    fn mbeta_norm_of_unit_process() {
        let sol = BsdeSolution {
            paths: Some(vec![PathSolution { y: vec![1.0; 101], z: vec![0.0; 100] }; 3]),
            ..BsdeSolution::from_samples(Method::Picard, &[0.0], 1, &[false], 0.0)
        };
        let (ny, nz) = mbeta_norm(&sol, 0.01, 0.0, 1, 1).unwrap();
        assert!((ny - 1.0).abs() < 1e-12);
        assert_eq!(nz, 0.0);
        let zero = BsdeSolution { paths: Some(vec![PathSolution { y: vec![0.0; 11], z: vec![0.0; 10] }]), ..sol };
        assert_eq!(mbeta_norm(&zero, 0.1, -0.3, 1, 1).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn fit_recovers_linear_targets() {
        let n = 500;
        let feats: Vec<f64> = (0..n)
            .flat_map(|i| {
                let x = i as f64 / n as f64;
                [1.0, x, x * x]
            })
            .collect();
        let targets: Vec<f64> = (0..n)
            .map(|i| {
                let x = i as f64 / n as f64;
                3.0 - 2.0 * x + 0.5 * x * x
            })
            .collect();
        let (fitted, rank, thin) = fit_slice(&feats, 3, &targets, 1, 10);
        assert!(!thin);
        assert_eq!(rank, Rank { rank: 3, full: 3 });
        for (f, t) in fitted.iter().zip(&targets) {
            assert!((f - t).abs() < 1e-9);
        }
    }
}
