//! First and second quasi-derivatives of the forward flow.
//!
//! ```text
//! dξ = [σ_(ξ) + rσ + σP] dW + [b_(ξ) + 2rb − σπ] dt,                     ξ⁰ = ∫ π·dW
//! dη = [σ_(η) + r̃σ + σP̃ + σ_(ξ)(ξ) + 2rσ_(ξ) − r²σ + 2σ_(ξ)P + 2rσP + σP²] dW
//!    + [b_(η) + 2r̃b − σπ̃ + b_(ξ)(ξ) + 4rb_(ξ) − 2σ_(ξ)π − 2rσπ − 2σPπ] dt,
//! η⁰ = (ξ⁰)² − ⟨ξ⁰⟩ + ∫ π̃·dW
//! ```
//!
//! The controls `(r, π, P)` come from one of two coefficient schemes: the near-boundary
//! scheme on `{δ₁ < ψ < λ}` and the interior scheme on `{ψ > λ²}`. Coefficients are
//! evaluated at the start of every Euler step and the quasi-derivatives share the base
//! path's increments, so a [`QuasiWalker`] replays everything from the ensemble seed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::problem::{Dims, DomainSpec, InteriorScheme, ProblemSpec, SmoothField};
use crate::rng::GaussianStream;
use crate::sde::{PathEnsemble, PathWalker};
use crate::stats::{bonferroni_family_level, Summary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuasiError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("ψ(x) = {psi} is outside the scheme region ({lo}, {hi})")]
    OutOfRegion { psi: f64, lo: f64, hi: f64 },
    #[error("normal diffusion A(x) = {a:e} vanishes at {x:?}")]
    DegenerateNormal { a: f64, x: Vec<f64> },
    #[error("test function is not L-harmonic: |Lv| = {residual:e} at {x:?}")]
    NotHarmonic { residual: f64, x: Vec<f64> },
}

pub type Result<T> = std::result::Result<T, QuasiError>;

/// `A(x)` at or below this value is treated as a degenerate normal diffusion.
pub const MIN_NORMAL_DIFFUSION: f64 = 1e-10;

/// Controls of one Euler step. `p` and `p_tilde` are `d₁ × d₁`, row-major, skew.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuasiCoeffs {
    pub r: f64,
    pub r_tilde: f64,
    pub pi: Vec<f64>,
    pub pi_tilde: Vec<f64>,
    pub p: Vec<f64>,
    pub p_tilde: Vec<f64>,
}

impl QuasiCoeffs {
    pub fn zero(d1: usize) -> Self {
        QuasiCoeffs {
            r: 0.0,
            r_tilde: 0.0,
            pi: vec![0.0; d1],
            pi_tilde: vec![0.0; d1],
            p: vec![0.0; d1 * d1],
            p_tilde: vec![0.0; d1 * d1],
        }
    }

    fn clear(&mut self) {
        self.r = 0.0;
        self.r_tilde = 0.0;
        self.pi.iter_mut().for_each(|v| *v = 0.0);
        self.pi_tilde.iter_mut().for_each(|v| *v = 0.0);
        self.p.iter_mut().for_each(|v| *v = 0.0);
        self.p_tilde.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.r.is_finite()
            && self.r_tilde.is_finite()
            && self.pi.iter().chain(&self.pi_tilde).chain(&self.p).chain(&self.p_tilde).all(|v| v.is_finite())
    }
}

/// `φ = λ² + ψ − ψ²/(4λ)`.
pub fn phi(lambda: f64, psi: f64) -> f64 {
    lambda * lambda + psi - psi * psi / (4.0 * lambda)
}

/// Pointwise geometry needed by the boundary scheme.
struct Geometry {
    psi: f64,
    grad: Vec<f64>,
    hess: Vec<f64>,
    sigma: Vec<f64>,
    sigma_y: Vec<f64>,
    psi_sigma: Vec<f64>,
    dpsi_sigma: Vec<f64>,
}

impl Geometry {
    fn new(dims: Dims) -> Self {
        let Dims { d, d1, .. } = dims;
        Geometry {
            psi: 0.0,
            grad: vec![0.0; d],
            hess: vec![0.0; d * d],
            sigma: vec![0.0; d * d1],
            sigma_y: vec![0.0; d * d1],
            psi_sigma: vec![0.0; d1],
            dpsi_sigma: vec![0.0; d1],
        }
    }
}

/// Near-boundary coefficients with `π = 4p ψ_(σ) ψ_(y) / (φψ)`, written into `out`.
/// Returns `A(x)`.
fn boundary_into(
    spec: &ProblemSpec,
    dom: &DomainSpec,
    x: &[f64],
    y: &[f64],
    p: f64,
    g: &mut Geometry,
    out: &mut QuasiCoeffs,
) -> Result<f64> {
    let Dims { d, d1, .. } = spec.dims;
    g.psi = dom.psi.value(x);
    if !(g.psi > dom.delta1 && g.psi < dom.lambda) {
        return Err(QuasiError::OutOfRegion { psi: g.psi, lo: dom.delta1, hi: dom.lambda });
    }
    dom.psi.gradient(x, &mut g.grad);
    dom.psi.hessian(x, &mut g.hess);
    spec.diffusion.sigma(x, &mut g.sigma);
    spec.diffusion.sigma_dir(x, y, &mut g.sigma_y);
    // ψ_(σ_i) = ψ_x·σ_i and (ψ_(σ_i))_(y) = yᵀψ_xx σ_i + ψ_x·(σ_(y))_i
    let mut hy = [0.0; 8];
    let hy = if d <= 8 { &mut hy[..d] } else { return Err(QuasiError::InvalidArgument("d > 8".into())) };
    linalg::matvec(&g.hess, d, d, y, hy);
    for i in 0..d1 {
        let (mut a, mut b) = (0.0, 0.0);
        for l in 0..d {
            a += g.grad[l] * g.sigma[l * d1 + i];
            b += hy[l] * g.sigma[l * d1 + i] + g.grad[l] * g.sigma_y[l * d1 + i];
        }
        g.psi_sigma[i] = a;
        g.dpsi_sigma[i] = b;
    }
    let a_norm: f64 = g.psi_sigma.iter().map(|v| v * v).sum();
    if !(a_norm > MIN_NORMAL_DIFFUSION) {
        return Err(QuasiError::DegenerateNormal { a: a_norm, x: x.to_vec() });
    }
    let psi_y = linalg::dot(&g.grad, y);
    let rho_bar = -linalg::dot(&g.psi_sigma, &g.dpsi_sigma) / a_norm;
    let ratio = psi_y / g.psi;
    out.r = rho_bar + ratio;
    out.r_tilde = ratio * ratio;
    let ph = phi(dom.lambda, g.psi);
    for i in 0..d1 {
        out.pi[i] = 4.0 * p * g.psi_sigma[i] * psi_y / (ph * g.psi);
        out.pi_tilde[i] = 0.0;
        for j in 0..d1 {
            out.p[i * d1 + j] = if i == j {
                0.0
            } else {
                (g.psi_sigma[j] * g.dpsi_sigma[i] - g.psi_sigma[i] * g.dpsi_sigma[j]) / a_norm
            };
            out.p_tilde[i * d1 + j] = 0.0;
        }
    }
    Ok(a_norm)
}

/// Near-boundary scheme at `x` along `y` with moment order `p` (`π` carries the factor `4p`).
/// Requires `δ₁ < ψ(x) < λ`.
pub fn boundary_scheme(spec: &ProblemSpec, dom: &DomainSpec, x: &[f64], y: &[f64], p: f64) -> Result<QuasiCoeffs> {
    let mut out = QuasiCoeffs::zero(spec.dims.d1);
    let mut g = Geometry::new(spec.dims);
    boundary_into(spec, dom, x, y, p, &mut g, &mut out)?;
    Ok(out)
}

/// `(⟨ρ, y⟩, (M/2)σ*y, Q(x, y))` into `r`, `pi`, `pmat`.
fn interior_maps(
    spec: &ProblemSpec,
    scheme: &InteriorScheme,
    x: &[f64],
    y: &[f64],
    sigma: &[f64],
    rho: &mut [f64],
    pi: &mut [f64],
    pmat: &mut [f64],
) -> f64 {
    let Dims { d, d1, .. } = spec.dims;
    (scheme.rho)(x, rho);
    let m = (scheme.m)(x);
    linalg::matvec_t(sigma, d, d1, y, pi);
    pi.iter_mut().for_each(|v| *v *= 0.5 * m);
    (scheme.q)(x, y, pmat);
    // keep P exactly skew whatever the callback returns
    for i in 0..d1 {
        pmat[i * d1 + i] = 0.0;
        for j in i + 1..d1 {
            let s = 0.5 * (pmat[i * d1 + j] - pmat[j * d1 + i]);
            pmat[i * d1 + j] = s;
            pmat[j * d1 + i] = -s;
        }
    }
    linalg::dot(rho, y)
}

/// Interior scheme at `x` along `y`; tilde coefficients are the same maps at `eta` (zero when
/// `eta` is `None`). Requires `ψ(x) > λ²`.
pub fn interior_scheme(
    spec: &ProblemSpec,
    dom: &DomainSpec,
    scheme: &InteriorScheme,
    x: &[f64],
    y: &[f64],
    eta: Option<&[f64]>,
) -> Result<QuasiCoeffs> {
    let psi = dom.psi.value(x);
    let lo = dom.lambda * dom.lambda;
    if !(psi > lo) {
        return Err(QuasiError::OutOfRegion { psi, lo, hi: f64::INFINITY });
    }
    let Dims { d, .. } = spec.dims;
    let sigma = spec.sigma(x);
    let mut rho = vec![0.0; d];
    let mut out = QuasiCoeffs::zero(spec.dims.d1);
    out.r = interior_maps(spec, scheme, x, y, &sigma, &mut rho, &mut out.pi, &mut out.p);
    if let Some(eta) = eta {
        out.r_tilde = interior_maps(spec, scheme, x, eta, &sigma, &mut rho, &mut out.pi_tilde, &mut out.p_tilde);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Zero,
    Boundary,
    Interior,
}

/// Which coefficients drive the quasi-derivatives and where the trajectory stops.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "scheme")]
pub enum SchemeSelector {
    /// `r = π = P = 0` (the flow derivative), stopped at the exit from `D`.
    Zero,
    /// Near-boundary scheme, stopped at the exit from `{δ₁ < ψ < λ}`.
    Boundary { p: f64 },
    /// Interior scheme, stopped at the exit from `{ψ > λ²}`.
    Interior,
    /// Interior scheme on `{ψ > λ²}`, near-boundary scheme on `{δ₁ < ψ ≤ λ²}`, zero
    /// coefficients on `{ψ ≤ δ₁}`; stopped at the exit from `D`.
    Switching { p: f64 },
}

impl SchemeSelector {
    pub fn needs_interior(&self) -> bool {
        matches!(self, SchemeSelector::Interior | SchemeSelector::Switching { .. })
    }

    /// Mode at `ψ`, or `None` when the trajectory must stop.
    pub fn mode(&self, dom: &DomainSpec, psi: f64) -> Option<Mode> {
        let l2 = dom.lambda * dom.lambda;
        match *self {
            SchemeSelector::Zero => (psi > 0.0).then_some(Mode::Zero),
            SchemeSelector::Boundary { .. } => (psi > dom.delta1 && psi < dom.lambda).then_some(Mode::Boundary),
            SchemeSelector::Interior => (psi > l2).then_some(Mode::Interior),
            SchemeSelector::Switching { .. } => {
                if psi > l2 {
                    Some(Mode::Interior)
                } else if psi > dom.delta1 {
                    Some(Mode::Boundary)
                } else if psi > 0.0 {
                    Some(Mode::Zero)
                } else {
                    None
                }
            }
        }
    }

    fn moment_order(&self) -> f64 {
        match *self {
            SchemeSelector::Boundary { p } | SchemeSelector::Switching { p } => p,
            _ => 1.0,
        }
    }
}

/// Everything needed to evolve quasi-derivatives along an ensemble.
#[derive(Clone, Debug)]
pub struct QuasiSpec {
    pub selector: SchemeSelector,
    pub interior: Option<InteriorScheme>,
    pub xi0: Vec<f64>,
    /// Evolve `η` from this initial value when present.
    pub eta0: Option<Vec<f64>>,
    /// Localization: stop once `|ξ| ≥ n`.
    pub clip: Option<f64>,
    /// Stop at this time.
    pub horizon: Option<f64>,
}

impl QuasiSpec {
    pub fn first(selector: SchemeSelector, interior: Option<InteriorScheme>, xi0: Vec<f64>) -> Self {
        QuasiSpec { selector, interior, xi0, eta0: None, clip: None, horizon: None }
    }

    pub fn with_eta(mut self, eta0: Vec<f64>) -> Self {
        self.eta0 = Some(eta0);
        self
    }

    pub fn with_clip(mut self, n: f64) -> Self {
        self.clip = Some(n);
        self
    }

    pub fn with_horizon(mut self, t: f64) -> Self {
        self.horizon = Some(t);
        self
    }

    fn validate(&self, dims: Dims) -> Result<()> {
        if self.xi0.len() != dims.d || self.eta0.as_ref().is_some_and(|e| e.len() != dims.d) {
            return Err(QuasiError::InvalidArgument(format!("directions must have {} coordinates", dims.d)));
        }
        if self.selector.needs_interior() && self.interior.is_none() {
            return Err(QuasiError::InvalidArgument("the selected scheme needs an interior scheme".into()));
        }
        if let SchemeSelector::Boundary { p } | SchemeSelector::Switching { p } = self.selector {
            if !(p > 0.0) {
                return Err(QuasiError::InvalidArgument(format!("moment order must be positive, got {p}")));
            }
        }
        if self.clip.is_some_and(|n| !(n > 0.0)) || self.horizon.is_some_and(|t| !(t >= 0.0)) {
            return Err(QuasiError::InvalidArgument("clip and horizon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// `X` left `D`.
    DomainExit,
    /// `X` left the region of the scheme.
    RegionExit,
    /// `|ξ|` reached the localization level.
    Clipped,
    Horizon,
    /// The base path hit the ensemble's `T_max`.
    Capped,
    /// Coefficients could not be evaluated (degenerate `A` or non-finite values).
    Singular,
}

/// Scratch buffers of one walker.
struct Work {
    geo: Geometry,
    rho: Vec<f64>,
    drift: Vec<f64>,
    sig_xi: Vec<f64>,
    b_xi: Vec<f64>,
    sig_eta: Vec<f64>,
    b_eta: Vec<f64>,
    sig_xixi: Vec<f64>,
    b_xixi: Vec<f64>,
    mat: Vec<f64>,
    mat2: Vec<f64>,
    pp: Vec<f64>,
    g1: Vec<f64>,
    h1: Vec<f64>,
    g2: Vec<f64>,
    h2: Vec<f64>,
    v: Vec<f64>,
}

impl Work {
    fn new(dims: Dims) -> Self {
        let Dims { d, d1, .. } = dims;
        let m = d * d1;
        Work {
            geo: Geometry::new(dims),
            rho: vec![0.0; d],
            drift: vec![0.0; d],
            sig_xi: vec![0.0; m],
            b_xi: vec![0.0; d],
            sig_eta: vec![0.0; m],
            b_eta: vec![0.0; d],
            sig_xixi: vec![0.0; m],
            b_xixi: vec![0.0; d],
            mat: vec![0.0; m],
            mat2: vec![0.0; m],
            pp: vec![0.0; d1 * d1],
            g1: vec![0.0; m],
            h1: vec![0.0; d],
            g2: vec![0.0; m],
            h2: vec![0.0; d],
            v: vec![0.0; d.max(d1)],
        }
    }
}

/// One base path together with its quasi-derivatives, stepped in place.
pub struct QuasiWalker<'a> {
    spec: &'a ProblemSpec,
    dom: &'a DomainSpec,
    q: &'a QuasiSpec,
    base: PathWalker<'a>,
    seed: u64,
    path: u64,
    h: f64,
    limit: u64,
    limit_reason: StopReason,
    xi: Vec<f64>,
    eta: Option<Vec<f64>>,
    xi0: f64,
    qv: f64,
    pt: f64,
    coeffs: QuasiCoeffs,
    mode: Mode,
    min_a: f64,
    stopped: Option<StopReason>,
    w: Work,
}

impl<'a> QuasiWalker<'a> {
    pub fn new(
        spec: &'a ProblemSpec,
        dom: &'a DomainSpec,
        q: &'a QuasiSpec,
        ens: &PathEnsemble,
        path: usize,
    ) -> Result<Self> {
        q.validate(spec.dims)?;
        let psi0 = dom.psi.value(&ens.x0);
        if q.selector.mode(dom, psi0).is_none() {
            let (lo, hi) = match q.selector {
                SchemeSelector::Boundary { .. } => (dom.delta1, dom.lambda),
                SchemeSelector::Interior => (dom.lambda * dom.lambda, f64::INFINITY),
                _ => (0.0, f64::INFINITY),
            };
            return Err(QuasiError::OutOfRegion { psi: psi0, lo, hi });
        }
        let horizon = q.horizon.map(|t| (t / ens.h).round() as u64);
        let (limit, limit_reason) = match horizon {
            Some(n) if n < ens.cap_steps => (n, StopReason::Horizon),
            _ => (ens.cap_steps, StopReason::Capped),
        };
        let mut w = QuasiWalker {
            spec,
            dom,
            q,
            base: ens.walker(spec, path),
            seed: ens.seed,
            path: path as u64,
            h: ens.h,
            limit,
            limit_reason,
            xi: q.xi0.clone(),
            eta: q.eta0.clone(),
            xi0: 0.0,
            qv: 0.0,
            pt: 0.0,
            coeffs: QuasiCoeffs::zero(spec.dims.d1),
            mode: Mode::Zero,
            min_a: f64::INFINITY,
            stopped: None,
            w: Work::new(spec.dims),
        };
        w.prepare();
        Ok(w)
    }

    pub fn state(&self) -> &[f64] {
        self.base.state()
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    pub fn eta(&self) -> Option<&[f64]> {
        self.eta.as_deref()
    }

    /// `ξ⁰ = Σ π·ΔW`.
    pub fn xi0(&self) -> f64 {
        self.xi0
    }

    /// `η⁰ = (ξ⁰)² − Σ|π|²h + Σ π̃·ΔW`.
    pub fn eta0(&self) -> f64 {
        self.xi0 * self.xi0 - self.qv + self.pt
    }

    pub fn step_index(&self) -> u64 {
        self.base.step_index()
    }

    /// Coefficients for the next step (zero once stopped).
    pub fn coeffs(&self) -> &QuasiCoeffs {
        &self.coeffs
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn stopped(&self) -> Option<StopReason> {
        self.stopped
    }

    /// Smallest `A(x)` met by the near-boundary scheme so far.
    pub fn min_normal_diffusion(&self) -> f64 {
        self.min_a
    }

    pub fn last_increment(&self) -> &[f64] {
        self.base.last_increment()
    }

    /// Increment stream positioned at the current step, for continuing past the stop.
    pub fn noise(&self) -> GaussianStream {
        GaussianStream::new(self.seed, self.path, self.spec.dims.d1, self.step_index())
    }

    /// Checks the stop conditions at the current state and evaluates the coefficients.
    fn prepare(&mut self) {
        if self.stopped.is_some() {
            return;
        }
        let x = self.base.state();
        let psi = self.dom.psi.value(x);
        let stop = if psi <= 0.0 {
            Some(StopReason::DomainExit)
        } else if self.base.step_index() >= self.limit {
            Some(self.limit_reason)
        } else if self.q.clip.is_some_and(|n| linalg::norm(&self.xi) >= n) {
            Some(StopReason::Clipped)
        } else {
            None
        };
        let mode = match stop {
            Some(_) => None,
            None => self.q.selector.mode(self.dom, psi),
        };
        let Some(mode) = mode else {
            self.stopped = Some(stop.unwrap_or(StopReason::RegionExit));
            self.coeffs.clear();
            return;
        };
        self.mode = mode;
        let ok = match mode {
            Mode::Zero => {
                self.coeffs.clear();
                true
            }
            Mode::Boundary => {
                let p = self.q.selector.moment_order();
                match boundary_into(self.spec, self.dom, x, &self.xi, p, &mut self.w.geo, &mut self.coeffs) {
                    Ok(a) => {
                        self.min_a = self.min_a.min(a);
                        true
                    }
                    Err(_) => false,
                }
            }
            Mode::Interior => {
                let scheme = self.q.interior.as_ref().expect("validated");
                self.spec.diffusion.sigma(x, &mut self.w.geo.sigma);
                let c = &mut self.coeffs;
                c.r = interior_maps(
                    self.spec,
                    scheme,
                    x,
                    &self.xi,
                    &self.w.geo.sigma,
                    &mut self.w.rho,
                    &mut c.pi,
                    &mut c.p,
                );
                match &self.eta {
                    Some(eta) => {
                        c.r_tilde = interior_maps(
                            self.spec,
                            scheme,
                            x,
                            eta,
                            &self.w.geo.sigma,
                            &mut self.w.rho,
                            &mut c.pi_tilde,
                            &mut c.p_tilde,
                        );
                    }
                    None => {
                        c.r_tilde = 0.0;
                        c.pi_tilde.iter_mut().for_each(|v| *v = 0.0);
                        c.p_tilde.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                true
            }
        };
        if !ok || !self.coeffs.is_finite() {
            self.stopped = Some(StopReason::Singular);
            self.coeffs.clear();
        }
    }

    /// Advances one step; returns the stop reason once the trajectory has stopped.
    pub fn step(&mut self) -> Option<StopReason> {
        if self.stopped.is_some() {
            return self.stopped;
        }
        let Dims { d, d1, .. } = self.spec.dims;
        let h = self.h;
        let w = &mut self.w;
        let c = &self.coeffs;
        let x = self.base.state();
        let sigma = &mut w.geo.sigma;
        self.spec.diffusion.sigma(x, sigma);
        self.spec.diffusion.drift(x, &mut w.drift);
        self.spec.diffusion.sigma_dir(x, &self.xi, &mut w.sig_xi);
        self.spec.diffusion.drift_dir(x, &self.xi, &mut w.b_xi);
        // σP
        linalg::matmul(sigma, d, d1, &c.p, d1, &mut w.mat);
        // G = σ_(ξ) + rσ + σP, H = b_(ξ) + 2rb − σπ
        for i in 0..d * d1 {
            w.g1[i] = w.sig_xi[i] + c.r * sigma[i] + w.mat[i];
        }
        linalg::matvec(sigma, d, d1, &c.pi, &mut w.v);
        for i in 0..d {
            w.h1[i] = w.b_xi[i] + 2.0 * c.r * w.drift[i] - w.v[i];
        }
        if let Some(eta) = &self.eta {
            self.spec.diffusion.sigma_dir(x, eta, &mut w.sig_eta);
            self.spec.diffusion.drift_dir(x, eta, &mut w.b_eta);
            self.spec.diffusion.sigma_dir2(x, &self.xi, &self.xi, &mut w.sig_xixi);
            self.spec.diffusion.drift_dir2(x, &self.xi, &self.xi, &mut w.b_xixi);
            linalg::matmul(&c.p, d1, d1, &c.p, d1, &mut w.pp);
            // G₂ = σ_(η) + r̃σ + σP̃ + σ_(ξ)(ξ) + 2rσ_(ξ) − r²σ + 2σ_(ξ)P + 2rσP + σP²
            linalg::matmul(sigma, d, d1, &c.p_tilde, d1, &mut w.mat2);
            for i in 0..d * d1 {
                w.g2[i] = w.sig_eta[i]
                    + (c.r_tilde - c.r * c.r) * sigma[i]
                    + w.mat2[i]
                    + w.sig_xixi[i]
                    + 2.0 * c.r * w.sig_xi[i]
                    + 2.0 * c.r * w.mat[i];
            }
            linalg::matmul(&w.sig_xi, d, d1, &c.p, d1, &mut w.mat2);
            for i in 0..d * d1 {
                w.g2[i] += 2.0 * w.mat2[i];
            }
            linalg::matmul(sigma, d, d1, &w.pp, d1, &mut w.mat2);
            for i in 0..d * d1 {
                w.g2[i] += w.mat2[i];
            }
            // H₂ = b_(η) + 2r̃b − σπ̃ + b_(ξ)(ξ) + 4rb_(ξ) − 2σ_(ξ)π − 2rσπ − 2σPπ
            for i in 0..d {
                w.h2[i] = w.b_eta[i] + 2.0 * c.r_tilde * w.drift[i] + w.b_xixi[i] + 4.0 * c.r * w.b_xi[i]
                    - 2.0 * c.r * w.v[i];
            }
            linalg::matvec_acc(sigma, d, d1, &c.pi_tilde, -1.0, &mut w.h2);
            linalg::matvec_acc(&w.sig_xi, d, d1, &c.pi, -2.0, &mut w.h2);
            linalg::matvec_acc(&w.mat, d, d1, &c.pi, -2.0, &mut w.h2);
        }

        self.base.advance();
        let dw = self.base.last_increment();
        for i in 0..d {
            let row = &w.g1[i * d1..(i + 1) * d1];
            self.xi[i] += linalg::dot(row, dw) + w.h1[i] * h;
        }
        self.xi0 += linalg::dot(&c.pi, dw);
        self.qv += linalg::dot(&c.pi, &c.pi) * h;
        self.pt += linalg::dot(&c.pi_tilde, dw);
        if let Some(eta) = self.eta.as_mut() {
            for i in 0..d {
                let row = &w.g2[i * d1..(i + 1) * d1];
                eta[i] += linalg::dot(row, dw) + w.h2[i] * h;
            }
        }
        if !self.base.state().iter().chain(&self.xi).all(|v| v.is_finite())
            || self.eta.as_ref().is_some_and(|e| !e.iter().all(|v| v.is_finite()))
        {
            self.stopped = Some(StopReason::Singular);
            self.coeffs.clear();
            return self.stopped;
        }
        self.prepare();
        self.stopped
    }
}

/// Quasi-derivatives along one path, up to and including the stop index `n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuasiPath {
    /// `(n + 1) × d`
    pub xi: Vec<f64>,
    pub eta: Option<Vec<f64>>,
    /// `ξ⁰_0, …, ξ⁰_n`
    pub xi0_adj: Vec<f64>,
    pub eta0_adj: Option<Vec<f64>>,
    /// Coefficients used on steps `0, …, n − 1`.
    pub coeffs: Vec<QuasiCoeffs>,
    pub modes: Vec<Mode>,
    pub stop_index: usize,
    pub stop: StopReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuasiTrajectory {
    pub selector: SchemeSelector,
    pub xi_init: Vec<f64>,
    pub eta_init: Option<Vec<f64>>,
    pub clip: Option<f64>,
    pub horizon: Option<f64>,
    pub paths: Vec<QuasiPath>,
    /// Smallest `A(x)` met by the near-boundary scheme, if it was used.
    pub min_normal_diffusion: Option<f64>,
}

impl QuasiTrajectory {
    pub fn flagged(&self, reason: StopReason) -> usize {
        self.paths.iter().filter(|p| p.stop == reason).count()
    }
}

fn record_path(
    spec: &ProblemSpec,
    dom: &DomainSpec,
    q: &QuasiSpec,
    ens: &PathEnsemble,
    path: usize,
) -> Result<(QuasiPath, f64)> {
    let mut w = QuasiWalker::new(spec, dom, q, ens, path)?;
    let second = q.eta0.is_some();
    let mut xi = w.xi().to_vec();
    let mut eta = second.then(|| w.eta().unwrap().to_vec());
    let mut xi0_adj = vec![0.0];
    let mut eta0_adj = second.then(|| vec![0.0]);
    let mut coeffs = Vec::new();
    let mut modes = Vec::new();
    let stop = loop {
        if let Some(r) = w.stopped() {
            break r;
        }
        coeffs.push(w.coeffs().clone());
        modes.push(w.mode());
        w.step();
        xi.extend_from_slice(w.xi());
        xi0_adj.push(w.xi0());
        if let (Some(e), Some(e0)) = (eta.as_mut(), eta0_adj.as_mut()) {
            e.extend_from_slice(w.eta().unwrap());
            e0.push(w.eta0());
        }
    };
    let qp = QuasiPath { xi, eta, xi0_adj, eta0_adj, stop_index: coeffs.len(), coeffs, modes, stop };
    Ok((qp, w.min_normal_diffusion()))
}

fn evolve(ens: &PathEnsemble, spec: &ProblemSpec, dom: &DomainSpec, q: &QuasiSpec) -> Result<QuasiTrajectory> {
    let recs: Vec<Result<(QuasiPath, f64)>> =
        (0..ens.n_paths).into_par_iter().map(|p| record_path(spec, dom, q, ens, p)).collect();
    let mut paths = Vec::with_capacity(ens.n_paths);
    let mut min_a = f64::INFINITY;
    for r in recs {
        let (p, a) = r?;
        min_a = min_a.min(a);
        paths.push(p);
    }
    Ok(QuasiTrajectory {
        selector: q.selector,
        xi_init: q.xi0.clone(),
        eta_init: q.eta0.clone(),
        clip: q.clip,
        horizon: q.horizon,
        paths,
        min_normal_diffusion: min_a.is_finite().then_some(min_a),
    })
}

/// First quasi-derivative along every path of the ensemble, with coefficient traces.
pub fn evolve_first(
    ens: &PathEnsemble,
    spec: &ProblemSpec,
    dom: &DomainSpec,
    q: &QuasiSpec,
) -> Result<QuasiTrajectory> {
    let q = QuasiSpec { eta0: None, ..q.clone() };
    evolve(ens, spec, dom, &q)
}

/// Adds `η` and `η⁰` to a first-order trajectory. The `ξ` recursion does not depend on `η`,
/// so the stored `ξ` is reproduced exactly.
pub fn evolve_second(
    ens: &PathEnsemble,
    spec: &ProblemSpec,
    dom: &DomainSpec,
    traj: &QuasiTrajectory,
    eta0: &[f64],
    interior: Option<&InteriorScheme>,
) -> Result<QuasiTrajectory> {
    let q = QuasiSpec {
        selector: traj.selector,
        interior: interior.cloned(),
        xi0: traj.xi_init.clone(),
        eta0: Some(eta0.to_vec()),
        clip: traj.clip,
        horizon: traj.horizon,
    };
    let out = evolve(ens, spec, dom, &q)?;
    for (a, b) in out.paths.iter().zip(&traj.paths) {
        if a.xi != b.xi {
            return Err(QuasiError::InvalidArgument("trajectory does not belong to this ensemble and scheme".into()));
        }
    }
    Ok(out)
}

/// A named scalar test function `v` with derivatives.
pub struct TestFunction<'a> {
    pub name: String,
    pub v: &'a dyn SmoothField,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleRow {
    pub function: String,
    pub order: u8,
    pub checkpoint: f64,
    /// Mean increment of the process since the previous checkpoint (or time 0).
    pub mean: f64,
    pub stderr: f64,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub rows: Vec<MartingaleRow>,
    pub z_crit: f64,
    /// Two-sided family-wise level of the `|z| ≤ z_crit` rule across all rows.
    pub family_level: f64,
    pub pass: bool,
    pub n_paths: usize,
    pub flagged: usize,
}

/// Tolerance for `|Lv|` in the harmonicity check, relative to `1 + |∇v| + |∇²v|`.
pub const HARMONIC_TOL: f64 = 1e-8;

/// z-scores of the increments of `v_(ξ)(X) + ξ⁰v(X)` (and, when `η` is evolved,
/// `v_(ξ)(ξ)(X) + v_(η)(X) + 2ξ⁰v_(ξ)(X) + η⁰v(X)`) between consecutive checkpoints, with
/// the processes frozen after the stop.
pub fn martingale_statistic(
    panel: &[TestFunction<'_>],
    ens: &PathEnsemble,
    spec: &ProblemSpec,
    dom: &DomainSpec,
    q: &QuasiSpec,
    checkpoints: &[f64],
    z_crit: f64,
) -> Result<MartingaleReport> {
    let Dims { d, .. } = spec.dims;
    if checkpoints.is_empty() || checkpoints.windows(2).any(|w| !(w[0] < w[1])) || !(checkpoints[0] > 0.0) {
        return Err(QuasiError::InvalidArgument("checkpoints must be positive and increasing".into()));
    }
    // refuse test functions outside M
    let probe = dom.grid(9, false);
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    for t in panel {
        for x in &probe {
            t.v.jacobian(x, &mut grad);
            t.v.hessian(x, &mut hess);
            let lv = spec.generator(x, &grad, &hess);
            let scale = 1.0 + linalg::norm(&grad) + linalg::norm(&hess);
            if !(lv.abs() <= HARMONIC_TOL * scale) {
                return Err(QuasiError::NotHarmonic { residual: lv.abs(), x: x.clone() });
            }
        }
    }
    let idx: Vec<u64> = checkpoints.iter().map(|t| (t / ens.h).round() as u64).collect();
    let second = q.eta0.is_some();
    let orders = if second { 2 } else { 1 };
    let nf = panel.len();
    let width = nf * orders;
    // per path: process values at time 0 and at each checkpoint
    let eval = |w: &QuasiWalker<'_>, out: &mut [f64]| {
        let x = w.state();
        let mut g = vec![0.0; d];
        let mut hm = vec![0.0; d * d];
        let mut val = [0.0];
        let mut hv = vec![0.0; d];
        for (j, t) in panel.iter().enumerate() {
            t.v.value(x, &mut val);
            t.v.jacobian(x, &mut g);
            let v_xi = linalg::dot(&g, w.xi());
            out[j * orders] = v_xi + w.xi0() * val[0];
            if let Some(eta) = w.eta() {
                t.v.hessian(x, &mut hm);
                linalg::matvec(&hm, d, d, w.xi(), &mut hv);
                let v_xixi = linalg::dot(&hv, w.xi());
                out[j * orders + 1] = v_xixi + linalg::dot(&g, eta) + 2.0 * w.xi0() * v_xi + w.eta0() * val[0];
            }
        }
    };
    let per_path: Vec<Result<(Vec<f64>, bool)>> = (0..ens.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut w = QuasiWalker::new(spec, dom, q, ens, p)?;
            let mut vals = vec![0.0; width * (idx.len() + 1)];
            eval(&w, &mut vals[..width]);
            for (c, &target) in idx.iter().enumerate() {
                while w.stopped().is_none() && w.step_index() < target {
                    w.step();
                }
                let (_, rest) = vals.split_at_mut(width * (c + 1));
                eval(&w, &mut rest[..width]);
            }
            let flagged = matches!(w.stopped(), Some(StopReason::Singular));
            Ok((vals, flagged))
        })
        .collect();
    let mut all = Vec::with_capacity(ens.n_paths);
    let mut flagged = 0;
    for r in per_path {
        let (v, f) = r?;
        flagged += f as usize;
        all.push(v);
    }
    let mut rows = Vec::new();
    for (j, t) in panel.iter().enumerate() {
        for o in 0..orders {
            for (c, &cp) in checkpoints.iter().enumerate() {
                let col = j * orders + o;
                let inc: Vec<f64> = all.iter().map(|v| v[(c + 1) * width + col] - v[c * width + col]).collect();
                let s = Summary::of(&inc);
                let z = if s.stderr > 0.0 {
                    s.mean / s.stderr
                } else if s.mean == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                };
                rows.push(MartingaleRow {
                    function: t.name.clone(),
                    order: o as u8 + 1,
                    checkpoint: cp,
                    mean: s.mean,
                    stderr: s.stderr,
                    z,
                });
            }
        }
    }
    let pass = rows.iter().all(|r| r.z.abs() <= z_crit);
    Ok(MartingaleReport {
        family_level: bonferroni_family_level(z_crit, rows.len(), true),
        z_crit,
        pass,
        n_paths: ens.n_paths,
        flagged,
        rows,
    })
}
