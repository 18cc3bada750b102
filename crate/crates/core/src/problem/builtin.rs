//! Built-in test problems, constructible by name.
//!
//! - `tp1`: unit disk, `σ = √2 I`, `b = 0`, `g = x₁² − x₂²`, `f = 0`; `u = g`.
//! - `tp2`: `D = (1, 2)`, `σ = x`, `b = x/2`, `f = −y`, `g(x) = x`; Euler-equation solution.
//! - `tp3`: TP1 geometry with manufactured `u* = sin x₁ sinh x₂ (1 + |x|²)/2`, `f = −Lu*`.
//! - `tp3-semilinear`: same `u*` with the monotone driver `f = −y + (u* − Lu*)`.

use std::sync::Arc;

use super::fields::*;
use super::{Constants, Dims, DomainSpec, InteriorScheme, ProblemSpec};

/// A problem together with its domain and a default interior scheme.
#[derive(Clone, Debug)]
pub struct Builtin {
    pub spec: ProblemSpec,
    pub domain: DomainSpec,
    pub interior: InteriorScheme,
}

pub fn builtin_names() -> &'static [&'static str] {
    &["tp1", "tp2", "tp3", "tp3-semilinear"]
}

pub fn builtin(name: &str) -> Option<Builtin> {
    match name {
        "tp1" => Some(tp1()),
        "tp2" => Some(tp2(0.5, 1.0)),
        "tp3" => Some(tp3(None)),
        "tp3-semilinear" => Some(tp3(Some(1.0))),
        _ => None,
    }
}

fn disk_constants() -> Constants {
    Constants::new(1.0, 1.5, 0.3, -0.3, 10.0)
}

fn disk_domain() -> DomainSpec {
    DomainSpec::new(
        Arc::new(QuadraticBall { center: vec![0.0, 0.0], radius: 1.0 }),
        0.45,
        0.05,
        vec![(-1.0, 1.0), (-1.0, 1.0)],
        0.5,
    )
    .expect("valid disk domain")
}

fn disk_diffusion() -> ConstantDiffusion {
    let s = std::f64::consts::SQRT_2;
    ConstantDiffusion { sigma: vec![s, 0.0, 0.0, s], drift: vec![0.0, 0.0] }
}

/// Interior scheme used on the disk: `ρ = (0.1, 0.05)`, `M = 1`, `Q(y) = 0.1(y₁ + y₂)J`.
pub(crate) fn disk_scheme() -> InteriorScheme {
    let j = vec![0.0, 0.1, -0.1, 0.0];
    InteriorScheme::constant(vec![0.1, 0.05], 1.0, vec![j.clone(), j], 2)
}

fn tp1() -> Builtin {
    let g: Arc<dyn super::SmoothField> =
        Arc::new(Quadratic { c0: 0.0, lin: vec![0.0, 0.0], hess: vec![2.0, 0.0, 0.0, -2.0] });
    Builtin {
        spec: ProblemSpec {
            name: "tp1".into(),
            dims: Dims { d: 2, d1: 2, k: 1 },
            diffusion: Arc::new(disk_diffusion()),
            driver: Arc::new(ZeroDriver),
            g: g.clone(),
            constants: disk_constants(),
            exact: Some(g),
        },
        domain: disk_domain(),
        interior: disk_scheme(),
    }
}

/// Exponents `α` of `x^α` solving `½α(α−1) + b₁α − c = 0`.
pub fn euler_exponents(b1: f64, c: f64) -> (f64, f64) {
    let m = b1 - 0.5;
    let disc = (m * m + 2.0 * c).sqrt();
    (-m + disc, -m - disc)
}

/// Solution of `½x²u'' + b₁xu' − cu = 0` on `(1, 2)` with `u(1) = 1`, `u(2) = 2`.
pub fn tp2_solution(b1: f64, c: f64) -> PowerSum1d {
    let (a1, a2) = euler_exponents(b1, c);
    // A + B = 1, A 2^a1 + B 2^a2 = 2
    let (p, q) = (2f64.powf(a1), 2f64.powf(a2));
    let a = (2.0 - q) / (p - q);
    PowerSum1d { terms: vec![(a, a1), (1.0 - a, a2)] }
}

fn tp2(b1: f64, c: f64) -> Builtin {
    let kappa = 2.5;
    let domain = DomainSpec::new(
        Arc::new(IntervalLevelSet { axis: 0, a: 1.0, b: 2.0, kappa }),
        0.3,
        0.02,
        vec![(1.0, 2.0)],
        kappa / 4.0,
    )
    .expect("valid interval domain");
    Builtin {
        spec: ProblemSpec {
            name: "tp2".into(),
            dims: Dims { d: 1, d1: 1, k: 1 },
            diffusion: Arc::new(ScalarPolyDiffusion { sigma: vec![0.0, 1.0], drift: vec![0.0, b1] }),
            driver: Arc::new(LinearDriver { c, source: None }),
            g: Arc::new(Quadratic::linear(0.0, vec![1.0])),
            constants: Constants::new(1.0, 1.5, 0.3, -0.3, 15.0),
            exact: Some(Arc::new(tp2_solution(b1, c))),
        },
        domain,
        interior: InteriorScheme::zero(1, 16.0),
    }
}

fn tp3(semilinear_mu: Option<f64>) -> Builtin {
    let (name, driver) = match semilinear_mu {
        None => ("tp3", LinearDriver { c: 0.0, source: Some(Arc::new(Tp3Source { mu: 0.0 })) }),
        Some(mu) => ("tp3-semilinear", LinearDriver { c: mu, source: Some(Arc::new(Tp3Source { mu })) }),
    };
    Builtin {
        spec: ProblemSpec {
            name: name.into(),
            dims: Dims { d: 2, d1: 2, k: 1 },
            diffusion: Arc::new(disk_diffusion()),
            driver: Arc::new(driver),
            g: Arc::new(Tp3Solution),
            constants: disk_constants(),
            exact: Some(Arc::new(Tp3Solution)),
        },
        domain: disk_domain(),
        interior: disk_scheme(),
    }
}
