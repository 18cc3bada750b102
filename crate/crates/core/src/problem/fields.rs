//! Concrete coefficient, driver and field types used by the built-in problems.

use std::sync::Arc;

use super::{Diffusion, Driver, LevelSet, SmoothField};

/// Constant `σ` (`d × d₁`) and `b`.
#[derive(Clone, Debug)]
pub struct ConstantDiffusion {
    pub sigma: Vec<f64>,
    pub drift: Vec<f64>,
}

impl Diffusion for ConstantDiffusion {
    fn sigma(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.sigma);
    }
    fn sigma_dir(&self, _x: &[f64], _y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn sigma_dir2(&self, _x: &[f64], _y: &[f64], _z: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn drift(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.drift);
    }
    fn drift_dir(&self, _x: &[f64], _y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn drift_dir2(&self, _x: &[f64], _y: &[f64], _z: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

/// One-dimensional polynomial coefficients, `σ(x) = Σ s_j x^j`, `b(x) = Σ b_j x^j`.
#[derive(Clone, Debug)]
pub struct ScalarPolyDiffusion {
    pub sigma: Vec<f64>,
    pub drift: Vec<f64>,
}

/// Value, first and second derivative of `Σ c_j x^j`.
fn poly(c: &[f64], x: f64) -> (f64, f64, f64) {
    let (mut v, mut d1, mut d2) = (0.0, 0.0, 0.0);
    for cj in c.iter().rev() {
        d2 = d2 * x + 2.0 * d1;
        d1 = d1 * x + v;
        v = v * x + cj;
    }
    (v, d1, d2)
}

impl Diffusion for ScalarPolyDiffusion {
    fn sigma(&self, x: &[f64], out: &mut [f64]) {
        out[0] = poly(&self.sigma, x[0]).0;
    }
    fn sigma_dir(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        out[0] = poly(&self.sigma, x[0]).1 * y[0];
    }
    fn sigma_dir2(&self, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        out[0] = poly(&self.sigma, x[0]).2 * y[0] * z[0];
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = poly(&self.drift, x[0]).0;
    }
    fn drift_dir(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        out[0] = poly(&self.drift, x[0]).1 * y[0];
    }
    fn drift_dir2(&self, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        out[0] = poly(&self.drift, x[0]).2 * y[0] * z[0];
    }
}

/// `f ≡ 0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroDriver;

impl Driver for ZeroDriver {
    fn is_zero(&self) -> bool {
        true
    }
    fn value(&self, _x: &[f64], _y: &[f64], _z: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn fx(&self, _x: &[f64], _y: &[f64], _z: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn fy(&self, _x: &[f64], _y: &[f64], _z: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn fz(&self, _x: &[f64], _y: &[f64], _z: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

/// `f(x, y, z) = −c y + s(x)`, with `s` optional.
#[derive(Clone)]
pub struct LinearDriver {
    pub c: f64,
    pub source: Option<Arc<dyn SmoothField>>,
}

impl Driver for LinearDriver {
    fn value(&self, x: &[f64], y: &[f64], _z: &[f64], out: &mut [f64]) {
        match &self.source {
            Some(s) => s.value(x, out),
            None => out.iter_mut().for_each(|o| *o = 0.0),
        }
        for (o, yi) in out.iter_mut().zip(y) {
            *o -= self.c * yi;
        }
    }
    fn fx(&self, x: &[f64], _y: &[f64], _z: &[f64], out: &mut [f64]) {
        match &self.source {
            Some(s) => s.jacobian(x, out),
            None => out.iter_mut().for_each(|o| *o = 0.0),
        }
    }
    fn fy(&self, _x: &[f64], y: &[f64], _z: &[f64], out: &mut [f64]) {
        let k = y.len();
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..k {
            out[i * k + i] = -self.c;
        }
    }
    fn fz(&self, _x: &[f64], _y: &[f64], _z: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

/// Scalar quadratic `v(x) = c₀ + ⟨l, x⟩ + ½ xᵀ H x` with symmetric `H`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    pub c0: f64,
    pub lin: Vec<f64>,
    pub hess: Vec<f64>,
}

impl Quadratic {
    pub fn constant(d: usize, c0: f64) -> Self {
        Quadratic { c0, lin: vec![0.0; d], hess: vec![0.0; d * d] }
    }

    pub fn linear(c0: f64, lin: Vec<f64>) -> Self {
        let d = lin.len();
        Quadratic { c0, lin, hess: vec![0.0; d * d] }
    }
}

impl SmoothField for Quadratic {
    fn value(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        let mut v = self.c0;
        for i in 0..d {
            v += self.lin[i] * x[i];
            for j in 0..d {
                v += 0.5 * x[i] * self.hess[i * d + j] * x[j];
            }
        }
        out[0] = v;
    }
    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        for i in 0..d {
            out[i] = self.lin[i] + (0..d).map(|j| self.hess[i * d + j] * x[j]).sum::<f64>();
        }
    }
    fn hessian(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.hess);
    }
}

/// Constant map into `R^k`.
#[derive(Clone, Debug)]
pub struct ConstantField {
    pub value: Vec<f64>,
}

impl SmoothField for ConstantField {
    fn value(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.value);
    }
    fn jacobian(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn hessian(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

/// `Σ c_j x^{p_j}` on `x > 0`.
#[derive(Clone, Debug)]
pub struct PowerSum1d {
    pub terms: Vec<(f64, f64)>,
}

impl PowerSum1d {
    pub fn derivatives(&self, x: f64) -> (f64, f64, f64) {
        let mut out = (0.0, 0.0, 0.0);
        for &(c, p) in &self.terms {
            out.0 += c * x.powf(p);
            out.1 += c * p * x.powf(p - 1.0);
            out.2 += c * p * (p - 1.0) * x.powf(p - 2.0);
        }
        out
    }
}

impl SmoothField for PowerSum1d {
    fn value(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.derivatives(x[0]).0;
    }
    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.derivatives(x[0]).1;
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.derivatives(x[0]).2;
    }
}

/// `ψ(x) = (r² − |x − c|²)/2`, the ball of radius `r`.
#[derive(Clone, Debug)]
pub struct QuadraticBall {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl LevelSet for QuadraticBall {
    fn value(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().zip(&self.center).map(|(a, c)| (a - c) * (a - c)).sum();
        0.5 * (self.radius * self.radius - r2)
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for ((o, a), c) in out.iter_mut().zip(x).zip(&self.center) {
            *o = c - a;
        }
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..d {
            out[i * d + i] = -1.0;
        }
    }
}

/// `ψ(x) = κ(x_j − a)(b − x_j)`: the slab `a < x_j < b` along one axis, an interval when `d = 1`.
#[derive(Clone, Debug)]
pub struct IntervalLevelSet {
    pub axis: usize,
    pub a: f64,
    pub b: f64,
    pub kappa: f64,
}

impl LevelSet for IntervalLevelSet {
    fn value(&self, x: &[f64]) -> f64 {
        let t = x[self.axis];
        self.kappa * (t - self.a) * (self.b - t)
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        out[self.axis] = self.kappa * (self.a + self.b - 2.0 * x[self.axis]);
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        out.iter_mut().for_each(|o| *o = 0.0);
        out[self.axis * d + self.axis] = -2.0 * self.kappa;
    }
}

/// Constant level set, `ψ ≡ c` (exercises the failing branch of the domain checks).
#[derive(Clone, Copy, Debug)]
pub struct ConstantLevelSet(pub f64);

impl LevelSet for ConstantLevelSet {
    fn value(&self, _x: &[f64]) -> f64 {
        self.0
    }
    fn gradient(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn hessian(&self, _x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

/// `h = sin x₁ sinh x₂` with first and second derivatives, `T = (1 + |x|²)/2`.
fn tp3_parts(x: &[f64]) -> ([f64; 3], f64, f64, f64, f64) {
    let (s1, c1) = x[0].sin_cos();
    let (sh, ch) = (x[1].sinh(), x[1].cosh());
    ([s1 * sh, c1 * sh, s1 * ch], s1, c1, sh, ch)
}

/// Manufactured solution `u*(x) = sin x₁ sinh x₂ · (1 + |x|²)/2` on the plane.
#[derive(Clone, Copy, Debug, Default)]
pub struct Tp3Solution;

impl SmoothField for Tp3Solution {
    fn value(&self, x: &[f64], out: &mut [f64]) {
        let t = 0.5 * (1.0 + x[0] * x[0] + x[1] * x[1]);
        out[0] = x[0].sin() * x[1].sinh() * t;
    }
    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        let ([h, h1, h2], ..) = tp3_parts(x);
        let t = 0.5 * (1.0 + x[0] * x[0] + x[1] * x[1]);
        out[0] = t * h1 + h * x[0];
        out[1] = t * h2 + h * x[1];
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let ([h, h1, h2], s1, c1, sh, ch) = tp3_parts(x);
        let t = 0.5 * (1.0 + x[0] * x[0] + x[1] * x[1]);
        let h11 = -s1 * sh;
        let h22 = s1 * sh;
        let h12 = c1 * ch;
        out[0] = t * h11 + 2.0 * h1 * x[0] + h;
        out[1] = t * h12 + h1 * x[1] + h2 * x[0];
        out[2] = out[1];
        out[3] = t * h22 + 2.0 * h2 * x[1] + h;
    }
}

/// `Δu*` for [`Tp3Solution`], `2(x₁ cos x₁ sinh x₂ + x₂ sin x₁ cosh x₂ + sin x₁ sinh x₂)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Tp3Laplacian;

impl SmoothField for Tp3Laplacian {
    fn value(&self, x: &[f64], out: &mut [f64]) {
        let (_, s1, c1, sh, ch) = tp3_parts(x);
        out[0] = 2.0 * (x[0] * c1 * sh + x[1] * s1 * ch + s1 * sh);
    }
    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        let (_, s1, c1, sh, ch) = tp3_parts(x);
        out[0] = 2.0 * (2.0 * c1 * sh - x[0] * s1 * sh + x[1] * c1 * ch);
        out[1] = 2.0 * (x[0] * c1 * ch + 2.0 * s1 * ch + x[1] * s1 * sh);
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let (_, s1, c1, sh, ch) = tp3_parts(x);
        out[0] = 2.0 * (-3.0 * s1 * sh - x[0] * c1 * sh - x[1] * s1 * ch);
        out[1] = 2.0 * (3.0 * c1 * ch - x[0] * s1 * ch + x[1] * c1 * sh);
        out[2] = out[1];
        out[3] = 2.0 * (x[0] * c1 * sh + 3.0 * s1 * sh + x[1] * s1 * ch);
    }
}

/// Source `s = μu* − Lu*` for the TP3 drivers; with `L = Δ` on the disk built-ins.
/// `μ = 0` gives the source of the purely x-dependent driver `f = −Lu*`.
#[derive(Clone, Copy, Debug)]
pub struct Tp3Source {
    pub mu: f64,
}

impl SmoothField for Tp3Source {
    fn value(&self, x: &[f64], out: &mut [f64]) {
        let (mut u, mut f) = ([0.0], [0.0]);
        Tp3Solution.value(x, &mut u);
        Tp3Laplacian.value(x, &mut f);
        out[0] = self.mu * u[0] - f[0];
    }
    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        let (mut u, mut f) = ([0.0; 2], [0.0; 2]);
        Tp3Solution.jacobian(x, &mut u);
        Tp3Laplacian.jacobian(x, &mut f);
        for i in 0..2 {
            out[i] = self.mu * u[i] - f[i];
        }
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let (mut u, mut f) = ([0.0; 4], [0.0; 4]);
        Tp3Solution.hessian(x, &mut u);
        Tp3Laplacian.hessian(x, &mut f);
        for i in 0..4 {
            out[i] = self.mu * u[i] - f[i];
        }
    }
}
