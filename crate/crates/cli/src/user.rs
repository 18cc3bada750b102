//! Problems given as expressions in a TOML file.
//!
//! Variables are `x1, …, xd`; driver expressions also see `y` and `z1, …, z_{d1}`. Every
//! coefficient comes with its first and second partial derivatives, which are checked
//! against central differences before use. Only scalar problems (`k = 1`) are supported.

use std::sync::Arc;

use bsdeflow_core::problem::{
    Constants, Diffusion, Dims, DomainSpec, Driver, InteriorScheme, LevelSet, ProblemSpec, SmoothField,
};
use evalexpr::{
    build_operator_tree, error::EvalexprResultValue, Context, DefaultNumericTypes, EvalexprError, EvalexprResult, Node,
    Value,
};
use serde::{Deserialize, Serialize};

use crate::config::ConfigError;

/// Evaluation context over a fixed set of named scalars.
struct Vars<'a> {
    names: &'a [String],
    values: Vec<Value<DefaultNumericTypes>>,
}

impl Context for Vars<'_> {
    type NumericTypes = DefaultNumericTypes;

    fn get_value(&self, identifier: &str) -> Option<&Value<DefaultNumericTypes>> {
        self.names.iter().position(|n| n == identifier).map(|i| &self.values[i])
    }

    fn call_function(
        &self,
        identifier: &str,
        _argument: &Value<DefaultNumericTypes>,
    ) -> EvalexprResultValue<DefaultNumericTypes> {
        Err(EvalexprError::FunctionIdentifierNotFound(identifier.to_string()))
    }

    fn are_builtin_functions_disabled(&self) -> bool {
        false
    }

    fn set_builtin_functions_disabled(&mut self, _disabled: bool) -> EvalexprResult<(), DefaultNumericTypes> {
        Ok(())
    }
}

/// A compiled scalar expression.
#[derive(Clone)]
struct Expr {
    source: String,
    node: Arc<Node<DefaultNumericTypes>>,
}

impl Expr {
    fn parse(field: &str, source: &str, names: &[String]) -> Result<Self, ConfigError> {
        let node = build_operator_tree::<DefaultNumericTypes>(source)
            .map_err(|e| ConfigError::field(field, format!("cannot parse `{source}`: {e}")))?;
        let e = Expr { source: source.to_string(), node: Arc::new(node) };
        // probe once so unknown identifiers fail at load time
        let probe = vec![0.5; names.len()];
        e.eval_checked(names, &probe).map_err(|msg| ConfigError::field(field, msg))?;
        Ok(e)
    }

    fn eval_checked(&self, names: &[String], vals: &[f64]) -> Result<f64, String> {
        let ctx = Vars { names, values: vals.iter().map(|v| Value::Float(*v)).collect() };
        self.node.eval_number_with_context(&ctx).map_err(|e| format!("cannot evaluate `{}`: {e}", self.source))
    }

    /// Evaluation failures surface as NaN and are caught by the finiteness checks downstream.
    fn eval(&self, names: &[String], vals: &[f64]) -> f64 {
        self.eval_checked(names, vals).unwrap_or(f64::NAN)
    }
}

/// Shape-checked nested lists of expressions.
fn flat(field: &str, items: Vec<String>, want: usize, names: &[String]) -> Result<Vec<Expr>, ConfigError> {
    if items.len() != want {
        return Err(ConfigError::field(field, format!("expected {want} expressions, got {}", items.len())));
    }
    items.iter().enumerate().map(|(i, s)| Expr::parse(&format!("{field}[{i}]"), s, names)).collect()
}

fn flat2(
    field: &str,
    v: Vec<Vec<String>>,
    rows: usize,
    cols: usize,
    names: &[String],
) -> Result<Vec<Expr>, ConfigError> {
    if v.len() != rows || v.iter().any(|r| r.len() != cols) {
        return Err(ConfigError::field(field, format!("expected a {rows} × {cols} array")));
    }
    flat(field, v.into_iter().flatten().collect(), rows * cols, names)
}

fn flat3(
    field: &str,
    v: Vec<Vec<Vec<String>>>,
    a: usize,
    b: usize,
    c: usize,
    names: &[String],
) -> Result<Vec<Expr>, ConfigError> {
    if v.len() != a {
        return Err(ConfigError::field(field, format!("expected {a} blocks of {b} × {c}")));
    }
    let mut out = Vec::with_capacity(a * b * c);
    for (l, block) in v.into_iter().enumerate() {
        out.extend(flat2(&format!("{field}[{l}]"), block, b, c, names)?);
    }
    Ok(out)
}

fn flat4(
    field: &str,
    v: Vec<Vec<Vec<Vec<String>>>>,
    a: usize,
    b: usize,
    c: usize,
    e: usize,
    names: &[String],
) -> Result<Vec<Expr>, ConfigError> {
    if v.len() != a {
        return Err(ConfigError::field(field, format!("expected {a} blocks of {b} × {c} × {e}")));
    }
    let mut out = Vec::with_capacity(a * b * c * e);
    for (l, block) in v.into_iter().enumerate() {
        out.extend(flat3(&format!("{field}[{l}]"), block, b, c, e, names)?);
    }
    Ok(out)
}

/// File format of a user problem.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserProblem {
    pub name: String,
    pub d: usize,
    pub d1: usize,
    /// `d × d₁`
    pub sigma: Vec<Vec<String>>,
    /// `[l][i][j] = ∂σ_ij/∂x_l`
    pub sigma_dx: Vec<Vec<Vec<String>>>,
    /// `[l][m][i][j] = ∂²σ_ij/∂x_l∂x_m`
    pub sigma_dxx: Vec<Vec<Vec<Vec<String>>>>,
    pub drift: Vec<String>,
    /// `[l][i] = ∂b_i/∂x_l`
    pub drift_dx: Vec<Vec<String>>,
    /// `[l][m][i]`
    pub drift_dxx: Vec<Vec<Vec<String>>>,
    pub g: String,
    pub g_dx: Vec<String>,
    pub g_dxx: Vec<Vec<String>>,
    /// Driver in `x1…xd, y, z1…z_{d1}`; zero when absent.
    pub f: Option<String>,
    pub f_dx: Option<Vec<String>>,
    pub f_dy: Option<String>,
    pub f_dz: Option<Vec<String>>,
    pub psi: String,
    pub psi_dx: Vec<String>,
    pub psi_dxx: Vec<Vec<String>>,
    pub lambda: f64,
    pub delta1: f64,
    pub bbox: Vec<[f64; 2]>,
    pub psi_sup: f64,
    pub exact: Option<String>,
    pub exact_dx: Option<Vec<String>>,
    pub exact_dxx: Option<Vec<Vec<String>>>,
    pub constants: UserConstants,
    pub interior: Option<UserInterior>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserConstants {
    pub mu: f64,
    pub l: f64,
    pub l0: f64,
    pub beta: f64,
    pub k0: f64,
}

/// Constant interior scheme: `ρ`, `M` and `Q(y) = Σ_l y_l Q_l`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserInterior {
    pub rho: Vec<f64>,
    pub m: f64,
    /// `d` matrices of size `d₁ × d₁`, row-major; zero when empty.
    #[serde(default)]
    pub q: Vec<Vec<f64>>,
}

struct ExprDiffusion {
    names: Vec<String>,
    d: usize,
    d1: usize,
    sigma: Vec<Expr>,
    sigma_dx: Vec<Expr>,
    sigma_dxx: Vec<Expr>,
    drift: Vec<Expr>,
    drift_dx: Vec<Expr>,
    drift_dxx: Vec<Expr>,
}

impl Diffusion for ExprDiffusion {
    fn sigma(&self, x: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.sigma) {
            *o = e.eval(&self.names, x);
        }
    }
    fn sigma_dir(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let m = self.d * self.d1;
        out.iter_mut().for_each(|o| *o = 0.0);
        for l in 0..self.d {
            for e in 0..m {
                out[e] += y[l] * self.sigma_dx[l * m + e].eval(&self.names, x);
            }
        }
    }
    fn sigma_dir2(&self, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        let (d, m) = (self.d, self.d * self.d1);
        out.iter_mut().for_each(|o| *o = 0.0);
        for l in 0..d {
            for k in 0..d {
                for e in 0..m {
                    out[e] += y[l] * z[k] * self.sigma_dxx[(l * d + k) * m + e].eval(&self.names, x);
                }
            }
        }
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.drift) {
            *o = e.eval(&self.names, x);
        }
    }
    fn drift_dir(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let d = self.d;
        out.iter_mut().for_each(|o| *o = 0.0);
        for l in 0..d {
            for i in 0..d {
                out[i] += y[l] * self.drift_dx[l * d + i].eval(&self.names, x);
            }
        }
    }
    fn drift_dir2(&self, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        let d = self.d;
        out.iter_mut().for_each(|o| *o = 0.0);
        for l in 0..d {
            for k in 0..d {
                for i in 0..d {
                    out[i] += y[l] * z[k] * self.drift_dxx[(l * d + k) * d + i].eval(&self.names, x);
                }
            }
        }
    }
}

struct ExprField {
    names: Vec<String>,
    value: Expr,
    dx: Vec<Expr>,
    dxx: Vec<Expr>,
}

impl SmoothField for ExprField {
    fn value(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.value.eval(&self.names, x);
    }
    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.dx) {
            *o = e.eval(&self.names, x);
        }
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.dxx) {
            *o = e.eval(&self.names, x);
        }
    }
}

impl LevelSet for ExprField {
    fn value(&self, x: &[f64]) -> f64 {
        self.value.eval(&self.names, x)
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        SmoothField::jacobian(self, x, out)
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        SmoothField::hessian(self, x, out)
    }
}

struct ExprDriver {
    names: Vec<String>,
    value: Expr,
    dx: Vec<Expr>,
    dy: Expr,
    dz: Vec<Expr>,
}

impl ExprDriver {
    fn args(x: &[f64], y: &[f64], z: &[f64]) -> Vec<f64> {
        x.iter().chain(y).chain(z).copied().collect()
    }
}

impl Driver for ExprDriver {
    fn value(&self, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        out[0] = self.value.eval(&self.names, &Self::args(x, y, z));
    }
    fn fx(&self, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        let a = Self::args(x, y, z);
        for (o, e) in out.iter_mut().zip(&self.dx) {
            *o = e.eval(&self.names, &a);
        }
    }
    fn fy(&self, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        out[0] = self.dy.eval(&self.names, &Self::args(x, y, z));
    }
    fn fz(&self, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        let a = Self::args(x, y, z);
        for (o, e) in out.iter_mut().zip(&self.dz) {
            *o = e.eval(&self.names, &a);
        }
    }
}

/// Compiled user problem.
pub struct Compiled {
    pub spec: ProblemSpec,
    pub domain: DomainSpec,
    pub interior: Option<InteriorScheme>,
}

impl UserProblem {
    pub fn compile(self) -> Result<Compiled, ConfigError> {
        let UserProblem { d, d1, .. } = self;
        if d == 0 || d1 == 0 {
            return Err(ConfigError::field("problem.d", "dimensions must be positive"));
        }
        let xs: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        let mut fargs = xs.clone();
        fargs.push("y".into());
        fargs.extend((1..=d1).map(|j| format!("z{j}")));
        let field = |v: String, dx: Vec<String>, dxx: Vec<Vec<String>>, name: &str| -> Result<ExprField, ConfigError> {
            Ok(ExprField {
                names: xs.clone(),
                value: Expr::parse(name, &v, &xs)?,
                dx: flat(&format!("{name}_dx"), dx, d, &xs)?,
                dxx: flat2(&format!("{name}_dxx"), dxx, d, d, &xs)?,
            })
        };
        let diffusion = ExprDiffusion {
            names: xs.clone(),
            d,
            d1,
            sigma: flat2("sigma", self.sigma, d, d1, &xs)?,
            sigma_dx: flat3("sigma_dx", self.sigma_dx, d, d, d1, &xs)?,
            sigma_dxx: flat4("sigma_dxx", self.sigma_dxx, d, d, d, d1, &xs)?,
            drift: flat("drift", self.drift, d, &xs)?,
            drift_dx: flat2("drift_dx", self.drift_dx, d, d, &xs)?,
            drift_dxx: flat3("drift_dxx", self.drift_dxx, d, d, d, &xs)?,
        };
        let g = field(self.g, self.g_dx, self.g_dxx, "g")?;
        let psi = field(self.psi, self.psi_dx, self.psi_dxx, "psi")?;
        let driver: Arc<dyn Driver> = match self.f {
            None => Arc::new(bsdeflow_core::problem::ZeroDriver),
            Some(f) => {
                fn need<T>(o: Option<T>, n: &str) -> Result<T, ConfigError> {
                    o.ok_or_else(|| ConfigError::field(n, "required when f is given"))
                }
                Arc::new(ExprDriver {
                    value: Expr::parse("f", &f, &fargs)?,
                    dx: flat("f_dx", need(self.f_dx, "f_dx")?, d, &fargs)?,
                    dy: Expr::parse("f_dy", &need(self.f_dy, "f_dy")?, &fargs)?,
                    dz: flat("f_dz", need(self.f_dz, "f_dz")?, d1, &fargs)?,
                    names: fargs.clone(),
                })
            }
        };
        let exact: Option<Arc<dyn SmoothField>> = match self.exact {
            None => None,
            Some(e) => {
                let dx = self.exact_dx.ok_or_else(|| ConfigError::field("exact_dx", "required when exact is given"))?;
                let dxx =
                    self.exact_dxx.ok_or_else(|| ConfigError::field("exact_dxx", "required when exact is given"))?;
                Some(Arc::new(field(e, dx, dxx, "exact")?))
            }
        };
        if self.bbox.len() != d {
            return Err(ConfigError::field("bbox", format!("expected {d} intervals")));
        }
        let domain = DomainSpec::new(
            Arc::new(psi),
            self.lambda,
            self.delta1,
            self.bbox.iter().map(|b| (b[0], b[1])).collect(),
            self.psi_sup,
        )
        .map_err(|e| ConfigError::field("problem", e.to_string()))?;
        let c = &self.constants;
        let spec = ProblemSpec {
            name: self.name,
            dims: Dims { d, d1, k: 1 },
            diffusion: Arc::new(diffusion),
            driver,
            g: Arc::new(g),
            constants: Constants::new(c.mu, c.l, c.l0, c.beta, c.k0),
            exact,
        };
        let interior = match self.interior {
            None => None,
            Some(s) => {
                if s.rho.len() != d || !(s.q.is_empty() || s.q.len() == d) || s.q.iter().any(|q| q.len() != d1 * d1) {
                    return Err(ConfigError::field(
                        "interior",
                        format!("need rho of length {d} and d matrices of {d1} × {d1}"),
                    ));
                }
                Some(InteriorScheme::constant(s.rho, s.m, s.q, d1))
            }
        };
        Ok(Compiled { spec, domain, interior })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn interval_problem(sigma_dx: &str) -> UserProblem {
        toml::from_str(&format!(
            r#"
name = "scalar"
d = 1
d1 = 1
sigma = [["x1"]]
sigma_dx = [[["{sigma_dx}"]]]
sigma_dxx = [[[["0"]]]]
drift = ["0.5 * x1"]
drift_dx = [["0.5"]]
drift_dxx = [[["0"]]]
g = "x1"
g_dx = ["1"]
g_dxx = [["0"]]
f = "-y"
f_dx = ["0"]
f_dy = "-1"
f_dz = ["0"]
psi = "2.5 * (x1 - 1) * (2 - x1)"
psi_dx = ["2.5 * (3 - 2 * x1)"]
psi_dxx = [["-5"]]
lambda = 0.3
delta1 = 0.02
bbox = [[1.0, 2.0]]
psi_sup = 0.625
[constants]
mu = 1.0
l = 1.5
l0 = 0.3
beta = -0.3
k0 = 15.0
"#
        ))
        .unwrap()
    }

    #[test]
    fn compiles_and_evaluates() {
        let c = interval_problem("1").compile().unwrap();
        let mut s = [0.0];
        c.spec.diffusion.sigma(&[1.5], &mut s);
        assert_eq!(s[0], 1.5);
        assert!((c.domain.psi.value(&[1.5]) - 0.625).abs() < 1e-15);
        let mut f = [0.0];
        c.spec.driver.value(&[1.5], &[2.0], &[0.0], &mut f);
        assert_eq!(f[0], -2.0);
    }

    #[test]
    fn unknown_identifiers_are_reported_with_the_field() {
        let mut p = interval_problem("1");
        p.g = "x2 + 1".into();
        let e = p.compile().err().unwrap();
        assert!(e.to_string().contains("g"), "{e}");
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let mut p = interval_problem("1");
        p.drift = vec!["0".into(), "1".into()];
        assert!(p.compile().is_err());
    }
}
