//! Experiment configuration files.
//!
//! A config is one TOML document; the key reference lives in `docs/config.md`. Parse errors
//! carry the line and column reported by the TOML parser, validation errors carry the dotted
//! field path and, when the key appears in the file, its line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{file}: {message}")]
    Parse { file: String, message: String },
    #[error("{}{field}: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid { field: String, message: String, line: Option<usize> },
}

impl ConfigError {
    pub fn field(field: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid { field: field.to_string(), message: message.into(), line: None }
    }

    /// Attaches the line of `field` in `source` when it can be found.
    pub fn located(self, source: &str) -> Self {
        match self {
            ConfigError::Invalid { field, message, line: None } => {
                let line = locate(source, &field);
                ConfigError::Invalid { field, message, line }
            }
            e => e,
        }
    }
}

/// Line (1-based) of the key named by a dotted path such as `numerics.h` or `points[1].x`.
/// Array indices select the matching `[[table]]` occurrence; trailing indices into values
/// are ignored.
pub fn locate(source: &str, path: &str) -> Option<usize> {
    let mut parts: Vec<(String, Option<usize>)> = Vec::new();
    for seg in path.split('.') {
        let (name, idx) = match seg.find('[') {
            Some(i) => (&seg[..i], seg[i + 1..].split(']').next().and_then(|s| s.parse().ok())),
            None => (seg, None),
        };
        parts.push((name.to_string(), idx));
    }
    let (key, _) = parts.pop()?;
    let table: Vec<String> = parts.iter().map(|(n, _)| n.clone()).collect();
    let want_idx = parts.last().and_then(|(_, i)| *i).unwrap_or(0);
    let mut current: Vec<String> = Vec::new();
    let mut seen = std::collections::HashMap::<String, usize>::new();
    let mut occurrence = 0;
    for (no, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix("[[").and_then(|l| l.split("]]").next()) {
            current = h.trim().split('.').map(|s| s.trim().to_string()).collect();
            let c = seen.entry(h.trim().to_string()).or_insert(0);
            occurrence = *c;
            *c += 1;
            continue;
        }
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.split(']').next()) {
            current = h.trim().split('.').map(|s| s.trim().to_string()).collect();
            occurrence = 0;
            continue;
        }
        if current == table && occurrence == want_idx {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim().trim_matches('"') == key {
                    return Some(no + 1);
                }
            }
        }
    }
    // fall back to the table header
    if !table.is_empty() {
        let header = table.join(".");
        let mut count = 0;
        for (no, raw) in source.lines().enumerate() {
            let line = raw.trim();
            if line == format!("[{header}]") || line == format!("[[{header}]]") {
                if count == want_idx {
                    return Some(no + 1);
                }
                count += 1;
            }
        }
    }
    None
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Solve,
    Grad,
    Hess,
    VerifyBarriers,
    VerifyQuasi,
    VerifyBounds,
    Hypotheses,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Solve => "solve",
            Experiment::Grad => "grad",
            Experiment::Hess => "hess",
            Experiment::VerifyBarriers => "verify-barriers",
            Experiment::VerifyQuasi => "verify-quasi",
            Experiment::VerifyBounds => "verify-bounds",
            Experiment::Hypotheses => "hypotheses",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Must match the subcommand when given.
    pub experiment: Option<Experiment>,
    pub seed: Option<u64>,
    pub problem: ProblemSource,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default)]
    pub points: Vec<Point>,
    #[serde(default)]
    pub quasi: QuasiSettings,
    #[serde(default)]
    pub barriers: BarrierSettings,
    #[serde(default)]
    pub bounds: BoundSettings,
    #[serde(default)]
    pub output: Output,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSource {
    pub builtin: Option<String>,
    /// User problem file, relative to the config file.
    pub file: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodChoice {
    /// Driver-free when `f` depends on `x` only, Picard otherwise.
    Auto,
    DriverFree,
    Picard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeChoice {
    Zero,
    Boundary,
    Interior,
    Switching,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Numerics {
    pub h: f64,
    pub n_paths: usize,
    pub t_max: Option<f64>,
    pub deltas: Vec<f64>,
    /// Overrides the domain's `λ`.
    pub lambda: Option<f64>,
    /// Overrides the domain's `δ₁`.
    pub delta1: Option<f64>,
    #[serde(rename = "K1")]
    pub k1: f64,
    /// Localization level `n` for `|ξ| ≥ n`.
    pub clip: f64,
    /// Defaults to the problem's `β`.
    pub beta: Option<f64>,
    /// Moment order of the near-boundary scheme.
    pub p: f64,
    pub z_crit: f64,
    pub checkpoints: Vec<f64>,
    pub method: MethodChoice,
    /// Defaults to `switching` when the problem has an interior scheme, `zero` otherwise.
    pub scheme: Option<SchemeChoice>,
    /// Absolute slack added to `3·SE` (solve) or the CI (grad, hess) in oracle comparisons.
    pub tolerance: Option<f64>,
    /// Grid nodes per axis for the hypothesis checks and norms.
    pub grid: usize,
    /// Relative tolerance of the derivative-callback check on user problems.
    pub fd_tolerance: f64,
}

impl Default for Numerics {
    fn default() -> Self {
        Numerics {
            h: 1e-3,
            n_paths: 10_000,
            t_max: None,
            deltas: vec![0.1, 0.05, 0.025],
            lambda: None,
            delta1: None,
            k1: 1.0,
            clip: 1e3,
            beta: None,
            p: 1.0,
            z_crit: 3.0,
            checkpoints: vec![0.05, 0.1, 0.2],
            method: MethodChoice::Auto,
            scheme: None,
            tolerance: None,
            grid: 21,
            fd_tolerance: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Point {
    pub x: Vec<f64>,
    pub xi0: Option<Vec<f64>>,
}

/// Quadratic test function `c0 + ⟨lin, x⟩ + ½⟨hess x, x⟩`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunctionSpec {
    pub name: String,
    #[serde(default)]
    pub c0: f64,
    pub lin: Vec<f64>,
    /// Row-major `d × d`.
    pub hess: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuasiSettings {
    /// Empty means the harmonic quadratics `1, x₁, x₂, x₁²−x₂², x₁x₂` (planar problems only).
    pub test_functions: Vec<TestFunctionSpec>,
    /// Also test the second-order process, with `η₀ = 0`.
    pub second_order: bool,
    /// Scheme of the flow-convergence run.
    pub flow_scheme: SchemeChoice,
    pub flow_horizon: f64,
    /// Defaults to `numerics.n_paths`.
    pub flow_paths: Option<usize>,
    pub ratio_window: [f64; 2],
}

impl Default for QuasiSettings {
    fn default() -> Self {
        QuasiSettings {
            test_functions: Vec::new(),
            second_order: true,
            flow_scheme: SchemeChoice::Boundary,
            flow_horizon: 1.0,
            flow_paths: None,
            ratio_window: [1.6, 2.6],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BarrierName {
    B1,
    B2,
    B3,
    B4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BarrierSettings {
    pub barriers: Vec<BarrierName>,
    /// Initial directions `ξ₀`; defaults to the coordinate axes plus their normalized sum.
    pub directions: Vec<Vec<f64>>,
    /// Boundary barriers try `λ, λ/2, …` this many times.
    pub halvings: usize,
    #[serde(rename = "K1_max")]
    pub k1_max: f64,
    /// Start of interior tests; defaults to the grid point of largest `ψ`.
    pub interior_x0: Option<Vec<f64>>,
    /// Boundary tests start where `ψ = λ/2` on the ray from the interior start along this
    /// direction (default `e₁`).
    pub boundary_ray: Option<Vec<f64>>,
    /// Ordering check: level-set samples per level and directions.
    pub ordering_points: usize,
    pub ordering_directions: usize,
}

impl Default for BarrierSettings {
    fn default() -> Self {
        BarrierSettings {
            barriers: vec![BarrierName::B1, BarrierName::B2, BarrierName::B3, BarrierName::B4],
            directions: Vec::new(),
            halvings: 3,
            k1_max: 64.0,
            interior_x0: None,
            boundary_ray: None,
            ordering_points: 100,
            ordering_directions: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceChoice {
    Analytic,
    Perturbed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundSettings {
    pub orders: Vec<u8>,
    pub source: SourceChoice,
    /// Panel center; defaults to the grid point of largest `ψ`.
    pub center: Option<Vec<f64>>,
    /// Ray directions; defaults to `rays` evenly spaced directions (planar) or `±e₁` (d = 1).
    pub directions: Vec<Vec<f64>>,
    pub rays: usize,
    pub per_ray: usize,
    /// Smallest `ψ` on the panel; defaults to `δ₁`.
    pub psi_min: Option<f64>,
    pub calibration_fraction: f64,
    /// Boundary points for the normal-derivative bound.
    pub normal_points: Vec<Vec<f64>>,
    /// Boundary samples used to calibrate its constant.
    pub normal_calibration: usize,
    /// Factor applied to the calibrated constant.
    pub normal_margin: f64,
    /// Paths per offset; defaults to `numerics.n_paths`.
    pub normal_paths: Option<usize>,
}

impl Default for BoundSettings {
    fn default() -> Self {
        BoundSettings {
            orders: vec![1],
            source: SourceChoice::Analytic,
            center: None,
            directions: Vec::new(),
            rays: 3,
            per_ray: 10,
            psi_min: None,
            calibration_fraction: 0.5,
            normal_points: Vec::new(),
            normal_calibration: 16,
            normal_margin: 1.1,
            normal_paths: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Output {
    pub dir: PathBuf,
}

impl Default for Output {
    fn default() -> Self {
        Output { dir: PathBuf::from("out") }
    }
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::field(field, format!("must be positive and finite, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn parse(source: &str, file: &str) -> Result<Self, ConfigError> {
        toml::from_str(source).map_err(|e| ConfigError::Parse { file: file.to_string(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.to_path_buf(), source: e })?;
        Ok((Self::parse(&src, &path.display().to_string())?, src))
    }

    /// Checks what can be checked without the problem; [`crate::run`] checks the rest once the
    /// domain is known.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seed.is_none() {
            return Err(ConfigError::field("seed", "a seed is required (in the file or via --seed)"));
        }
        match (&self.problem.builtin, &self.problem.file) {
            (Some(_), Some(_)) => return Err(ConfigError::field("problem", "give either builtin or file, not both")),
            (None, None) => return Err(ConfigError::field("problem", "give builtin or file")),
            (Some(n), None) if bsdeflow_core::problem::builtin(n).is_none() => {
                let names = bsdeflow_core::problem::builtin_names().join(", ");
                return Err(ConfigError::field("problem.builtin", format!("unknown problem `{n}` (known: {names})")));
            }
            _ => {}
        }
        let n = &self.numerics;
        positive("numerics.h", n.h)?;
        if n.n_paths < 2 {
            return Err(ConfigError::field("numerics.n_paths", "need at least two paths"));
        }
        if let Some(t) = n.t_max {
            positive("numerics.t_max", t)?;
        }
        if n.deltas.len() < 3 || n.deltas.iter().any(|d| !(*d > 0.0)) || n.deltas.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(ConfigError::field(
                "numerics.deltas",
                "need at least three positive, strictly decreasing values",
            ));
        }
        if let Some(l) = n.lambda {
            if !(l > 0.0 && l < 1.0) {
                return Err(ConfigError::field("numerics.lambda", format!("must lie in (0, 1), got {l}")));
            }
        }
        if let Some(d1) = n.delta1 {
            positive("numerics.delta1", d1)?;
        }
        positive("numerics.K1", n.k1)?;
        positive("numerics.clip", n.clip)?;
        positive("numerics.p", n.p)?;
        positive("numerics.z_crit", n.z_crit)?;
        if let Some(b) = n.beta {
            if !b.is_finite() {
                return Err(ConfigError::field("numerics.beta", "must be finite"));
            }
        }
        if n.checkpoints.is_empty() || n.checkpoints[0] <= 0.0 || n.checkpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(ConfigError::field("numerics.checkpoints", "need positive, strictly increasing times"));
        }
        if let Some(t) = n.tolerance {
            if !(t >= 0.0) {
                return Err(ConfigError::field("numerics.tolerance", "must be non-negative"));
            }
        }
        if n.grid < 3 {
            return Err(ConfigError::field("numerics.grid", "need at least three nodes per axis"));
        }
        positive("numerics.fd_tolerance", n.fd_tolerance)?;
        let q = &self.quasi;
        positive("quasi.flow_horizon", q.flow_horizon)?;
        if q.flow_paths.is_some_and(|p| p < 2) {
            return Err(ConfigError::field("quasi.flow_paths", "need at least two paths"));
        }
        if !(q.ratio_window[0] < q.ratio_window[1]) {
            return Err(ConfigError::field("quasi.ratio_window", "lower end must be below the upper end"));
        }
        let b = &self.barriers;
        if b.barriers.is_empty() {
            return Err(ConfigError::field("barriers.barriers", "nothing to test"));
        }
        if b.halvings == 0 {
            return Err(ConfigError::field("barriers.halvings", "must be at least 1"));
        }
        positive("barriers.K1_max", b.k1_max)?;
        if b.ordering_points == 0 || b.ordering_directions == 0 {
            return Err(ConfigError::field("barriers.ordering_points", "ordering samples must be positive"));
        }
        let s = &self.bounds;
        if s.orders.is_empty() || s.orders.iter().any(|o| *o != 1 && *o != 2) {
            return Err(ConfigError::field("bounds.orders", "orders must be 1 or 2"));
        }
        if s.per_ray < 2 || s.rays == 0 {
            return Err(ConfigError::field("bounds.per_ray", "need at least one ray with two points"));
        }
        if !(s.calibration_fraction > 0.0 && s.calibration_fraction < 1.0) {
            return Err(ConfigError::field("bounds.calibration_fraction", "must lie in (0, 1)"));
        }
        positive("bounds.normal_margin", s.normal_margin)?;
        if s.normal_calibration == 0 {
            return Err(ConfigError::field("bounds.normal_calibration", "must be positive"));
        }
        Ok(())
    }

    /// Checks that need the problem dimension and domain regions.
    pub fn validate_for(&self, d: usize, lambda: f64, delta1: f64) -> Result<(), ConfigError> {
        if !(delta1 < lambda * lambda) {
            return Err(ConfigError::field(
                if self.numerics.delta1.is_some() { "numerics.delta1" } else { "numerics.lambda" },
                format!("need delta1 < lambda^2, got delta1 = {delta1} and lambda = {lambda}"),
            ));
        }
        for (i, p) in self.points.iter().enumerate() {
            if p.x.len() != d {
                return Err(ConfigError::field(&format!("points[{i}].x"), format!("expected {d} coordinates")));
            }
            if p.xi0.as_ref().is_some_and(|v| v.len() != d) {
                return Err(ConfigError::field(&format!("points[{i}].xi0"), format!("expected {d} coordinates")));
            }
        }
        let dims = |field: &str, vs: &[Vec<f64>]| -> Result<(), ConfigError> {
            match vs.iter().position(|v| v.len() != d) {
                Some(i) => Err(ConfigError::field(&format!("{field}[{i}]"), format!("expected {d} coordinates"))),
                None => Ok(()),
            }
        };
        dims("barriers.directions", &self.barriers.directions)?;
        dims("bounds.directions", &self.bounds.directions)?;
        dims("bounds.normal_points", &self.bounds.normal_points)?;
        for (field, v) in [
            ("barriers.interior_x0", &self.barriers.interior_x0),
            ("barriers.boundary_ray", &self.barriers.boundary_ray),
            ("bounds.center", &self.bounds.center),
        ] {
            if v.as_ref().is_some_and(|v| v.len() != d) {
                return Err(ConfigError::field(field, format!("expected {d} coordinates")));
            }
        }
        for (i, t) in self.quasi.test_functions.iter().enumerate() {
            if t.lin.len() != d || t.hess.len() != d * d {
                return Err(ConfigError::field(
                    &format!("quasi.test_functions[{i}]"),
                    format!("lin needs {d} entries and hess {} entries", d * d),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "seed = 7\n[problem]\nbuiltin = \"tp1\"\n";

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::parse(MINIMAL, "c.toml").unwrap();
        c.validate().unwrap();
        assert_eq!(c.numerics.deltas, vec![0.1, 0.05, 0.025]);
        assert_eq!(c.output.dir, PathBuf::from("out"));
    }

    #[test]
    fn parse_errors_carry_the_line() {
        let e = ExperimentConfig::parse("seed = 7\n[problem]\nbuiltin = tp1\n", "c.toml").unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = ExperimentConfig::parse("seed = 7\nsed = 3\n[problem]\nbuiltin = \"tp1\"\n", "c.toml").unwrap_err();
        assert!(e.to_string().contains("sed"), "{e}");
    }

    #[test]
    fn missing_seed_is_a_validation_error() {
        let c = ExperimentConfig::parse("[problem]\nbuiltin = \"tp1\"\n", "c.toml").unwrap();
        assert!(matches!(c.validate(), Err(ConfigError::Invalid { ref field, .. }) if field == "seed"));
    }

    #[test]
    fn validation_errors_are_located() {
        let src = "seed = 7\n[problem]\nbuiltin = \"tp1\"\n[numerics]\nn_paths = 100\nh = -1.0\n";
        let c = ExperimentConfig::parse(src, "c.toml").unwrap();
        let e = c.validate().unwrap_err().located(src);
        assert!(e.to_string().starts_with("line 6: numerics.h"), "{e}");
    }

    #[test]
    fn array_tables_are_located_by_occurrence() {
        let src = "[[points]]\nx = [0.1]\n[[points]]\nxi0 = [1.0]\nx = [0.2, 0.3]\n";
        assert_eq!(locate(src, "points[1].x"), Some(5));
        assert_eq!(locate(src, "points[0].x"), Some(2));
        assert_eq!(locate(src, "points[1].xi0"), Some(4));
    }

    #[test]
    fn region_order_is_checked() {
        let c = ExperimentConfig::parse(MINIMAL, "c.toml").unwrap();
        assert!(c.validate_for(2, 0.2, 0.05).is_err());
        assert!(c.validate_for(2, 0.45, 0.05).is_ok());
    }
}
