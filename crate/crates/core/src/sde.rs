//! Euler–Maruyama simulation of the forward diffusion, stopped at the first grid time with
//! `ψ(X) ≤ 0`.
//!
//! ```text
//! X_{i+1} = X_i + σ(X_i) ΔW_i + b(X_i) h
//! ```
//!
//! Increments are addressed by `(seed, path, step)` (see [`crate::rng`]), so an ensemble can
//! keep only per-path exit summaries and any path can be replayed bit-exactly on demand.

use std::io::{self, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::{Dims, DomainSpec, ProblemSpec};
use crate::rng::GaussianStream;
use crate::stats::{Summary, Z95};

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("state became non-finite on path {path} at step {step}")]
    NonFinite { path: u64, step: u64 },
    #[error("ensemble file: {0}")]
    Io(#[from] io::Error),
    #[error("ensemble file is malformed: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, SdeError>;

/// How much of each path to keep in memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Recording {
    /// Exit summaries only; states are replayed from the generator when needed.
    ExitOnly,
    /// Every state `X_0, …, X_exit`.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub h: f64,
    pub n_paths: usize,
    /// Horizon cap; `None` means `50·|ψ|₀`.
    pub t_max: Option<f64>,
    pub seed: u64,
    pub recording: Recording,
}

impl SimConfig {
    pub fn new(h: f64, n_paths: usize, seed: u64) -> Self {
        SimConfig { h, n_paths, t_max: None, seed, recording: Recording::ExitOnly }
    }
}

/// One Euler path, stepped in place.
#[derive(Clone, Debug)]
pub struct PathWalker<'a> {
    spec: &'a ProblemSpec,
    stream: GaussianStream,
    h: f64,
    sqrt_h: f64,
    x: Vec<f64>,
    dw: Vec<f64>,
    sigma: Vec<f64>,
    drift: Vec<f64>,
}

impl<'a> PathWalker<'a> {
    pub fn new(spec: &'a ProblemSpec, x0: &[f64], h: f64, seed: u64, path: u64) -> Self {
        let Dims { d, d1, .. } = spec.dims;
        PathWalker {
            spec,
            stream: GaussianStream::new(seed, path, d1, 0),
            h,
            sqrt_h: h.sqrt(),
            x: x0.to_vec(),
            dw: vec![0.0; d1],
            sigma: vec![0.0; d * d1],
            drift: vec![0.0; d],
        }
    }

    pub fn state(&self) -> &[f64] {
        &self.x
    }

    /// Index of the current state.
    pub fn step_index(&self) -> u64 {
        self.stream.step()
    }

    /// Increment that produced the current state from the previous one.
    pub fn last_increment(&self) -> &[f64] {
        &self.dw
    }

    /// Advances one step.
    pub fn advance(&mut self) {
        let Dims { d, d1, .. } = self.spec.dims;
        self.stream.next_into(self.sqrt_h, &mut self.dw);
        self.spec.diffusion.sigma(&self.x, &mut self.sigma);
        self.spec.diffusion.drift(&self.x, &mut self.drift);
        for i in 0..d {
            let row = &self.sigma[i * d1..(i + 1) * d1];
            let noise: f64 = row.iter().zip(&self.dw).map(|(s, w)| s * w).sum();
            self.x[i] += noise + self.drift[i] * self.h;
        }
    }
}

/// Point on the segment `a → b` where `ψ` changes sign, by bisection; returns the fraction
/// `θ ∈ (0, 1]` and the point. Assumes `ψ(a) > 0 ≥ ψ(b)`.
pub fn bisect_exit(dom: &DomainSpec, a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let at = |t: f64| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p + t * (q - p)).collect() };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if dom.psi.value(&at(mid)) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (hi, at(hi))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathEnsemble {
    pub dims: Dims,
    pub x0: Vec<f64>,
    pub h: f64,
    pub t_max: f64,
    /// Number of steps after which a path is capped.
    pub cap_steps: u64,
    pub n_paths: usize,
    pub seed: u64,
    /// First index with `ψ(X) ≤ 0`, or `cap_steps` for capped paths.
    pub exit_index: Vec<u64>,
    pub capped: Vec<bool>,
    /// Bisection fraction of the crossing within the last step (1 for capped paths).
    pub crossing: Vec<f64>,
    /// Exit point projected onto `{ψ = 0}` (the capped state for capped paths), `n × d`.
    pub exit_points: Vec<f64>,
    /// Unprojected Euler state at the exit index, `n × d`.
    pub exit_states: Vec<f64>,
    /// Full trajectories when recorded, `(exit_index + 1) × d` values per path.
    pub states: Option<Vec<Vec<f64>>>,
}

impl PathEnsemble {
    pub fn exit_time(&self, path: usize) -> f64 {
        self.exit_index[path] as f64 * self.h
    }

    /// Exit time with the bisection refinement of the last step.
    pub fn refined_exit_time(&self, path: usize) -> f64 {
        if self.capped[path] {
            return self.exit_time(path);
        }
        (self.exit_index[path] as f64 - 1.0 + self.crossing[path]) * self.h
    }

    pub fn exit_point(&self, path: usize) -> &[f64] {
        let d = self.dims.d;
        &self.exit_points[path * d..(path + 1) * d]
    }

    pub fn exit_state(&self, path: usize) -> &[f64] {
        let d = self.dims.d;
        &self.exit_states[path * d..(path + 1) * d]
    }

    pub fn capped_fraction(&self) -> f64 {
        self.capped.iter().filter(|c| **c).count() as f64 / self.n_paths as f64
    }

    /// Walker positioned at `X_0` of `path`.
    pub fn walker<'a>(&self, spec: &'a ProblemSpec, path: usize) -> PathWalker<'a> {
        PathWalker::new(spec, &self.x0, self.h, self.seed, path as u64)
    }

    /// Regenerates the states `X_0, …, X_exit` of one path.
    pub fn replay(&self, spec: &ProblemSpec, path: usize) -> Vec<f64> {
        if let Some(states) = &self.states {
            return states[path].clone();
        }
        let d = self.dims.d;
        let n = self.exit_index[path] as usize;
        let mut out = Vec::with_capacity((n + 1) * d);
        let mut w = self.walker(spec, path);
        out.extend_from_slice(w.state());
        for _ in 0..n {
            w.advance();
            out.extend_from_slice(w.state());
        }
        out
    }
}

pub fn simulate_ensemble(spec: &ProblemSpec, dom: &DomainSpec, x0: &[f64], cfg: &SimConfig) -> Result<PathEnsemble> {
    let d = spec.dims.d;
    if x0.len() != d {
        return Err(SdeError::InvalidArgument(format!("x0 has {} coordinates, expected {d}", x0.len())));
    }
    if !(dom.psi.value(x0) > 0.0) {
        return Err(SdeError::InvalidArgument(format!("x0 = {x0:?} is not in D")));
    }
    if !(cfg.h > 0.0 && cfg.h.is_finite()) {
        return Err(SdeError::InvalidArgument(format!("time step must be positive, got {}", cfg.h)));
    }
    if cfg.n_paths == 0 {
        return Err(SdeError::InvalidArgument("n_paths must be at least 1".into()));
    }
    let t_max = cfg.t_max.unwrap_or(50.0 * dom.psi_sup);
    if !(t_max > 0.0) {
        return Err(SdeError::InvalidArgument(format!("T_max must be positive, got {t_max}")));
    }
    let cap_steps = (t_max / cfg.h).ceil() as u64;
    let full = cfg.recording == Recording::Full;

    struct Out {
        exit: u64,
        capped: bool,
        theta: f64,
        point: Vec<f64>,
        last: Vec<f64>,
        states: Option<Vec<f64>>,
    }
    let results: Vec<Result<Out>> = (0..cfg.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut w = PathWalker::new(spec, x0, cfg.h, cfg.seed, p as u64);
            let mut states = full.then(|| x0.to_vec());
            let mut prev = x0.to_vec();
            for i in 1..=cap_steps {
                prev.copy_from_slice(w.state());
                w.advance();
                let x = w.state();
                if !x.iter().all(|v| v.is_finite()) {
                    return Err(SdeError::NonFinite { path: p as u64, step: i });
                }
                if let Some(s) = states.as_mut() {
                    s.extend_from_slice(x);
                }
                if dom.psi.value(x) <= 0.0 {
                    let (theta, point) = bisect_exit(dom, &prev, x);
                    return Ok(Out { exit: i, capped: false, theta, point, last: x.to_vec(), states });
                }
            }
            let x = w.state().to_vec();
            Ok(Out { exit: cap_steps, capped: true, theta: 1.0, point: x.clone(), last: x, states })
        })
        .collect();

    let mut ens = PathEnsemble {
        dims: spec.dims,
        x0: x0.to_vec(),
        h: cfg.h,
        t_max,
        cap_steps,
        n_paths: cfg.n_paths,
        seed: cfg.seed,
        exit_index: Vec::with_capacity(cfg.n_paths),
        capped: Vec::with_capacity(cfg.n_paths),
        crossing: Vec::with_capacity(cfg.n_paths),
        exit_points: Vec::with_capacity(cfg.n_paths * d),
        exit_states: Vec::with_capacity(cfg.n_paths * d),
        states: full.then(|| Vec::with_capacity(cfg.n_paths)),
    };
    for r in results {
        let o = r?;
        ens.exit_index.push(o.exit);
        ens.capped.push(o.capped);
        ens.crossing.push(o.theta);
        ens.exit_points.extend_from_slice(&o.point);
        ens.exit_states.extend_from_slice(&o.last);
        if let (Some(all), Some(s)) = (ens.states.as_mut(), o.states) {
            all.push(s);
        }
    }
    Ok(ens)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

/// Exit-time moments over the uncapped paths, compared with `ψ(x₀)` and `2|ψ|₀ψ(x₀)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitStatistics {
    pub n_exited: usize,
    pub mean: f64,
    pub variance: f64,
    pub stderr: f64,
    pub ci95: f64,
    pub second_moment: f64,
    pub second_moment_stderr: f64,
    pub capped_fraction: f64,
    pub psi_x0: f64,
    pub second_moment_bound: f64,
    pub verdict: Verdict,
    pub warning: Option<String>,
}

pub fn exit_statistics(ens: &PathEnsemble, dom: &DomainSpec) -> Result<ExitStatistics> {
    if ens.n_paths == 0 {
        return Err(SdeError::InvalidArgument("empty ensemble".into()));
    }
    let taus: Vec<f64> = (0..ens.n_paths).filter(|&p| !ens.capped[p]).map(|p| ens.exit_time(p)).collect();
    let capped_fraction = ens.capped_fraction();
    let psi_x0 = dom.psi.value(&ens.x0);
    let second_moment_bound = 2.0 * dom.psi_sup * psi_x0;
    let mut warning = (capped_fraction > 0.01)
        .then(|| format!("{:.2}% of paths hit the horizon cap; statistics are biased low", 100.0 * capped_fraction));
    if taus.is_empty() {
        warning.get_or_insert_with(|| "no path exited".into());
        return Ok(ExitStatistics {
            n_exited: 0,
            mean: f64::NAN,
            variance: f64::NAN,
            stderr: f64::NAN,
            ci95: f64::NAN,
            second_moment: f64::NAN,
            second_moment_stderr: f64::NAN,
            capped_fraction,
            psi_x0,
            second_moment_bound,
            verdict: Verdict::Inconclusive,
            warning,
        });
    }
    let s = Summary::of(&taus);
    let sq: Vec<f64> = taus.iter().map(|t| t * t).collect();
    let s2 = Summary::of(&sq);
    let pass = s.mean - Z95 * s.stderr <= psi_x0 && s2.mean - Z95 * s2.stderr <= second_moment_bound;
    Ok(ExitStatistics {
        n_exited: taus.len(),
        mean: s.mean,
        variance: s.variance,
        stderr: s.stderr,
        ci95: s.ci95(),
        second_moment: s2.mean,
        second_moment_stderr: s2.stderr,
        capped_fraction,
        psi_x0,
        second_moment_bound,
        verdict: if pass { Verdict::Pass } else { Verdict::Fail },
        warning,
    })
}

const MAGIC: &[u8; 8] = b"BSDEENS1";

fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64(w: &mut impl Write, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> io::Result<f64> {
    Ok(f64::from_bits(get_u64(r)?))
}

impl PathEnsemble {
    /// Writes the columnar binary layout described in `docs/ensemble-format.md`.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let Dims { d, d1, k } = self.dims;
        w.write_all(MAGIC)?;
        for v in [d, d1, k, self.n_paths] {
            put_u64(w, v as u64)?;
        }
        put_f64(w, self.h)?;
        put_f64(w, self.t_max)?;
        put_u64(w, self.cap_steps)?;
        put_u64(w, self.seed)?;
        put_u64(w, self.states.is_some() as u64)?;
        for v in &self.x0 {
            put_f64(w, *v)?;
        }
        for v in &self.exit_index {
            put_u64(w, *v)?;
        }
        w.write_all(&self.capped.iter().map(|c| *c as u8).collect::<Vec<u8>>())?;
        for v in self.crossing.iter().chain(&self.exit_points).chain(&self.exit_states) {
            put_f64(w, *v)?;
        }
        if let Some(states) = &self.states {
            for s in states {
                put_u64(w, (s.len() / d) as u64)?;
                for v in s {
                    put_f64(w, *v)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<PathEnsemble> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(SdeError::Format("bad magic".into()));
        }
        let d = get_u64(r)? as usize;
        let d1 = get_u64(r)? as usize;
        let k = get_u64(r)? as usize;
        let n = get_u64(r)? as usize;
        let h = get_f64(r)?;
        let t_max = get_f64(r)?;
        let cap_steps = get_u64(r)?;
        let seed = get_u64(r)?;
        let full = match get_u64(r)? {
            0 => false,
            1 => true,
            other => return Err(SdeError::Format(format!("bad recording flag {other}"))),
        };
        let mut f64s = |count: usize| -> io::Result<Vec<f64>> { (0..count).map(|_| get_f64(r)).collect() };
        let x0 = f64s(d)?;
        let exit_index = (0..n).map(|_| get_u64(r)).collect::<io::Result<Vec<u64>>>()?;
        let mut capped = vec![0u8; n];
        r.read_exact(&mut capped)?;
        let mut f64s = |count: usize| -> io::Result<Vec<f64>> { (0..count).map(|_| get_f64(r)).collect() };
        let crossing = f64s(n)?;
        let exit_points = f64s(n * d)?;
        let exit_states = f64s(n * d)?;
        let states = if full {
            let mut all = Vec::with_capacity(n);
            for p in 0..n {
                let len = get_u64(r)? as usize;
                if len as u64 != exit_index[p] + 1 {
                    return Err(SdeError::Format(format!("path {p} has {len} states")));
                }
                all.push((0..len * d).map(|_| get_f64(r)).collect::<io::Result<Vec<f64>>>()?);
            }
            Some(all)
        } else {
            None
        };
        Ok(PathEnsemble {
            dims: Dims { d, d1, k },
            x0,
            h,
            t_max,
            cap_steps,
            n_paths: n,
            seed,
            exit_index,
            capped: capped.into_iter().map(|c| c != 0).collect(),
            crossing,
            exit_points,
            exit_states,
            states,
        })
    }
}
