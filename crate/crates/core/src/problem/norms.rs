//! Grid estimates of the sup-norms and Lipschitz seminorms of `g`, `f` and `ψ`.
//!
//! Every number here is a maximum over finitely many samples, hence a lower bound of the
//! corresponding supremum.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dims, DomainSpec, ProblemError, ProblemSpec, Result};
use crate::linalg;
use crate::rng::aux_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormConfig {
    /// Grid nodes per axis over the bounding box.
    pub resolution: usize,
    /// Pair budget for the Lipschitz seminorms; random subsampling beyond it.
    pub max_pairs: usize,
    /// Half width of the `(y, z)` box for the driver norms.
    pub yz_bound: f64,
    /// Nodes per `(y, z)` coordinate when the tensor grid fits in `max_yz_samples`.
    pub yz_per_axis: usize,
    pub max_yz_samples: usize,
    pub seed: u64,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig { resolution: 21, max_pairs: 1_000_000, yz_bound: 10.0, yz_per_axis: 3, max_yz_samples: 27, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GNorms {
    /// `|g|₀`
    pub c0: f64,
    /// `|g|₁ = |g|₀ + |g_x|₀`
    pub c1: f64,
    /// `|g|₂ = |g|₁ + |g_xx|₀`
    pub c2: f64,
    /// `|g|_{0,1} = |g|₀ + [g]_{0,1}`
    pub c01: f64,
    /// `|g|_{1,1} = |g|₁ + [g]_{1,1}`
    pub c11: f64,
    pub lip: f64,
    pub grad_lip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FNorms {
    /// `|f(·, 0, 0)|₀`
    pub f0: f64,
    /// `[f]_{0,1,x}`
    pub lip_x: f64,
    /// `‖f‖_{0,1} = |f(·,0,0)|₀ + [f]_{0,1,x}`
    pub f01: f64,
    /// `[f]_{1,1}` over the joint `(x, y, z)` samples.
    pub f11: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsiNorms {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub g: GNorms,
    pub f: FNorms,
    pub psi: PsiNorms,
    pub resolution: usize,
    pub grid_points: usize,
    pub yz_samples: usize,
    /// `true`: all entries are sample maxima, i.e. lower bounds of the suprema.
    pub lower_bounds: bool,
}

/// Supremum of `ratio(i, j)` over pairs `i < j < n`, exhaustively when the pair count fits
/// the budget and over `budget` random pairs otherwise.
fn pair_sup(n: usize, budget: usize, seed: u64, ratio: impl Fn(usize, usize) -> f64 + Sync) -> f64 {
    let total = n * n.saturating_sub(1) / 2;
    if total <= budget {
        (0..n).into_par_iter().map(|i| ((i + 1)..n).map(|j| ratio(i, j)).fold(0.0, f64::max)).reduce(|| 0.0, f64::max)
    } else {
        let mut rng = aux_rng(seed, 0xA1);
        let pairs: Vec<(usize, usize)> = (0..budget)
            .map(|_| {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                (i, j)
            })
            .collect();
        pairs.par_iter().map(|&(i, j)| ratio(i, j)).reduce(|| 0.0, f64::max)
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_finite(what: &str, v: &[f64], x: &[f64]) -> Result<()> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(ProblemError::NonFinite { what: what.into(), point: x.to_vec() })
    }
}

fn yz_samples(dims: Dims, cfg: &NormConfig) -> Vec<Vec<f64>> {
    let m = dims.k + dims.k * dims.d1;
    let per = cfg.yz_per_axis.max(2);
    let b = cfg.yz_bound;
    let fits = (per as f64).powi(m as i32) <= cfg.max_yz_samples as f64;
    if fits {
        let total = per.pow(m as u32);
        (0..total)
            .map(|idx| {
                let mut rem = idx;
                (0..m)
                    .map(|_| {
                        let i = rem % per;
                        rem /= per;
                        -b + 2.0 * b * i as f64 / (per - 1) as f64
                    })
                    .collect()
            })
            .collect()
    } else {
        let mut rng = aux_rng(cfg.seed, 0xA2);
        let mut out = vec![vec![0.0; m]];
        for _ in 1..cfg.max_yz_samples.max(1) {
            out.push((0..m).map(|_| rng.random_range(-b..=b)).collect());
        }
        out
    }
}

pub fn compute_norms(spec: &ProblemSpec, dom: &DomainSpec, cfg: &NormConfig) -> Result<NormReport> {
    if cfg.resolution < 8 {
        return Err(ProblemError::InvalidArgument(format!(
            "grid resolution must be at least 8, got {}",
            cfg.resolution
        )));
    }
    if !(cfg.yz_bound > 0.0) {
        return Err(ProblemError::InvalidArgument("yz_bound must be positive".into()));
    }
    let Dims { d, d1, k } = spec.dims;
    let grid = dom.grid(cfg.resolution, true);
    if grid.is_empty() {
        return Err(ProblemError::InvalidArgument("sampling grid misses the domain".into()));
    }
    let n = grid.len();

    let mut gv = vec![0.0; n * k];
    let mut gj = vec![0.0; n * k * d];
    let mut gh = vec![0.0; k * d * d];
    let (mut c0, mut sup_grad, mut sup_hess) = (0.0f64, 0.0f64, 0.0f64);
    let mut psi = PsiNorms { c0: 0.0, c1: 0.0, c2: 0.0 };
    let (mut pg, mut ph) = (vec![0.0; d], vec![0.0; d * d]);
    let (mut sup_pg, mut sup_ph) = (0.0f64, 0.0f64);
    for (i, x) in grid.iter().enumerate() {
        let v = &mut gv[i * k..(i + 1) * k];
        spec.g.value(x, v);
        check_finite("g", v, x)?;
        c0 = c0.max(linalg::norm(v));
        let j = &mut gj[i * k * d..(i + 1) * k * d];
        spec.g.jacobian(x, j);
        check_finite("g_x", j, x)?;
        sup_grad = sup_grad.max(linalg::frobenius(j));
        spec.g.hessian(x, &mut gh);
        check_finite("g_xx", &gh, x)?;
        sup_hess = sup_hess.max(linalg::frobenius(&gh));

        let p = dom.psi.value(x);
        dom.psi.gradient(x, &mut pg);
        dom.psi.hessian(x, &mut ph);
        check_finite("psi", &[p], x)?;
        psi.c0 = psi.c0.max(p.abs());
        sup_pg = sup_pg.max(linalg::norm(&pg));
        sup_ph = sup_ph.max(linalg::frobenius(&ph));
    }
    psi.c1 = psi.c0 + sup_pg;
    psi.c2 = psi.c1 + sup_ph;

    let lip = pair_sup(n, cfg.max_pairs, cfg.seed, |i, j| {
        dist(&gv[i * k..(i + 1) * k], &gv[j * k..(j + 1) * k]) / dist(&grid[i], &grid[j])
    });
    // [g]_{1,1}: sum over coordinates of the Lipschitz constant of ∂_l g
    let mut grad_lip = 0.0;
    for l in 0..d {
        let col = |i: usize| -> Vec<f64> { (0..k).map(|c| gj[i * k * d + c * d + l]).collect() };
        grad_lip += pair_sup(n, cfg.max_pairs, cfg.seed.wrapping_add(l as u64 + 1), |i, j| {
            dist(&col(i), &col(j)) / dist(&grid[i], &grid[j])
        });
    }
    let c1 = c0 + sup_grad;
    let g = GNorms { c0, c1, c2: c1 + sup_hess, c01: c0 + lip, c11: c1 + grad_lip, lip, grad_lip };

    // driver norms
    let yz = yz_samples(spec.dims, cfg);
    let zero_y = vec![0.0; k];
    let zero_z = vec![0.0; k * d1];
    let mut f0 = 0.0f64;
    let mut fv = vec![0.0; k];
    for x in &grid {
        spec.driver.value(x, &zero_y, &zero_z, &mut fv);
        check_finite("f(x, 0, 0)", &fv, x)?;
        f0 = f0.max(linalg::norm(&fv));
    }
    let ny = yz.len();
    let mut fvals = vec![0.0; n * ny * k];
    let dm = d + k + k * d1;
    let mut dvals = vec![0.0; n * ny * k * dm];
    let (mut fx, mut fy, mut fz) = (vec![0.0; k * d], vec![0.0; k * k], vec![0.0; k * k * d1]);
    for (i, x) in grid.iter().enumerate() {
        for (s, w) in yz.iter().enumerate() {
            let (y, z) = w.split_at(k);
            let idx = i * ny + s;
            let out = &mut fvals[idx * k..(idx + 1) * k];
            spec.driver.value(x, y, z, out);
            check_finite("f", out, x)?;
            spec.driver.fx(x, y, z, &mut fx);
            spec.driver.fy(x, y, z, &mut fy);
            spec.driver.fz(x, y, z, &mut fz);
            let dst = &mut dvals[idx * k * dm..(idx + 1) * k * dm];
            for c in 0..k {
                let row = &mut dst[c * dm..(c + 1) * dm];
                row[..d].copy_from_slice(&fx[c * d..(c + 1) * d]);
                row[d..d + k].copy_from_slice(&fy[c * k..(c + 1) * k]);
                row[d + k..].copy_from_slice(&fz[c * k * d1..(c + 1) * k * d1]);
            }
            check_finite("f partials", dst, x)?;
        }
    }
    let budget_x = (cfg.max_pairs / ny).max(1);
    let mut lip_x = 0.0f64;
    for s in 0..ny {
        let at = |i: usize| &fvals[(i * ny + s) * k..(i * ny + s + 1) * k];
        lip_x = lip_x.max(pair_sup(n, budget_x, cfg.seed.wrapping_add(100 + s as u64), |i, j| {
            dist(at(i), at(j)) / dist(&grid[i], &grid[j])
        }));
    }
    let joint = |idx: usize| -> Vec<f64> {
        let (i, s) = (idx / ny, idx % ny);
        grid[i].iter().chain(&yz[s]).copied().collect()
    };
    let f11 = pair_sup(n * ny, cfg.max_pairs, cfg.seed.wrapping_add(7), |a, b| {
        let da = &dvals[a * k * dm..(a + 1) * k * dm];
        let db = &dvals[b * k * dm..(b + 1) * k * dm];
        dist(da, db) / dist(&joint(a), &joint(b))
    });
    let f = FNorms { f0, lip_x, f01: f0 + lip_x, f11 };

    Ok(NormReport { g, f, psi, resolution: cfg.resolution, grid_points: n, yz_samples: ny, lower_bounds: true })
}
