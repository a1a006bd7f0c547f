//! Grid estimators for W^{k,p} norms (k in {0,1}), Hoelder quotients and
//! Lipschitz constants. All of them are lower bounds of the true
//! quantities, measured on kink-avoiding grids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};

/// Offset keeping grid points off the breakpoints k/(3N) of the networks.
pub const GRID_SHIFT: f64 = std::f64::consts::SQRT_2 * 1e-7;
/// Finite-difference step for piecewise-linear networks.
pub const NET_STEP: f64 = 1e-6;
/// Finite-difference step for smooth targets.
pub const SMOOTH_STEP: f64 = 1e-4;

/// Midpoint grid on (0,1)^D shifted by [`GRID_SHIFT`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalGrid {
    pub dim: usize,
    pub resolution: usize,
    pub fd_step: f64,
    pub points: Vec<Vec<f64>>,
}

impl EvalGrid {
    pub fn new(dim: usize, resolution: usize) -> Self {
        let total = resolution.pow(dim as u32);
        let points = (0..total)
            .map(|mut flat| {
                (0..dim)
                    .map(|_| {
                        let i = flat % resolution;
                        flat /= resolution;
                        (i as f64 + 0.5) / resolution as f64 + GRID_SHIFT
                    })
                    .collect()
            })
            .collect();
        Self {
            dim,
            resolution,
            fd_step: NET_STEP,
            points,
        }
    }

    pub fn with_step(mut self, h: f64) -> Self {
        self.fd_step = h;
        self
    }
}

/// Central difference (g(x + h e_j) - g(x - h e_j)) / 2h on [0,1]^D.
pub fn fd_partial<G: Fn(&[f64]) -> f64>(g: &G, x: &[f64], j: usize, h: f64) -> Result<f64> {
    if x[j] - h < 0.0 || x[j] + h > 1.0 {
        return Err(ForgeError::Precondition(format!(
            "difference probe x_{j} = {} +- {h} leaves [0,1]",
            x[j]
        )));
    }
    Ok(central(g, x, j, h))
}

pub(crate) fn central<G: Fn(&[f64]) -> f64>(g: &G, x: &[f64], j: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[j] += h;
    xm[j] -= h;
    (g(&xp) - g(&xm)) / (2.0 * h)
}

/// Value and first partials of g at every grid point.
fn sample<G: Fn(&[f64]) -> f64 + Sync>(g: &G, k: usize, grid: &EvalGrid) -> Result<Vec<Vec<f64>>> {
    grid.points
        .par_iter()
        .map(|x| {
            let mut row = vec![g(x)];
            if k == 1 {
                for j in 0..grid.dim {
                    row.push(fd_partial(g, x, j, grid.fd_step)?);
                }
            }
            Ok(row)
        })
        .collect()
}

/// W^{k,p} norm on the grid; `p = None` is the sup norm. For k = 1 the
/// value and first partials are combined as max (p = inf) or as the l^p
/// sum of their L^p norms.
pub fn grid_norm<G: Fn(&[f64]) -> f64 + Sync>(g: &G, k: usize, p: Option<u32>, grid: &EvalGrid) -> Result<f64> {
    if k > 1 {
        return Err(ForgeError::Parameter(format!("order k must be 0 or 1, got {k}")));
    }
    let rows = sample(g, k, grid)?;
    let comps = 1 + k * grid.dim;
    let norms: Vec<f64> = (0..comps)
        .map(|c| match p {
            None => rows.iter().map(|r| r[c].abs()).fold(0.0, f64::max),
            Some(p) => {
                let s: f64 = rows.iter().map(|r| r[c].abs().powi(p as i32)).sum();
                (s / rows.len() as f64).powf(1.0 / p as f64)
            }
        })
        .collect();
    Ok(match p {
        None => norms.into_iter().fold(0.0, f64::max),
        Some(p) => norms.iter().map(|n| n.powi(p as i32)).sum::<f64>().powf(1.0 / p as f64),
    })
}

pub type PointPair = (Vec<f64>, Vec<f64>);

/// Seeded pairs in (0,1)^D: half uniform, half at separations
/// 10^-U(1,4) in a random direction.
pub fn sample_pairs(dim: usize, count: usize, seed: u64) -> Vec<PointPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let x: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = if out.len() % 2 == 0 {
            (0..dim).map(|_| rng.gen::<f64>()).collect()
        } else {
            let r = 10f64.powf(-rng.gen_range(1.0..4.0));
            let u: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect();
            let len = u.iter().map(|t| t * t).sum::<f64>().sqrt().max(1e-12);
            x.iter().zip(&u).map(|(a, b)| a + r * b / len).collect()
        };
        if y.iter().all(|&t| t > 0.0 && t < 1.0) && x != y {
            out.push((x, y));
        }
    }
    out
}

fn distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

/// max over pairs of |g(x) - g(y)| / |x - y|^s.
pub fn holder_quotient<G: Fn(&[f64]) -> f64 + Sync>(g: &G, s: f64, pairs: &[PointPair]) -> Result<f64> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(ForgeError::Parameter(format!("s must lie in (0,1], got {s}")));
    }
    Ok(pairs
        .par_iter()
        .map(|(x, y)| (g(x) - g(y)).abs() / distance(x, y).powf(s))
        .reduce(|| 0.0, f64::max))
}

/// Larger of the pairwise Lipschitz quotient and the finite-difference
/// gradient norm at the probe points.
pub fn lipschitz_estimate<G: Fn(&[f64]) -> f64 + Sync>(g: &G, pairs: &[PointPair], probes: &[Vec<f64>], h: f64) -> f64 {
    let pairwise = pairs
        .par_iter()
        .map(|(x, y)| (g(x) - g(y)).abs() / distance(x, y))
        .reduce(|| 0.0, f64::max);
    let local = probes
        .par_iter()
        .map(|x| (0..x.len()).map(|j| central(g, x, j, h).powi(2)).sum::<f64>().sqrt())
        .reduce(|| 0.0, f64::max);
    pairwise.max(local)
}

/// Checks |g(x)-g(y)| / |x-y|^s <= (2 sup|g|)^(1-s) (max pairwise quotient)^s
/// on every pair; returns the worst ratio of left to right side.
pub fn interpolation_ratio<G: Fn(&[f64]) -> f64 + Sync>(g: &G, s: f64, pairs: &[PointPair]) -> f64 {
    let values: Vec<(f64, f64, f64)> = pairs.par_iter().map(|(x, y)| (g(x), g(y), distance(x, y))).collect();
    let sup = values.iter().map(|&(a, b, _)| a.abs().max(b.abs())).fold(0.0, f64::max);
    let lip = values.iter().map(|&(a, b, d)| (a - b).abs() / d).fold(0.0, f64::max);
    let rhs = (2.0 * sup).powf(1.0 - s) * lip.powf(s);
    values
        .iter()
        .map(|&(a, b, d)| {
            let lhs = (a - b).abs() / d.powf(s);
            if rhs > 0.0 {
                lhs / rhs
            } else if lhs == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

/// Least-squares slope of log(err) against log(n).
pub fn fit_slope(n: &[f64], err: &[f64]) -> Result<f64> {
    if n.len() != err.len() || n.len() < 2 {
        return Err(ForgeError::Parameter(
            "slope fit needs at least two (n, err) pairs".into(),
        ));
    }
    if err.iter().chain(n).any(|&v| !(v > 0.0)) {
        return Err(ForgeError::Parameter("slope fit needs positive values".into()));
    }
    let xs: Vec<f64> = n.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(cov / var)
}

/// Least-squares intercept c of log(err) = log(c) + slope log(n).
pub fn fit_constant(n: &[f64], err: &[f64], slope: f64) -> f64 {
    let k = n.len() as f64;
    (err.iter().zip(n).map(|(e, n)| e.ln() - slope * n.ln()).sum::<f64>() / k).exp()
}

/// One CSV row of a metric report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub target: String,
    pub n: usize,
    pub mj: usize,
    pub s_or_k: f64,
    pub p: String,
    pub value: f64,
    pub grid: usize,
    pub seed: u64,
}

impl MetricRow {
    pub const HEADER: &'static str = "target,N,MJ,s_or_k,p,value,grid,seed";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:e},{},{}",
            self.target, self.n, self.mj, self.s_or_k, self.p, self.value, self.grid, self.seed
        )
    }
}
