//! Approximation on embedded manifolds: a small kit of parametric
//! manifolds, an atlas of tangent-plane charts with a partition of unity,
//! chart-determination networks (squared distance followed by a clipped
//! ramp) and the pipeline summing per-chart Taylor networks.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::sum_network;
use crate::calculus::{
    product_mlp, sq_unit, square_bank, square_value_depth, wiring, MonomialBump, ProductApprox, ScalarNet, SquareTerm,
};
use crate::error::{ForgeError, Result};
use crate::metrics::GRID_SHIFT;
use crate::net::{audit_class, relu, resnet_forward, ConvResNetModel, Matrix, MlpModel, NetClassParams};
use crate::targets::TargetFunction;
use crate::taylor::{active_bumps, grid_resolution, taylor_coeffs_with, SurrogateCoefficients, TaylorMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ManifoldSpec {
    /// Unit circle in the first two coordinates of R^ambient.
    Circle { ambient: usize },
    /// Unit 2-sphere in R^3.
    Sphere,
    /// Flat torus (cos u, sin u, cos v, sin v) in R^4.
    Torus,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|t| t * t).sum::<f64>().sqrt()
}

fn dist2(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum()
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

impl ManifoldSpec {
    pub fn by_name(name: &str, ambient: usize) -> Result<Self> {
        match name {
            "circle" if ambient >= 2 => Ok(Self::Circle { ambient }),
            "sphere" if ambient == 3 => Ok(Self::Sphere),
            "torus" if ambient == 4 => Ok(Self::Torus),
            _ => Err(ForgeError::Parameter(format!(
                "unknown manifold \"{name}\" in R^{ambient} (circle: D >= 2, sphere: D = 3, torus: D = 4)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Circle { .. } => "circle",
            Self::Sphere => "sphere",
            Self::Torus => "torus",
        }
    }

    pub fn intrinsic_dim(&self) -> usize {
        match self {
            Self::Circle { .. } => 1,
            _ => 2,
        }
    }

    pub fn ambient_dim(&self) -> usize {
        match *self {
            Self::Circle { ambient } => ambient,
            Self::Sphere => 3,
            Self::Torus => 4,
        }
    }

    pub fn reach(&self) -> f64 {
        1.0
    }

    /// Bound on |x|_inf over the manifold.
    pub fn box_bound(&self) -> f64 {
        1.0
    }

    pub fn surface_area(&self) -> f64 {
        match self {
            Self::Circle { .. } => 2.0 * PI,
            Self::Sphere => 4.0 * PI,
            Self::Torus => 4.0 * PI * PI,
        }
    }

    pub fn point(&self, u: &[f64]) -> Vec<f64> {
        match *self {
            Self::Circle { ambient } => {
                let mut x = vec![0.0; ambient];
                x[0] = u[0].cos();
                x[1] = u[0].sin();
                x
            }
            Self::Sphere => vec![u[0].sin() * u[1].cos(), u[0].sin() * u[1].sin(), u[0].cos()],
            Self::Torus => vec![u[0].cos(), u[0].sin(), u[1].cos(), u[1].sin()],
        }
    }

    /// Columns d x(u) / d u_k.
    pub fn jacobian(&self, u: &[f64]) -> Vec<Vec<f64>> {
        match *self {
            Self::Circle { ambient } => {
                let mut c = vec![0.0; ambient];
                c[0] = -u[0].sin();
                c[1] = u[0].cos();
                vec![c]
            }
            Self::Sphere => vec![
                vec![u[0].cos() * u[1].cos(), u[0].cos() * u[1].sin(), -u[0].sin()],
                vec![-u[0].sin() * u[1].sin(), u[0].sin() * u[1].cos(), 0.0],
            ],
            Self::Torus => vec![
                vec![-u[0].sin(), u[0].cos(), 0.0, 0.0],
                vec![0.0, 0.0, -u[1].sin(), u[1].cos()],
            ],
        }
    }

    pub fn param_of(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Self::Circle { .. } => vec![x[1].atan2(x[0])],
            Self::Sphere => vec![x[2].clamp(-1.0, 1.0).acos(), x[1].atan2(x[0])],
            Self::Torus => vec![x[1].atan2(x[0]), x[3].atan2(x[2])],
        }
    }

    /// Distance-like residual of x from the manifold equations.
    pub fn residual(&self, x: &[f64]) -> f64 {
        match self {
            Self::Circle { .. } => (norm(&x[..2]) - 1.0).abs().max(norm(&x[2..])),
            Self::Sphere => (norm(x) - 1.0).abs(),
            Self::Torus => (norm(&x[..2]) - 1.0).abs().max((norm(&x[2..]) - 1.0).abs()),
        }
    }

    /// Orthonormal basis of the tangent space at a point of the manifold.
    pub fn tangent_frame(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let unit = |v: Vec<f64>| {
            let n = norm(&v);
            v.into_iter().map(|t| t / n).collect::<Vec<_>>()
        };
        match *self {
            Self::Circle { ambient } => {
                let mut t = vec![0.0; ambient];
                t[0] = -x[1];
                t[1] = x[0];
                vec![unit(t)]
            }
            Self::Sphere => {
                let n = unit(x.to_vec());
                let k = (0..3).min_by(|&a, &b| n[a].abs().total_cmp(&n[b].abs())).unwrap_or(0);
                let mut e = vec![0.0; 3];
                e[k] = 1.0;
                let proj = dot(&e, &n);
                let v1 = unit(e.iter().zip(&n).map(|(a, b)| a - proj * b).collect());
                let v2 = vec![
                    n[1] * v1[2] - n[2] * v1[1],
                    n[2] * v1[0] - n[0] * v1[2],
                    n[0] * v1[1] - n[1] * v1[0],
                ];
                vec![v1, v2]
            }
            Self::Torus => vec![unit(vec![-x[1], x[0], 0.0, 0.0]), unit(vec![0.0, 0.0, -x[3], x[2]])],
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            Self::Circle { .. } => self.point(&[rng.gen_range(-PI..PI)]),
            Self::Sphere => {
                let z: f64 = rng.gen_range(-1.0..1.0);
                let phi: f64 = rng.gen_range(-PI..PI);
                let s = (1.0 - z * z).sqrt();
                vec![s * phi.cos(), s * phi.sin(), z]
            }
            Self::Torus => self.point(&[rng.gen_range(-PI..PI), rng.gen_range(-PI..PI)]),
        }
    }

    /// A point of the manifold within roughly `radius` of `c`.
    pub fn sample_near(&self, c: &[f64], radius: f64, rng: &mut impl Rng) -> Vec<f64> {
        let spread = 1.2 * radius;
        match self {
            Self::Sphere => {
                let frame = self.tangent_frame(c);
                let ang: f64 = rng.gen_range(-PI..PI);
                let phi: f64 = rng.gen_range(0.0..spread);
                (0..3)
                    .map(|j| phi.cos() * c[j] + phi.sin() * (ang.cos() * frame[0][j] + ang.sin() * frame[1][j]))
                    .collect()
            }
            _ => {
                let u: Vec<f64> = self
                    .param_of(c)
                    .iter()
                    .map(|&t| t + rng.gen_range(-spread..spread))
                    .collect();
                self.point(&u)
            }
        }
    }

    /// Ordered dense samples driving the greedy covering.
    fn cover_samples(&self, inner: f64, seed: u64) -> Vec<Vec<f64>> {
        match self {
            Self::Circle { .. } => {
                let k = ((2.0 * PI / inner) * 200.0).ceil() as usize;
                (0..k)
                    .map(|i| self.point(&[-PI + 2.0 * PI * i as f64 / k as f64]))
                    .collect()
            }
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let k = ((60.0 * self.surface_area() / (inner * inner)) as usize).clamp(2000, 400_000);
                (0..k).map(|_| self.sample(&mut rng)).collect()
            }
        }
    }
}

/// Sampled lower bound of the reach: inf |y - x|^2 / (2 dist(y - x, T_x M)).
pub fn estimate_reach(spec: &ManifoldSpec, pairs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::INFINITY;
    for _ in 0..pairs {
        let x = spec.sample(&mut rng);
        let y = spec.sample_near(&x, 0.5, &mut rng);
        let diff: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
        let frame = spec.tangent_frame(&x);
        let mut normal = diff.clone();
        for v in &frame {
            let p = dot(&diff, v);
            for (n, vj) in normal.iter_mut().zip(v) {
                *n -= p * vj;
            }
        }
        let nd = norm(&normal);
        if nd > 1e-12 {
            best = best.min(dot(&diff, &diff) / (2.0 * nd));
        }
    }
    best
}

/// phi(x) = a V^T (x - c) + b on the ball U = B_r(c) of the manifold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chart {
    pub center: Vec<f64>,
    /// Orthonormal tangent vectors at the center (columns of V).
    pub frame: Vec<Vec<f64>>,
    pub scale: f64,
    pub shift: Vec<f64>,
    pub radius: f64,
}

impl Chart {
    pub fn new(spec: &ManifoldSpec, center: Vec<f64>, radius: f64) -> Self {
        let frame = spec.tangent_frame(&center);
        Self {
            shift: vec![0.5; frame.len()],
            frame,
            center,
            scale: 1.0 / (2.0 * radius),
            radius,
        }
    }

    /// The affine map without the membership check.
    pub fn project_raw(&self, x: &[f64]) -> Vec<f64> {
        self.frame
            .iter()
            .zip(&self.shift)
            .map(|(v, b)| {
                let t: f64 = v
                    .iter()
                    .zip(x)
                    .zip(&self.center)
                    .map(|((vj, xj), cj)| vj * (xj - cj))
                    .sum();
                self.scale * t + b
            })
            .collect()
    }

    /// The affine map as (A, c) with phi(x) = A x + c.
    pub fn affine(&self) -> (Matrix, Vec<f64>) {
        let dim = self.center.len();
        let mut a = Matrix::zeros(self.frame.len(), dim);
        let mut c = Vec::with_capacity(self.frame.len());
        for (k, v) in self.frame.iter().enumerate() {
            for j in 0..dim {
                a.set(k, j, self.scale * v[j]);
            }
            c.push(self.shift[k] - self.scale * dot(v, &self.center));
        }
        (a, c)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        dist2(x, &self.center) <= self.radius * self.radius * (1.0 + 1e-12)
    }
}

pub fn chart_project(chart: &Chart, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != chart.center.len() {
        return Err(crate::error::shape("chart_project", chart.center.len(), x.len()));
    }
    if !chart.contains(x) {
        return Err(ForgeError::ChartInversion(format!(
            "point at distance {:.6} outside chart radius {}",
            dist2(x, &chart.center).sqrt(),
            chart.radius
        )));
    }
    Ok(chart.project_raw(x))
}

/// Point of U_i with chart coordinates z, by the closed-form inverse of
/// each kit manifold.
pub fn chart_invert(chart: &Chart, spec: &ManifoldSpec, z: &[f64]) -> Result<Vec<f64>> {
    let w: Vec<f64> = z
        .iter()
        .zip(&chart.shift)
        .map(|(zk, b)| (zk - b) / chart.scale)
        .collect();
    let x = match spec {
        ManifoldSpec::Circle { .. } | ManifoldSpec::Torus => {
            if w.iter().any(|t| t.abs() > 1.0) {
                return Err(outside(z));
            }
            let u: Vec<f64> = spec
                .param_of(&chart.center)
                .iter()
                .zip(&w)
                .map(|(uc, t)| uc + t.asin())
                .collect();
            spec.point(&u)
        }
        ManifoldSpec::Sphere => {
            let s = 1.0 - dot(&w, &w);
            if s < 0.0 {
                return Err(outside(z));
            }
            (0..3)
                .map(|j| s.sqrt() * chart.center[j] + w[0] * chart.frame[0][j] + w[1] * chart.frame[1][j])
                .collect()
        }
    };
    if !chart.contains(&x) {
        return Err(outside(z));
    }
    Ok(x)
}

fn outside(z: &[f64]) -> ForgeError {
    ForgeError::ChartInversion(format!("z = {z:?} is not the image of a point of the chart ball"))
}

/// Newton iteration on the parametrization, started at the center.
pub fn chart_invert_newton(chart: &Chart, spec: &ManifoldSpec, z: &[f64]) -> Result<Vec<f64>> {
    let d = z.len();
    let mut u = spec.param_of(&chart.center);
    for _ in 0..60 {
        let x = spec.point(&u);
        let f: Vec<f64> = chart.project_raw(&x).iter().zip(z).map(|(p, t)| p - t).collect();
        if norm(&f) < 1e-15 {
            break;
        }
        let jac = spec.jacobian(&u);
        // J_F[k][l] = a V_k . dx/du_l
        let jf: Vec<Vec<f64>> = chart
            .frame
            .iter()
            .map(|v| jac.iter().map(|col| chart.scale * dot(v, col)).collect())
            .collect();
        let step = solve_small(&jf, &f)
            .ok_or_else(|| ForgeError::ChartInversion("singular Jacobian in Newton step".into()))?;
        for k in 0..d {
            u[k] -= step[k];
        }
    }
    let x = spec.point(&u);
    let resid = norm(
        &chart
            .project_raw(&x)
            .iter()
            .zip(z)
            .map(|(p, t)| p - t)
            .collect::<Vec<_>>(),
    );
    if !(resid < 1e-10) || !chart.contains(&x) {
        return Err(outside(z));
    }
    Ok(x)
}

fn solve_small(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    match b.len() {
        1 => (a[0][0] != 0.0).then(|| vec![b[0] / a[0][0]]),
        2 => {
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            (det.abs() > 1e-300).then(|| {
                vec![
                    (a[1][1] * b[0] - a[0][1] * b[1]) / det,
                    (a[0][0] * b[1] - a[1][0] * b[0]) / det,
                ]
            })
        }
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atlas {
    pub spec: ManifoldSpec,
    pub radius: f64,
    /// Partition supports have radius r/2.
    pub inner_radius: f64,
    pub charts: Vec<Chart>,
    /// Average number of chart balls containing a sampled point.
    pub mean_overlap: f64,
    pub max_overlap: usize,
}

impl Atlas {
    pub fn len(&self) -> usize {
        self.charts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.charts.is_empty()
    }

    /// ceil(SA / r~^d * T_d).
    pub fn count_bound(&self) -> usize {
        (self.spec.surface_area() / self.inner_radius.powi(self.spec.intrinsic_dim() as i32) * self.mean_overlap).ceil()
            as usize
    }

    fn bump(&self, i: usize, x: &[f64]) -> f64 {
        let s = 1.0 - dist2(x, &self.charts[i].center) / (self.inner_radius * self.inner_radius);
        if s > 0.0 {
            s * s * s
        } else {
            0.0
        }
    }

    /// rho_i(x); zero when x is in no inner ball.
    pub fn rho(&self, i: usize, x: &[f64]) -> f64 {
        let hi = self.bump(i, x);
        if hi == 0.0 {
            return 0.0;
        }
        let total: f64 = (0..self.len()).map(|j| self.bump(j, x)).sum();
        hi / total
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Greedy threshold as a fraction of the inner radius.
pub const COVER_SPACING: f64 = 0.85;

/// Greedy covering with chart radius r: centers on the manifold spaced so
/// that every sample lies inside some ball of radius r/2.
pub fn build_atlas(spec: &ManifoldSpec, r: f64, seed: u64) -> Result<Atlas> {
    let tau = spec.reach();
    if !(r > 0.0 && r < tau / 4.0) {
        return Err(ForgeError::Precondition(format!(
            "chart radius r = {r} must satisfy 0 < r < tau/4 = {}",
            tau / 4.0
        )));
    }
    let inner = r / 2.0;
    let mut centers: Vec<Vec<f64>> = Vec::new();
    let add_greedy = |centers: &mut Vec<Vec<f64>>, pts: &[Vec<f64>]| {
        let thr = (COVER_SPACING * inner).powi(2);
        for p in pts {
            if centers.iter().all(|c| dist2(c, p) > thr) {
                centers.push(p.clone());
            }
        }
    };
    add_greedy(&mut centers, &spec.cover_samples(inner, seed));

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let probes: Vec<Vec<f64>> = (0..10_000).map(|_| spec.sample(&mut rng)).collect();
    let mut covered = false;
    for _ in 0..5 {
        let missing: Vec<Vec<f64>> = probes
            .iter()
            .filter(|p| centers.iter().all(|c| dist2(c, p) >= inner * inner))
            .cloned()
            .collect();
        if missing.is_empty() {
            covered = true;
            break;
        }
        add_greedy(&mut centers, &missing);
    }
    if !covered {
        return Err(ForgeError::Covering(format!(
            "samples left uncovered after 5 rounds with {} charts",
            centers.len()
        )));
    }

    let counts: Vec<usize> = probes
        .iter()
        .map(|p| centers.iter().filter(|c| dist2(c, p) < r * r).count())
        .collect();
    let charts = centers.into_iter().map(|c| Chart::new(spec, c, r)).collect();
    Ok(Atlas {
        spec: *spec,
        radius: r,
        inner_radius: inner,
        charts,
        mean_overlap: counts.iter().sum::<usize>() as f64 / counts.len() as f64,
        max_overlap: counts.into_iter().max().unwrap_or(0),
    })
}

/// (rho_1(x), ..., rho_C(x)).
pub fn rho_weights(atlas: &Atlas, x: &[f64]) -> Result<Vec<f64>> {
    if atlas.spec.residual(x) > 1e-8 {
        return Err(ForgeError::Precondition("point is not on the manifold".into()));
    }
    let h: Vec<f64> = (0..atlas.len()).map(|i| atlas.bump(i, x)).collect();
    let total: f64 = h.iter().sum();
    if !(total > 0.0) {
        return Err(ForgeError::Covering(format!("no inner ball contains {x:?}")));
    }
    Ok(h.into_iter().map(|v| v / total).collect())
}

/// sum_j 4B^2 sq(|x_j - c_j| / 2B): squared distance to c with error at
/// most 4 B^2 D theta on [-B, B]^D, exactly zero at c.
pub fn build_sqdist_net(center: &[f64], theta: f64, b: f64) -> Result<ScalarNet> {
    if !(theta > 0.0 && theta < 0.5) {
        return Err(ForgeError::Parameter(format!(
            "theta must lie in (0, 1/2), got {theta}"
        )));
    }
    let dim = center.len();
    let m = square_value_depth(theta);
    let terms: Vec<SquareTerm> = (0..dim)
        .map(|j| {
            let mut w = vec![0.0; dim];
            w[j] = 1.0;
            SquareTerm {
                w,
                b: -center[j],
                out: 4.0 * b * b,
            }
        })
        .collect();
    Ok(ScalarNet {
        mlp: square_bank(dim, &terms, 1.0 / (2.0 * b), m)?,
        accuracy: 4.0 * b * b * dim as f64 * theta,
        box_bound: b,
        square_depth: m,
    })
}

/// Functional twin of [`build_sqdist_net`].
pub fn sqdist_eval(center: &[f64], theta: f64, b: f64, x: &[f64]) -> f64 {
    let m = square_value_depth(theta);
    let s = 1.0 / (2.0 * b);
    center
        .iter()
        .zip(x)
        .map(|(&c, &xj)| {
            let u = -c * s + s * xj;
            4.0 * b * b * sq_unit(relu(u) + relu(-u), m)
        })
        .sum()
}

/// Parameters of the clipped ramp 1_Delta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorParams {
    pub radius: f64,
    pub delta: f64,
    pub theta: f64,
    pub levels: u32,
    pub box_bound: f64,
    pub ambient_dim: usize,
}

impl IndicatorParams {
    /// theta = Delta / (16 B^2 D) and the fewest doubling levels w with
    /// (1 - 2^-w) T >= r^2 - Delta + 4B^2 D theta, T = r^2 - 4B^2 D theta.
    pub fn new(radius: f64, delta: f64, box_bound: f64, ambient_dim: usize) -> Result<Self> {
        let theta = delta / (16.0 * box_bound * box_bound * ambient_dim as f64);
        let mut p = Self {
            radius,
            delta,
            theta,
            levels: 1,
            box_bound,
            ambient_dim,
        };
        let slack = p.slack();
        let t = p.threshold();
        while (1.0 - 0.5f64.powi(p.levels as i32)) * t < radius * radius - delta + slack {
            p.levels += 1;
            if p.levels > 60 {
                return Err(ForgeError::Precondition(
                    "indicator level count does not converge".into(),
                ));
            }
        }
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 0.5) {
            return Err(ForgeError::Parameter(format!(
                "theta must lie in (0, 1/2), got {}",
                self.theta
            )));
        }
        if self.delta < 2.0 * self.slack() {
            return Err(ForgeError::Precondition(format!(
                "Delta = {} below 8 B^2 D theta = {}",
                self.delta,
                2.0 * self.slack()
            )));
        }
        if !(self.delta > 0.0 && self.delta < self.radius * self.radius) || self.threshold() <= 0.0 {
            return Err(ForgeError::Precondition(format!(
                "Delta = {} must lie in (0, r^2 = {})",
                self.delta,
                self.radius * self.radius
            )));
        }
        Ok(())
    }

    /// 4 B^2 D theta, the squared-distance error.
    pub fn slack(&self) -> f64 {
        4.0 * self.box_bound * self.box_bound * self.ambient_dim as f64 * self.theta
    }

    /// T = r^2 - 4 B^2 D theta: the ramp is zero from here on.
    pub fn threshold(&self) -> f64 {
        self.radius * self.radius - self.slack()
    }

    /// (1 - 2^-w) T: the ramp is one up to here.
    pub fn plateau(&self) -> f64 {
        (1.0 - 0.5f64.powi(self.levels as i32)) * self.threshold()
    }
}

/// min(1, 2^w ReLU(1 - a/T)) as ReLU(1 - a/T) followed by w layers of
/// s -> 2s - ReLU(2s - 1).
pub fn build_indicator(p: &IndicatorParams) -> Result<ScalarNet> {
    p.validate()?;
    let t = p.threshold();
    let mut weights = vec![
        Matrix::from_rows(&[vec![-1.0 / t]])?,
        Matrix::from_rows(&[vec![2.0], vec![2.0]])?,
    ];
    let mut biases = vec![vec![1.0], vec![0.0, -1.0]];
    for _ in 1..p.levels {
        weights.push(Matrix::from_rows(&[vec![2.0, -2.0], vec![2.0, -2.0]])?);
        biases.push(vec![0.0, -1.0]);
    }
    weights.push(Matrix::from_rows(&[vec![1.0, -1.0]])?);
    biases.push(vec![0.0]);
    Ok(ScalarNet {
        mlp: MlpModel::new(weights, biases)?,
        accuracy: 0.0,
        box_bound: f64::INFINITY,
        square_depth: 0,
    })
}

/// Functional twin of [`build_indicator`], same operation order.
pub fn indicator_eval(p: &IndicatorParams, a: f64) -> f64 {
    let s = relu(1.0 + (-1.0 / p.threshold()) * a);
    let (mut u1, mut u2) = (relu(2.0 * s), relu(-1.0 + 2.0 * s));
    for _ in 1..p.levels {
        let next = (relu(2.0 * u1 + -2.0 * u2), relu(-1.0 + 2.0 * u1 + -2.0 * u2));
        (u1, u2) = next;
    }
    u1 + -u2
}

/// Central-difference partial D^a g(y) with step h per order.
fn fd_derivative<G: Fn(&[f64]) -> f64>(g: &G, a: &[usize], y: &[f64], h: f64) -> f64 {
    match a.iter().position(|&ak| ak > 0) {
        None => g(y),
        Some(k) => {
            let mut lower = a.to_vec();
            lower[k] -= 1;
            let mut yp = y.to_vec();
            let mut ym = y.to_vec();
            yp[k] += h;
            ym[k] -= h;
            (fd_derivative(g, &lower, &yp, h) - fd_derivative(g, &lower, &ym, h)) / (2.0 * h)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifoldParams {
    pub mt: usize,
    pub jt: usize,
    pub compile: bool,
    pub seed: u64,
    pub mode: TaylorMode,
}

impl ManifoldParams {
    pub fn new(mt: usize, jt: usize) -> Self {
        Self {
            mt,
            jt,
            compile: true,
            seed: 0,
            mode: TaylorMode::Classical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldRecord {
    pub manifold: String,
    pub intrinsic_dim: usize,
    pub ambient_dim: usize,
    pub alpha: usize,
    pub mt: usize,
    pub jt: usize,
    pub n: usize,
    pub eta: f64,
    pub eps: f64,
    /// Accuracy of the product gating each term with its chart indicator.
    pub gate_accuracy: f64,
    pub transition: f64,
    /// Whether 2/N <= Delta/(4 c2 r) holds for the chosen Delta.
    pub spacing_holds: bool,
    /// Coefficients set to zero because their bump meets the band image.
    pub zeroed: usize,
    pub theta: f64,
    pub levels: u32,
    pub lower_lipschitz: f64,
    pub charts: usize,
    pub terms: usize,
    pub box_bound: f64,
    pub compile_gap: Option<f64>,
}

#[derive(Debug, Clone)]
struct ChartTerm {
    coeff: f64,
    bump: MonomialBump,
}

#[derive(Debug, Clone)]
struct ChartPart {
    coeffs: SurrogateCoefficients,
    terms: Vec<Vec<ChartTerm>>,
}

#[derive(Debug, Clone)]
pub struct ManifoldApproximator {
    pub record: ManifoldRecord,
    pub atlas: Atlas,
    pub indicator: IndicatorParams,
    gate: ProductApprox,
    parts: Vec<ChartPart>,
    pub network: Option<ConvResNetModel>,
    pub audit: Option<NetClassParams>,
}

/// (f rho_i) o phi_i^-1, extended by zero off the chart image.
fn pullback(atlas: &Atlas, i: usize, f: &impl Fn(&[f64]) -> f64, z: &[f64]) -> f64 {
    match chart_invert(&atlas.charts[i], &atlas.spec, z) {
        Ok(x) => {
            let rho = atlas.rho(i, &x);
            if rho == 0.0 {
                0.0
            } else {
                f(&x) * rho
            }
        }
        Err(_) => 0.0,
    }
}

/// Smallest ratio |phi^-1(z) - phi^-1(z')| / |z - z'| over sampled pairs.
fn lower_lipschitz(atlas: &Atlas, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::INFINITY;
    for chart in &atlas.charts {
        for _ in 0..50 {
            let x = atlas.spec.sample_near(&chart.center, chart.radius, &mut rng);
            let y = atlas.spec.sample_near(&chart.center, chart.radius, &mut rng);
            if !chart.contains(&x) || !chart.contains(&y) || x == y {
                continue;
            }
            let dz = dist2(&chart.project_raw(&x), &chart.project_raw(&y)).sqrt();
            best = best.min(dist2(&x, &y).sqrt() / dz);
        }
    }
    best
}

/// Seeded points of the manifold whose squared distance to the chart
/// center lies in [r^2 - Delta, r^2].
pub fn band_samples(atlas: &Atlas, i: usize, delta: f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let chart = &atlas.charts[i];
    let r2 = chart.radius * chart.radius;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count * 400 {
        if out.len() == count {
            break;
        }
        let x = atlas.spec.sample_near(&chart.center, chart.radius, &mut rng);
        let d2 = dist2(&x, &chart.center);
        if d2 >= r2 - delta && d2 <= r2 {
            out.push(x);
        }
    }
    out
}

pub fn build_manifold_approx(
    f: &TargetFunction,
    atlas: &Atlas,
    params: &ManifoldParams,
) -> Result<ManifoldApproximator> {
    let spec = atlas.spec;
    let (d, amb) = (spec.intrinsic_dim(), spec.ambient_dim());
    if f.dim() != amb {
        return Err(crate::error::shape("manifold target dimension", amb, f.dim()));
    }
    if params.mt == 0 || params.jt == 0 {
        return Err(ForgeError::Parameter("M~ and J~ must be positive".into()));
    }
    let n = grid_resolution(params.mt, params.jt, d);
    if n < 2 {
        return Err(ForgeError::Precondition(format!("N = {n} must be at least 2")));
    }
    let alpha = f.alpha;
    let r = atlas.radius;
    let c2 = lower_lipschitz(atlas, params.seed);
    let delta = (8.0 * c2 * r / n as f64).min(r * r / 4.0);
    let b = spec.box_bound();
    let indicator = IndicatorParams::new(r, delta, b, amb)?;

    let h = 1e-4 * r * atlas.charts[0].scale;
    let eval_f = |x: &[f64]| f.eval(x);
    let mut coeffs: Vec<SurrogateCoefficients> = (0..atlas.len())
        .map(|i| {
            taylor_coeffs_with(d, alpha, n, params.mode, |a, y| {
                fd_derivative(&|z: &[f64]| pullback(atlas, i, &eval_f, z), a, y, h)
            })
        })
        .collect::<Result<_>>()?;

    // bumps whose support meets the band image, where the indicator ramps
    // down, are zeroed; a material coefficient there means the partition
    // support reaches the band
    let reach = 2.0 / (3.0 * n as f64);
    let mut zeroed = 0;
    for (i, c) in coeffs.iter_mut().enumerate() {
        let band: Vec<Vec<f64>> = band_samples(atlas, i, delta, 400, params.seed.wrapping_add(i as u64))
            .iter()
            .map(|x| atlas.charts[i].project_raw(x))
            .collect();
        let tol = 1e-8 * c.max_abs().max(1.0);
        for idx in 0..c.values.len() {
            let m = c.m_of(idx);
            let hit = band.iter().any(|z| {
                z.iter()
                    .zip(&m)
                    .all(|(zk, &mk)| (zk - mk as f64 / n as f64).abs() < reach)
            });
            if !hit {
                continue;
            }
            let row = &mut c.values[idx];
            if row.iter().any(|v| v.abs() > tol) {
                return Err(ForgeError::Precondition(format!(
                    "spacing condition violated: chart {i}, bump {m:?} carries weight inside the indicator band (N = {n}, Delta = {delta:.3e})"
                )));
            }
            zeroed += row.iter().filter(|v| **v != 0.0).count();
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    let eta = (n as f64).powi(-(alpha as i32));
    let box_bound = (alpha + d + 1) as f64;
    let n_v = coeffs[0].exponents.len();
    let n_prod = alpha - 1 + d;
    let max_c = coeffs.iter().map(SurrogateCoefficients::max_abs).fold(0.0, f64::max);
    let eps =
        eta / ((1usize << d) as f64 * n_v as f64 * n_prod as f64 * max_c.max(1.0) * atlas.max_overlap.max(1) as f64);
    let gate_accuracy = (n as f64).powi(-((alpha + d + 1) as i32)).clamp(1e-10, 0.49);
    let gate = ProductApprox::new(gate_accuracy, box_bound)?;

    let mut terms_total = 0;
    let parts: Vec<ChartPart> = coeffs
        .into_iter()
        .map(|c| {
            let mut terms = vec![Vec::new(); c.grid_size()];
            for (idx, row) in c.values.iter().enumerate() {
                let m = c.m_of(idx);
                for (v, &coeff) in c.exponents.iter().zip(row) {
                    if coeff != 0.0 {
                        terms[idx].push(ChartTerm {
                            coeff,
                            bump: MonomialBump::new(&m, v, n, eps.min(0.49), box_bound)?,
                        });
                        terms_total += 1;
                    }
                }
            }
            Ok(ChartPart { coeffs: c, terms })
        })
        .collect::<Result<_>>()?;

    let record = ManifoldRecord {
        manifold: spec.name().into(),
        intrinsic_dim: d,
        ambient_dim: amb,
        alpha,
        mt: params.mt,
        jt: params.jt,
        n,
        eta,
        eps,
        gate_accuracy,
        transition: delta,
        spacing_holds: 2.0 / n as f64 <= delta / (4.0 * c2 * r),
        zeroed,
        theta: indicator.theta,
        levels: indicator.levels,
        lower_lipschitz: c2,
        charts: atlas.len(),
        terms: terms_total,
        box_bound,
        compile_gap: None,
    };
    let mut approx = ManifoldApproximator {
        record,
        atlas: atlas.clone(),
        indicator,
        gate,
        parts,
        network: None,
        audit: None,
    };
    if params.compile && terms_total > 0 {
        let flat: Vec<(usize, &ChartTerm)> = approx
            .parts
            .iter()
            .enumerate()
            .flat_map(|(i, p)| p.terms.iter().flatten().map(move |t| (i, t)))
            .collect();
        let net = sum_network(flat.len(), params.jt, |k| approx.term_mlp(flat[k].0, flat[k].1))?;
        approx.audit = Some(audit_class(&net));
        approx.network = Some(net);
        approx.check_compiled(100, 1e-8, params.seed)?;
    }
    Ok(approx)
}

impl ManifoldApproximator {
    pub fn chart_coefficients(&self, i: usize) -> &SurrogateCoefficients {
        &self.parts[i].coeffs
    }

    pub fn chart_term_count(&self, i: usize) -> usize {
        self.parts[i].terms.iter().map(Vec::len).sum()
    }

    /// 1_Delta(d~^2_i(x)).
    pub fn chart_indicator(&self, i: usize, x: &[f64]) -> f64 {
        let a = sqdist_eval(
            &self.atlas.charts[i].center,
            self.indicator.theta,
            self.indicator.box_bound,
            x,
        );
        indicator_eval(&self.indicator, a)
    }

    /// sum_{m,v} c_{i,m,v} x~(g~_{m,v}(phi_i(x)), 1~_i(x)).
    pub fn chart_value(&self, i: usize, x: &[f64]) -> f64 {
        let part = &self.parts[i];
        let gate = self.chart_indicator(i, x);
        if gate == 0.0 {
            return 0.0;
        }
        let z = self.atlas.charts[i].project_raw(x);
        let mut total = 0.0;
        for m in active_bumps(self.record.n, &z) {
            for t in &part.terms[part.coeffs.index_of(&m)] {
                total += t.coeff * self.gate.eval(t.bump.eval(&z), gate);
            }
        }
        total
    }

    pub fn functional(&self, x: &[f64]) -> f64 {
        (0..self.parts.len()).map(|i| self.chart_value(i, x)).sum()
    }

    pub fn compiled(&self, x: &[f64]) -> Result<f64> {
        match &self.network {
            Some(net) => resnet_forward(net, x),
            None if self.record.terms == 0 => Ok(0.0),
            None => Err(ForgeError::Precondition(
                "approximator was built without a network".into(),
            )),
        }
    }

    /// Residual network of chart i alone.
    pub fn chart_network(&self, i: usize) -> Result<ConvResNetModel> {
        let terms: Vec<&ChartTerm> = self.parts[i].terms.iter().flatten().collect();
        sum_network(terms.len(), self.record.jt, |k| self.term_mlp(i, terms[k]))
    }

    fn term_mlp(&self, i: usize, t: &ChartTerm) -> Result<MlpModel> {
        let chart = &self.atlas.charts[i];
        let (a, c) = chart.affine();
        let g = wiring::precompose(&t.bump.to_mlp()?, &a, &c)?;
        let dist = build_sqdist_net(&chart.center, self.indicator.theta, self.indicator.box_bound)?;
        let ind = wiring::then(&dist.mlp, &build_indicator(&self.indicator)?.mlp, &[1.0])?;
        let inner = wiring::parallel(&[g, ind])?;
        let lam = 2.0 * t.bump.product.box_bound;
        let gated = wiring::then(&inner, &product_mlp(&self.gate)?, &[lam, 1.0])?;
        wiring::postcompose(&gated, &Matrix::filled(1, 1, t.coeff), &[0.0])
    }

    pub fn check_compiled(&mut self, points: usize, tol: f64, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0de);
        let mut worst = (0.0f64, Vec::new());
        for _ in 0..points {
            let x = self.atlas.spec.sample(&mut rng);
            let diff = (self.compiled(&x)? - self.functional(&x)).abs();
            if !(diff <= worst.0) {
                worst = (diff, x);
            }
        }
        self.record.compile_gap = Some(worst.0);
        if !(worst.0 <= tol) {
            return Err(ForgeError::CompileMismatch {
                max_diff: worst.0,
                at: worst.1,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifoldNorm {
    pub value: f64,
    /// Grid points whose difference probes left the chart image.
    pub skipped: usize,
}

/// sum_i |(e rho_i) o phi_i^-1|_{W^{k,inf}} over grids of the chart images,
/// with difference step 1e-6 in chart coordinates.
pub fn manifold_norm<G>(e: &G, atlas: &Atlas, k: usize, resolution: usize) -> Result<ManifoldNorm>
where
    G: Fn(&[f64]) -> f64 + Sync,
{
    if k > 1 {
        return Err(ForgeError::Parameter(format!("order k must be 0 or 1, got {k}")));
    }
    let d = atlas.spec.intrinsic_dim();
    let h = 1e-6;
    let grid: Vec<Vec<f64>> = (0..resolution.pow(d as u32))
        .map(|mut flat| {
            (0..d)
                .map(|_| {
                    let i = flat % resolution;
                    flat /= resolution;
                    (i as f64 + 0.5) / resolution as f64 + GRID_SHIFT
                })
                .collect()
        })
        .collect();
    let per_chart: Vec<(f64, usize)> = (0..atlas.len())
        .into_par_iter()
        .map(|i| {
            let chart = &atlas.charts[i];
            let value = |z: &[f64]| -> Option<f64> {
                let x = chart_invert(chart, &atlas.spec, z).ok()?;
                let rho = atlas.rho(i, &x);
                Some(if rho == 0.0 { 0.0 } else { e(&x) * rho })
            };
            let mut best = 0.0f64;
            let mut skipped = 0;
            for z in &grid {
                let Some(v) = value(z) else { continue };
                best = best.max(v.abs());
                if k == 1 {
                    for j in 0..d {
                        let mut zp = z.clone();
                        let mut zm = z.clone();
                        zp[j] += h;
                        zm[j] -= h;
                        match (value(&zp), value(&zm)) {
                            (Some(a), Some(b)) => best = best.max(((a - b) / (2.0 * h)).abs()),
                            _ => skipped += 1,
                        }
                    }
                }
            }
            (best, skipped)
        })
        .collect();
    Ok(ManifoldNorm {
        value: per_chart.iter().map(|p| p.0).sum(),
        skipped: per_chart.iter().map(|p| p.1).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::registry;

    fn circle() -> ManifoldSpec {
        ManifoldSpec::Circle { ambient: 2 }
    }

    #[test]
    fn circle_atlas_size_and_coverage() {
        let atlas = build_atlas(&circle(), 0.2, 1).unwrap();
        assert!((32..=80).contains(&atlas.len()), "{}", atlas.len());
        assert!(atlas.len() <= atlas.count_bound());
        assert!(build_atlas(&ManifoldSpec::Sphere, 0.3, 1).is_err());
    }

    #[test]
    fn chart_geometry() {
        let spec = circle();
        let chart = Chart::new(&spec, vec![1.0, 0.0], 0.2);
        assert_eq!(chart_project(&chart, &[1.0, 0.0]).unwrap(), vec![0.5]);
        let t: f64 = 0.1;
        let z = chart_project(&chart, &[t.cos(), t.sin()]).unwrap();
        assert!((z[0] - (0.5 + t.sin() / 0.4)).abs() < 1e-15);
        let x = chart_invert(&chart, &spec, &z).unwrap();
        assert!((x[0] - t.cos()).abs() < 1e-12 && (x[1] - t.sin()).abs() < 1e-12);
        let xn = chart_invert_newton(&chart, &spec, &z).unwrap();
        assert!(dist2(&x, &xn).sqrt() < 1e-10);
        assert!(chart_project(&chart, &[-1.0, 0.0]).is_err());
    }

    #[test]
    fn sphere_and_torus_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for spec in [ManifoldSpec::Sphere, ManifoldSpec::Torus] {
            let c = spec.sample(&mut rng);
            let chart = Chart::new(&spec, c.clone(), 0.2);
            for v in &chart.frame {
                assert!((norm(v) - 1.0).abs() < 1e-12);
            }
            for _ in 0..50 {
                let x = spec.sample_near(&c, 0.15, &mut rng);
                if !chart.contains(&x) {
                    continue;
                }
                let z = chart_project(&chart, &x).unwrap();
                assert!(z.iter().all(|t| (0.0..=1.0).contains(t)));
                let back = chart_invert(&chart, &spec, &z).unwrap();
                assert!(dist2(&back, &x).sqrt() < 1e-10);
            }
        }
    }

    #[test]
    fn reach_estimates() {
        for spec in [circle(), ManifoldSpec::Sphere, ManifoldSpec::Torus] {
            let tau = estimate_reach(&spec, 2000, 4);
            assert!((tau - 1.0).abs() < 0.01, "{spec:?}: {tau}");
        }
    }

    #[test]
    fn partition_sums_to_one() {
        let atlas = build_atlas(&circle(), 0.2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let x = atlas.spec.sample(&mut rng);
            let w = rho_weights(&atlas, &x).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (i, wi) in w.iter().enumerate() {
                if dist2(&x, &atlas.charts[i].center) >= atlas.inner_radius.powi(2) {
                    assert_eq!(*wi, 0.0);
                }
            }
        }
    }

    #[test]
    fn sqdist_examples() {
        let c = [0.0, 0.0];
        let net = build_sqdist_net(&c, 1e-4, 1.0).unwrap();
        assert_eq!(net.forward(&c).unwrap(), 0.0);
        assert!((net.forward(&[0.6, 0.8]).unwrap() - 1.0).abs() <= 8e-4);
        let c = [0.3, -0.2];
        let u = [0.11, 0.07];
        let plus = sqdist_eval(&c, 1e-4, 1.0, &[c[0] + u[0], c[1] + u[1]]);
        let minus = sqdist_eval(&c, 1e-4, 1.0, &[c[0] - u[0], c[1] - u[1]]);
        assert!((plus - minus).abs() < 1e-12);
    }

    #[test]
    fn indicator_branches() {
        let p = IndicatorParams::new(0.2, 0.01, 1.0, 3).unwrap();
        let net = build_indicator(&p).unwrap();
        assert_eq!(net.forward(&[0.0]).unwrap(), 1.0);
        assert_eq!(net.forward(&[0.04]).unwrap(), 0.0);
        let mid = 0.5 * (p.plateau() + p.threshold());
        assert!((net.forward(&[mid]).unwrap() - 0.5).abs() < 1e-10);
        for a in [0.0, 0.01, p.plateau(), mid, 0.039, 0.05] {
            assert_eq!(net.forward(&[a]).unwrap(), indicator_eval(&p, a));
        }
        assert!(IndicatorParams { theta: 0.01, ..p }.validate().is_err());
    }

    #[test]
    fn constant_on_circle() {
        let spec = ManifoldSpec::Circle { ambient: 3 };
        let atlas = build_atlas(&spec, 0.2, 1).unwrap();
        let f = crate::targets::constant_target(3, 2, 1.0);
        for n in [8, 32] {
            let a = build_manifold_approx(&f, &atlas, &ManifoldParams::new(n, 1)).unwrap();
            assert!(a.record.compile_gap.unwrap() <= 1e-8);
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let worst = (0..2000)
                .map(|_| (a.functional(&spec.sample(&mut rng)) - 1.0).abs())
                .fold(0.0, f64::max);
            assert!(worst * (n * n) as f64 <= 25.0, "N = {n}: {worst}");
        }
    }

    #[test]
    fn chart_nets_vanish_on_band() {
        let spec = ManifoldSpec::Circle { ambient: 3 };
        let atlas = build_atlas(&spec, 0.2, 1).unwrap();
        let f = registry("circle-sin", 3, 2).unwrap();
        let a = build_manifold_approx(&f, &atlas, &ManifoldParams::new(8, 1)).unwrap();
        for i in [0, 17] {
            let net = a.chart_network(i).unwrap();
            let band = band_samples(&atlas, i, a.record.transition, 200, 3);
            assert_eq!(band.len(), 200);
            for x in &band {
                assert_eq!(resnet_forward(&net, x).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn manifold_norm_examples() {
        let atlas = build_atlas(&circle(), 0.2, 1).unwrap();
        assert_eq!(manifold_norm(&|_: &[f64]| 0.0, &atlas, 1, 50).unwrap().value, 0.0);
        let one = manifold_norm(&|_: &[f64]| 1.0, &atlas, 0, 200).unwrap().value;
        assert!(one >= 1.0 && one <= atlas.len() as f64, "{one}");
    }

    #[test]
    fn surface_atlases_cover() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for spec in [ManifoldSpec::Sphere, ManifoldSpec::Torus] {
            let atlas = build_atlas(&spec, 0.2, 1).unwrap();
            assert!(atlas.len() <= atlas.count_bound());
            for c in &atlas.charts {
                for (j, u) in c.frame.iter().enumerate() {
                    for (k, v) in c.frame.iter().enumerate() {
                        let want = if j == k { 1.0 } else { 0.0 };
                        assert!((dot(u, v) - want).abs() < 1e-10);
                    }
                }
            }
            for _ in 0..500 {
                let w = rho_weights(&atlas, &spec.sample(&mut rng)).unwrap();
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
