//! Target functions with analytic partial derivatives.
//!
//! Every target is a scaled product of one-dimensional factors, so
//! D^a f(x) = scale * prod_k f_k^{(a_k)}(x_k).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{ForgeError, Result};

pub const REGISTRY: [&str; 6] = [
    "sin2",
    "sinprod",
    "poly-xy",
    "gauss-bump",
    "circle-sin",
    "sphere-harmonic",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Factor {
    One,
    /// sin(freq * t)
    Sin {
        freq: f64,
    },
    /// exp(-(t - center)^2 / (2 width^2))
    Gauss {
        center: f64,
        width: f64,
    },
    /// t^power
    Power {
        power: u32,
    },
}

impl Factor {
    /// n-th derivative at t.
    pub fn derivative(&self, n: usize, t: f64) -> f64 {
        match *self {
            Factor::One => {
                if n == 0 {
                    1.0
                } else {
                    0.0
                }
            }
            Factor::Sin { freq } => freq.powi(n as i32) * (freq * t + n as f64 * PI / 2.0).sin(),
            Factor::Gauss { center, width } => {
                // d^n/du^n e^{-u^2} = (-1)^n H_n(u) e^{-u^2}, u = (t - c) / (sqrt2 w)
                let c = 1.0 / (2f64.sqrt() * width);
                let u = (t - center) * c;
                let (mut h0, mut h1) = (1.0, 2.0 * u);
                let h = match n {
                    0 => h0,
                    _ => {
                        for j in 1..n {
                            let h2 = 2.0 * u * h1 - 2.0 * j as f64 * h0;
                            h0 = h1;
                            h1 = h2;
                        }
                        h1
                    }
                };
                let sign = if n.is_multiple_of(2) { 1.0 } else { -1.0 };
                sign * h * c.powi(n as i32) * (-u * u).exp()
            }
            Factor::Power { power } => {
                let p = power as usize;
                if n > p {
                    return 0.0;
                }
                let falling: f64 = (0..n).map(|j| (p - j) as f64).product();
                falling * t.powi((p - n) as i32)
            }
        }
    }

    fn value(&self, t: f64) -> f64 {
        self.derivative(0, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetFunction {
    pub name: String,
    pub alpha: usize,
    pub factors: Vec<Factor>,
    pub scale: f64,
    /// Declared bound on the W^{alpha,inf} norm after scaling.
    pub norm_bound: f64,
}

/// All multi-indices of length `dim` with total order at most `max_order`,
/// grouped by increasing total order, lexicographic within each order.
pub fn multi_indices(dim: usize, max_order: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for total in 0..=max_order {
        let mut cur = vec![0; dim];
        fill(&mut cur, 0, total, &mut out);
    }
    out
}

fn fill(cur: &mut Vec<usize>, pos: usize, left: usize, out: &mut Vec<Vec<usize>>) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        return;
    }
    if cur.is_empty() {
        return;
    }
    for v in (0..=left).rev() {
        cur[pos] = v;
        fill(cur, pos + 1, left - v, out);
    }
    cur[pos] = 0;
}

impl TargetFunction {
    pub fn new(name: &str, alpha: usize, factors: Vec<Factor>, scale: f64) -> Result<Self> {
        if factors.is_empty() {
            return Err(ForgeError::Parameter("target needs at least one coordinate".into()));
        }
        if alpha == 0 {
            return Err(ForgeError::Parameter("alpha must be at least 1".into()));
        }
        let mut t = Self {
            name: name.to_string(),
            alpha,
            factors,
            scale,
            norm_bound: 0.0,
        };
        t.norm_bound = t.sobolev_sup_norm(alpha);
        Ok(t)
    }

    /// Divides by the estimated W^{alpha,inf} norm on (0,1)^D.
    pub fn normalized(mut self) -> Self {
        let n = self.sobolev_sup_norm(self.alpha);
        if n > 0.0 {
            self.scale /= n;
            self.norm_bound = 1.0;
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.factors.len()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.scale * self.factors.iter().zip(x).map(|(f, &t)| f.value(t)).product::<f64>()
    }

    pub fn partial(&self, a: &[usize], x: &[f64]) -> f64 {
        let mut v = self.scale;
        for ((f, &n), &t) in self.factors.iter().zip(a).zip(x) {
            if v == 0.0 {
                break;
            }
            v *= f.derivative(n, t);
        }
        v
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|j| {
                let mut a = vec![0; self.dim()];
                a[j] = 1;
                self.partial(&a, x)
            })
            .collect()
    }

    /// max over |a| <= order of sup |D^a f| on [0,1]^D; separability
    /// reduces each sup to a product of one-dimensional sups.
    pub fn sobolev_sup_norm(&self, order: usize) -> f64 {
        let per_axis: Vec<Vec<f64>> = self
            .factors
            .iter()
            .map(|f| (0..=order).map(|n| axis_sup(|t| f.derivative(n, t))).collect())
            .collect();
        multi_indices(self.dim(), order)
            .iter()
            .map(|a| self.scale.abs() * a.iter().enumerate().map(|(k, &n)| per_axis[k][n]).product::<f64>())
            .fold(0.0, f64::max)
    }

    /// sup of the Euclidean gradient norm on a grid of (0,1)^D.
    pub fn lipschitz_bound(&self) -> f64 {
        let per_axis: Vec<(f64, f64)> = self
            .factors
            .iter()
            .map(|f| (axis_sup(|t| f.value(t)), axis_sup(|t| f.derivative(1, t))))
            .collect();
        // |d_j f| <= scale * |f_j'| * prod_{k != j} |f_k|, bounded separately per axis
        let sq: f64 = (0..self.dim())
            .map(|j| {
                let v: f64 = per_axis
                    .iter()
                    .enumerate()
                    .map(|(k, &(val, der))| if k == j { der } else { val })
                    .product();
                (self.scale * v).powi(2)
            })
            .sum();
        sq.sqrt()
    }
}

fn axis_sup(g: impl Fn(f64) -> f64) -> f64 {
    const N: usize = 4000;
    (0..=N).map(|i| g(i as f64 / N as f64).abs()).fold(0.0, f64::max)
}

/// Builds a registry target on (0,1)^dim (or R^dim for the manifold ones).
pub fn registry(name: &str, dim: usize, alpha: usize) -> Result<TargetFunction> {
    let pad = |mut head: Vec<Factor>| -> Result<Vec<Factor>> {
        if head.len() > dim {
            return Err(ForgeError::Parameter(format!(
                "target {name} needs dim >= {}",
                head.len()
            )));
        }
        head.resize(dim, Factor::One);
        Ok(head)
    };
    let two_pi = 2.0 * PI;
    let t = match name {
        "sin2" => TargetFunction::new(
            name,
            alpha,
            pad(vec![Factor::Sin { freq: two_pi }])?,
            1.0 / (two_pi * two_pi),
        )?,
        "sinprod" => TargetFunction::new(name, alpha, vec![Factor::Sin { freq: two_pi }; dim], 1.0)?.normalized(),
        "poly-xy" => TargetFunction::new(
            name,
            alpha,
            pad(vec![Factor::Power { power: 1 }, Factor::Power { power: 1 }])?,
            1.0,
        )?
        .normalized(),
        "gauss-bump" => TargetFunction::new(
            name,
            alpha,
            vec![
                Factor::Gauss {
                    center: 0.5,
                    width: 0.25
                };
                dim
            ],
            1.0,
        )?
        .normalized(),
        "circle-sin" => TargetFunction::new(name, alpha, pad(vec![Factor::One, Factor::Power { power: 1 }])?, 1.0)?,
        "sphere-harmonic" => TargetFunction::new(
            name,
            alpha,
            pad(vec![Factor::Power { power: 1 }, Factor::Power { power: 1 }])?,
            1.0,
        )?,
        _ => {
            return Err(ForgeError::Parameter(format!(
                "unknown target \"{name}\" (known: {})",
                REGISTRY.join(", ")
            )))
        }
    };
    Ok(t)
}

pub fn constant_target(dim: usize, alpha: usize, c: f64) -> TargetFunction {
    TargetFunction {
        name: "constant".into(),
        alpha,
        factors: vec![Factor::One; dim],
        scale: c,
        norm_bound: c.abs(),
    }
}
