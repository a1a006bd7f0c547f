//! Local Taylor surrogates on (0,1)^D and the Euclidean approximation
//! pipeline: f is replaced by sum_m sum_v c_{m,v} phi_m(x) x^v, each
//! bump-times-monomial term by its product network, and the whole sum is
//! compiled into a residual network.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::sum_network;
use crate::calculus::{bump_product, monomial, wiring, MonomialBump};
use crate::error::{ForgeError, Result};
use crate::net::{audit_class, resnet_forward, ConvResNetModel, Matrix, MlpModel, NetClassParams};
use crate::targets::{multi_indices, TargetFunction};

/// phi_m(x) = prod_k psi(3N(x_k - m_k/N)).
pub fn bump_weight(m: &[usize], n: usize, x: &[f64]) -> f64 {
    bump_product(m, n, x)
}

/// Grid indices m whose bump can be nonzero at x: floor(N x_k) and the
/// next one, per axis.
pub fn active_bumps(n: usize, x: &[f64]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::with_capacity(x.len())];
    for &xk in x {
        let j = (n as f64 * xk).floor() as i64;
        let cands: Vec<usize> = [j, j + 1]
            .into_iter()
            .filter(|&c| c >= 0 && c <= n as i64)
            .map(|c| c as usize)
            .collect();
        out = out
            .into_iter()
            .flat_map(|p| {
                cands.iter().map(move |&c| {
                    let mut q = p.clone();
                    q.push(c);
                    q
                })
            })
            .collect();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TaylorMode {
    /// Classical Taylor polynomial at the grid point m/N.
    #[default]
    Classical,
    /// Taylor polynomials averaged over the ball of radius 1/(3N) around
    /// m/N against the cut-off (1 - |z|^2/r^2)^(alpha+2).
    Averaged,
}

/// c_{m,v} for m in {0..N}^D and |v| <= alpha - 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateCoefficients {
    pub n: usize,
    pub alpha: usize,
    pub dim: usize,
    pub exponents: Vec<Vec<usize>>,
    /// values[index_of(m)][j] is the coefficient of x^exponents[j].
    pub values: Vec<Vec<f64>>,
}

impl SurrogateCoefficients {
    pub fn grid_size(&self) -> usize {
        (self.n + 1).pow(self.dim as u32)
    }

    pub fn index_of(&self, m: &[usize]) -> usize {
        m.iter().rev().fold(0, |acc, &mk| acc * (self.n + 1) + mk)
    }

    pub fn m_of(&self, mut idx: usize) -> Vec<usize> {
        (0..self.dim)
            .map(|_| {
                let mk = idx % (self.n + 1);
                idx /= self.n + 1;
                mk
            })
            .collect()
    }

    pub fn get(&self, m: &[usize], v: &[usize]) -> Option<f64> {
        let j = self.exponents.iter().position(|e| e == v)?;
        self.values.get(self.index_of(m)).map(|row| row[j])
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().flatten().fold(0.0, |a, &c| a.max(c.abs()))
    }

    /// Coefficients keyed "m|v", e.g. "1,2|0,1".
    pub fn keyed(&self) -> BTreeMap<String, f64> {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut out = BTreeMap::new();
        for (idx, row) in self.values.iter().enumerate() {
            let m = join(&self.m_of(idx));
            for (v, &c) in self.exponents.iter().zip(row) {
                out.insert(format!("{m}|{}", join(v)), c);
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            #[serde(rename = "N")]
            n: usize,
            alpha: usize,
            #[serde(rename = "D")]
            dim: usize,
            coefficients: &'a BTreeMap<String, f64>,
        }
        Ok(serde_json::to_string(&Doc {
            n: self.n,
            alpha: self.alpha,
            dim: self.dim,
            coefficients: &self.keyed(),
        })?)
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

/// Monomial coefficients of the classical Taylor polynomial of f at y:
/// c_v = sum_{a >= v} D^a f(y) / a! * prod_k C(a_k, v_k) (-y_k)^(a_k - v_k).
fn taylor_at<F: Fn(&[usize], &[f64]) -> f64>(deriv: &F, exps: &[Vec<usize>], y: &[f64]) -> Vec<f64> {
    let derivs: Vec<f64> = exps
        .iter()
        .map(|a| deriv(a, y) / a.iter().map(|&ak| factorial(ak)).product::<f64>())
        .collect();
    exps.iter()
        .map(|v| {
            exps.iter()
                .zip(&derivs)
                .filter(|(a, _)| a.iter().zip(v).all(|(ak, vk)| ak >= vk))
                .map(|(a, &d)| {
                    d * a
                        .iter()
                        .zip(v)
                        .zip(y)
                        .map(|((&ak, &vk), &yk)| binomial(ak, vk) * (-yk).powi((ak - vk) as i32))
                        .product::<f64>()
                })
                .sum()
        })
        .collect()
}

/// Quadrature nodes and normalized weights for the averaging cut-off.
fn averaging_rule(dim: usize, alpha: usize, r: f64) -> Vec<(Vec<f64>, f64)> {
    let q: usize = if dim <= 2 { 8 } else { 5 };
    let mut nodes = Vec::new();
    for flat in 0..q.pow(dim as u32) {
        let mut rest = flat;
        let z: Vec<f64> = (0..dim)
            .map(|_| {
                let i = rest % q;
                rest /= q;
                r * (-1.0 + (2 * i + 1) as f64 / q as f64)
            })
            .collect();
        let rho = z.iter().map(|t| t * t).sum::<f64>() / (r * r);
        if rho < 1.0 {
            nodes.push((z, (1.0 - rho).powi(alpha as i32 + 2)));
        }
    }
    let total: f64 = nodes.iter().map(|(_, w)| w).sum();
    nodes.into_iter().map(|(z, w)| (z, w / total)).collect()
}

pub fn taylor_coeffs(f: &TargetFunction, n: usize, mode: TaylorMode) -> Result<SurrogateCoefficients> {
    taylor_coeffs_with(f.dim(), f.alpha, n, mode, |a, y| f.partial(a, y))
}

/// Taylor coefficients at every grid point m/N from a partial derivative
/// oracle `deriv(a, y)`.
pub fn taylor_coeffs_with<F>(
    dim: usize,
    alpha: usize,
    n: usize,
    mode: TaylorMode,
    deriv: F,
) -> Result<SurrogateCoefficients>
where
    F: Fn(&[usize], &[f64]) -> f64 + Sync,
{
    let rule = match mode {
        TaylorMode::Classical => vec![(vec![0.0; dim], 1.0)],
        TaylorMode::Averaged => averaging_rule(dim, alpha, 1.0 / (3.0 * n.max(1) as f64)),
    };
    coefficients_with(dim, alpha, n, &rule, deriv)
}

fn coefficients_with<F>(
    dim: usize,
    alpha: usize,
    n: usize,
    rule: &[(Vec<f64>, f64)],
    deriv: F,
) -> Result<SurrogateCoefficients>
where
    F: Fn(&[usize], &[f64]) -> f64 + Sync,
{
    if n == 0 || alpha == 0 {
        return Err(ForgeError::Parameter(format!(
            "need N >= 1 and alpha >= 1, got N={n}, alpha={alpha}"
        )));
    }
    let exps = multi_indices(dim, alpha - 1);
    let mut out = SurrogateCoefficients {
        n,
        alpha,
        dim,
        exponents: exps.clone(),
        values: Vec::new(),
    };
    let values: Vec<Vec<f64>> = (0..out.grid_size())
        .into_par_iter()
        .map(|idx| {
            let center: Vec<f64> = out.m_of(idx).iter().map(|&mk| mk as f64 / n as f64).collect();
            let mut acc = vec![0.0; exps.len()];
            for (z, w) in rule {
                let y: Vec<f64> = center.iter().zip(z).map(|(c, z)| c + z).collect();
                for (a, c) in acc.iter_mut().zip(taylor_at(&deriv, &exps, &y)) {
                    *a += w * c;
                }
            }
            acc
        })
        .collect();
    if values.iter().flatten().any(|c| !c.is_finite()) {
        return Err(ForgeError::Precondition(
            "derivative evaluation produced a non-finite value".into(),
        ));
    }
    out.values = values;
    Ok(out)
}

/// f_hat(x) = sum over the active bumps of phi_m(x) sum_v c_{m,v} x^v.
pub fn surrogate_eval(coeffs: &SurrogateCoefficients, x: &[f64]) -> f64 {
    active_bumps(coeffs.n, x)
        .iter()
        .map(|m| {
            let phi = bump_weight(m, coeffs.n, x);
            if phi == 0.0 {
                return 0.0;
            }
            let row = &coeffs.values[coeffs.index_of(m)];
            phi * coeffs
                .exponents
                .iter()
                .zip(row)
                .map(|(v, &c)| c * monomial(v, x))
                .sum::<f64>()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EuclideanParams {
    /// Smoothness index of the error norm (recorded; the construction does
    /// not depend on it).
    pub s: f64,
    /// Integrability exponent, `None` for infinity (recorded).
    pub p: Option<u32>,
    pub mt: usize,
    pub jt: usize,
    pub mode: TaylorMode,
    /// Realize the residual network and check it against the functional
    /// evaluator.
    pub compile: bool,
}

impl EuclideanParams {
    pub fn new(mt: usize, jt: usize) -> Self {
        Self {
            s: 0.0,
            p: None,
            mt,
            jt,
            mode: TaylorMode::Classical,
            compile: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildRecord {
    pub dim: usize,
    pub alpha: usize,
    pub s: f64,
    pub p: Option<u32>,
    pub mt: usize,
    pub jt: usize,
    pub n: usize,
    pub eta: f64,
    pub eps: f64,
    pub box_bound: f64,
    pub product_depth: usize,
    pub terms: usize,
    pub max_coeff: f64,
    /// Largest |compiled - functional| over the check points.
    pub compile_gap: Option<f64>,
}

#[derive(Debug, Clone)]
struct Term {
    coeff: f64,
    bump: MonomialBump,
}

#[derive(Debug, Clone)]
pub struct ConstructedApproximator {
    pub record: BuildRecord,
    pub coeffs: SurrogateCoefficients,
    /// terms[index_of(m)] lists the nonzero c_{m,v} g_{m,v}.
    terms: Vec<Vec<Term>>,
    pub network: Option<ConvResNetModel>,
    pub audit: Option<NetClassParams>,
}

/// Largest N with N^D <= mt * jt.
pub fn grid_resolution(mt: usize, jt: usize, dim: usize) -> usize {
    let budget = (mt as u128) * (jt as u128);
    let mut n: u128 = 1;
    while (n + 1).pow(dim as u32) <= budget {
        n += 1;
    }
    n as usize
}

pub fn build_euclidean(f: &TargetFunction, params: &EuclideanParams) -> Result<ConstructedApproximator> {
    let dim = f.dim();
    if params.mt == 0 || params.jt == 0 {
        return Err(ForgeError::Parameter("M~ and J~ must be positive".into()));
    }
    if (params.mt as u128) * (params.jt as u128) < 1u128 << dim {
        return Err(ForgeError::Parameter(format!(
            "M~ J~ = {} is below 2^D = {}",
            params.mt * params.jt,
            1u64 << dim
        )));
    }
    if !(0.0..=1.0).contains(&params.s) {
        return Err(ForgeError::Parameter(format!("s must lie in [0,1], got {}", params.s)));
    }
    let n = grid_resolution(params.mt, params.jt, dim);
    let coeffs = taylor_coeffs(f, n, params.mode)?;
    build_from_coefficients(coeffs, params)
}

/// Builds the network sum from precomputed coefficients.
pub fn build_from_coefficients(
    coeffs: SurrogateCoefficients,
    params: &EuclideanParams,
) -> Result<ConstructedApproximator> {
    let (n, dim, alpha) = (coeffs.n, coeffs.dim, coeffs.alpha);
    let eta = (n as f64).powi(-(alpha as i32));
    let box_bound = (alpha + dim + 1) as f64;
    let max_coeff = coeffs.max_abs();
    let n_v = coeffs.exponents.len();
    let n_prod = alpha - 1 + dim;
    let eps = eta / ((1usize << dim) as f64 * n_v as f64 * n_prod as f64 * max_coeff.max(1.0));

    let mut terms: Vec<Vec<Term>> = vec![Vec::new(); coeffs.grid_size()];
    let mut count = 0;
    let mut depth = 0;
    for (idx, row) in coeffs.values.iter().enumerate() {
        let m = coeffs.m_of(idx);
        for (v, &c) in coeffs.exponents.iter().zip(row) {
            if c != 0.0 {
                let bump = MonomialBump::new(&m, v, n, eps, box_bound)?;
                depth = bump.product.depth;
                terms[idx].push(Term { coeff: c, bump });
                count += 1;
            }
        }
    }
    let record = BuildRecord {
        dim,
        alpha,
        s: params.s,
        p: params.p,
        mt: params.mt,
        jt: params.jt,
        n,
        eta,
        eps,
        box_bound,
        product_depth: depth,
        terms: count,
        max_coeff,
        compile_gap: None,
    };
    let mut approx = ConstructedApproximator {
        record,
        coeffs,
        terms,
        network: None,
        audit: None,
    };
    if params.compile && count > 0 {
        let net = approx.compile()?;
        approx.audit = Some(audit_class(&net));
        approx.network = Some(net);
        approx.check_compiled(100, 1e-8)?;
    }
    Ok(approx)
}

impl ConstructedApproximator {
    pub fn dim(&self) -> usize {
        self.record.dim
    }

    /// Direct evaluation of sum c_{m,v} g_{m,v}(x) over the active bumps.
    pub fn functional(&self, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for m in active_bumps(self.record.n, x) {
            for t in &self.terms[self.coeffs.index_of(&m)] {
                total += t.coeff * t.bump.eval(x);
            }
        }
        total
    }

    pub fn surrogate(&self, x: &[f64]) -> f64 {
        surrogate_eval(&self.coeffs, x)
    }

    pub fn compiled(&self, x: &[f64]) -> Result<f64> {
        match &self.network {
            Some(net) => resnet_forward(net, &pad_point(x, net.input_dim)),
            None if self.record.terms == 0 => Ok(0.0),
            None => Err(ForgeError::Precondition(
                "approximator was built without a network".into(),
            )),
        }
    }

    /// Realizes every term as a CNN, groups J~ of them per wide CNN and
    /// assembles one residual block per group.
    fn compile(&self) -> Result<ConvResNetModel> {
        let flat: Vec<&Term> = self.terms.iter().flatten().collect();
        let padded_dim = self.record.dim.max(2);
        sum_network(flat.len(), self.record.jt, |i| term_mlp(flat[i], padded_dim))
    }

    /// Compares the compiled network with the functional evaluator at
    /// seeded random points of (0,1)^D.
    pub fn check_compiled(&mut self, points: usize, tol: f64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut worst = (0.0f64, Vec::new());
        for _ in 0..points {
            let x: Vec<f64> = (0..self.dim()).map(|_| rng.gen::<f64>()).collect();
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

pub(crate) fn pad_point(x: &[f64], len: usize) -> Vec<f64> {
    let mut p = x.to_vec();
    p.resize(len.max(x.len()), 0.0);
    p
}

/// c * g_{m,v} on max(2, D) inputs.
fn term_mlp(t: &Term, padded_dim: usize) -> Result<MlpModel> {
    let mlp = t.bump.to_mlp()?;
    let mlp = wiring::postcompose(&mlp, &Matrix::filled(1, 1, t.coeff), &[0.0])?;
    wiring::pad_inputs(&mlp, padded_dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{constant_target, registry, Factor};

    #[test]
    fn partition_of_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 2, 4, 8] {
            for _ in 0..500 {
                let x: Vec<f64> = (0..2).map(|_| rng.gen::<f64>()).collect();
                let s: f64 = active_bumps(n, &x).iter().map(|m| bump_weight(m, n, &x)).sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn bump_examples() {
        assert_eq!(bump_weight(&[1, 2], 4, &[0.25, 0.5]), 1.0);
        assert_eq!(bump_weight(&[1], 4, &[0.5]), 0.0);
    }

    #[test]
    fn polynomial_reproduction() {
        let f = TargetFunction::new("sq", 3, vec![Factor::Power { power: 2 }, Factor::One], 1.0).unwrap();
        let c = taylor_coeffs(&f, 3, TaylorMode::Classical).unwrap();
        for &x in &[[0.1, 0.9], [0.52, 0.3], [0.77, 0.01]] {
            assert!((surrogate_eval(&c, &x) - x[0] * x[0]).abs() <= 1e-12);
        }
        let avg = taylor_coeffs(&f, 3, TaylorMode::Averaged).unwrap();
        assert!((surrogate_eval(&avg, &[0.4, 0.4]) - 0.16).abs() <= 1e-12);
    }

    #[test]
    fn constant_coefficients() {
        let c = taylor_coeffs(&constant_target(2, 2, 1.0), 2, TaylorMode::Classical).unwrap();
        assert_eq!(c.get(&[1, 1], &[0, 0]), Some(1.0));
        assert_eq!(c.get(&[1, 1], &[1, 0]), Some(0.0));
        assert!(c.keyed().contains_key("1,1|0,1"));
    }

    #[test]
    fn zero_target_builds_zero() {
        let f = constant_target(2, 2, 0.0);
        let a = build_euclidean(&f, &EuclideanParams::new(2, 2)).unwrap();
        assert_eq!(a.record.terms, 0);
        assert_eq!(a.functional(&[0.3, 0.6]), 0.0);
        assert_eq!(a.compiled(&[0.3, 0.6]).unwrap(), 0.0);
    }

    #[test]
    fn resolution_from_budget() {
        assert_eq!(grid_resolution(4, 4, 2), 4);
        assert_eq!(grid_resolution(3, 5, 2), 3);
        assert_eq!(grid_resolution(2, 4, 3), 2);
        assert!(build_euclidean(&constant_target(2, 2, 1.0), &EuclideanParams::new(1, 3)).is_err());
    }

    #[test]
    fn small_build_compiles() {
        let f = registry("sin2", 1, 2).unwrap();
        let a = build_euclidean(&f, &EuclideanParams::new(2, 2)).unwrap();
        assert_eq!(a.record.n, 4);
        assert!(a.record.compile_gap.unwrap() <= 1e-8);
        for &x in &[0.1, 0.45, 0.8] {
            assert!((a.functional(&[x]) - a.surrogate(&[x])).abs() <= a.record.eta);
        }
    }
}
