//! Scalar building blocks: the trapezoid bump, the square network, the
//! multiplication network and bump-times-monomial networks.
//!
//! Every builder has two faces: a [`ScalarNet`] (an explicit ReLU MLP ready
//! for CNN realization) and a direct functional evaluator computing the same
//! function by formula. The two agree up to float reassociation.

pub mod wiring;

use crate::error::{ForgeError, Result};
use crate::net::{mlp_forward, relu, Matrix, MlpModel};

/// Trapezoid: 1 on |t| < 1, 2 - |t| on [1, 2], 0 beyond.
pub fn psi(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        1.0
    } else if a <= 2.0 {
        2.0 - a
    } else {
        0.0
    }
}

/// psi(3N(x - m/N)), evaluated in the same arithmetic order as the network.
pub fn trapezoid(m: usize, n: usize, x: f64) -> f64 {
    let t = 3.0 * n as f64 * x - 3.0 * m as f64;
    let s = relu(2.0 - relu(t) - relu(-t));
    s - relu(s - 1.0)
}

/// Dyadic piecewise-linear interpolant of u^2 on [0,1] at depth `m`,
/// u - sum_s g_s(u) / 4^s with g_s the s-fold tent map. Exact at the
/// breakpoints k 2^-m, error at most 2^(-2m-2), zero at zero.
pub fn sq_unit(u: f64, m: usize) -> f64 {
    let mut g = u;
    let mut acc = u;
    let mut p = 1.0;
    for s in 1..=m {
        if s > 1 {
            acc -= g * p;
        }
        g = tent(g);
        p *= 0.25;
    }
    acc - g * p
}

#[inline]
fn tent(g: f64) -> f64 {
    2.0 * relu(g) - 4.0 * relu(g - 0.5) + 2.0 * relu(g - 1.0)
}

/// Smallest depth meeting both the value and slope contracts of the
/// rescaled square x -> B^2 sq(|x|/B) on [-B, B].
pub fn square_depth(theta: f64, b: f64) -> usize {
    let mut m = 1;
    while b * b * 0.25f64.powi(m as i32) * 0.25 > theta || b * 0.5f64.powi(m as i32) > theta {
        m += 1;
    }
    m
}

/// Smallest depth whose value error 2^(-2m-2) on [0,1] is at most `theta`.
pub fn square_value_depth(theta: f64) -> usize {
    let mut m = 1;
    while 0.25f64.powi(m as i32) * 0.25 > theta {
        m += 1;
    }
    m
}

/// Smallest depth such that the product network on [-B,B]^2 has value error
/// at most B^2 4^-m and gradient error at most 2B 2^-m, both below `eta`.
///
/// With e_i in [0, 2^(-2m-2)] the square errors,
/// x*y - xtilde(x,y) = 2B^2 (e_1 - e_2 - e_3) lies in [-4B^2 2^(-2m-2), 2B^2 2^(-2m-2)];
/// the slope of each square interpolant is off by at most 2^-m and the
/// chain rule through |.|/(2B) contributes B per square.
pub fn product_depth(eta: f64, b: f64) -> usize {
    let mut m = 1;
    while b * b * 0.25f64.powi(m as i32) > eta || 2.0 * b * 0.5f64.powi(m as i32) > eta {
        m += 1;
    }
    m
}

/// Functional form of the multiplication network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProductApprox {
    pub depth: usize,
    pub box_bound: f64,
}

impl ProductApprox {
    pub fn new(eta: f64, box_bound: f64) -> Result<Self> {
        check_open_half("eta", eta)?;
        check_positive("B", box_bound)?;
        Ok(Self {
            depth: product_depth(eta, box_bound),
            box_bound,
        })
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let s = 1.0 / (2.0 * self.box_bound);
        let out = 2.0 * self.box_bound * self.box_bound;
        let a = sq_unit(relu((x + y) * s) + relu(-((x + y) * s)), self.depth);
        let b = sq_unit(relu(x * s) + relu(-(x * s)), self.depth);
        let c = sq_unit(relu(y * s) + relu(-(y * s)), self.depth);
        out * a - out * b - out * c
    }

    /// Value error bound B^2 4^-m.
    pub fn value_bound(&self) -> f64 {
        self.box_bound * self.box_bound * 0.25f64.powi(self.depth as i32)
    }
}

fn check_open_half(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 0.5) {
        return Err(ForgeError::Parameter(format!("{name} must lie in (0, 1/2), got {v}")));
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(ForgeError::Parameter(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

/// A ReLU MLP with the accuracy and input box it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarNet {
    pub mlp: MlpModel,
    /// Declared accuracy (0 for exact constructions).
    pub accuracy: f64,
    pub box_bound: f64,
    /// Depth of each square sub-network, 0 if none.
    pub square_depth: usize,
}

impl ScalarNet {
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        Ok(mlp_forward(&self.mlp, x)?[0])
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn depth(&self) -> usize {
        self.mlp.depth()
    }

    pub fn width(&self) -> usize {
        self.mlp.width()
    }
}

/// One scalar input t_i = w_i . x + b_i fed to a square interpolant and
/// weighted by `out` in the readout.
pub(crate) struct SquareTerm {
    pub(crate) w: Vec<f64>,
    pub(crate) b: f64,
    pub(crate) out: f64,
}

/// Several square interpolants of |t_i| * scale side by side, summed in the
/// readout. Unit u of term i sits at index u * terms + i, so matching terms
/// cancel exactly in the readout sum when their inputs agree.
pub(crate) fn square_bank(n_in: usize, terms: &[SquareTerm], scale: f64, m: usize) -> Result<MlpModel> {
    let k = terms.len();
    let mut weights = Vec::new();
    let mut biases = Vec::new();

    // |t| as ReLU(t) + ReLU(-t)
    let mut w = Matrix::zeros(2 * k, n_in);
    let mut b = vec![0.0; 2 * k];
    for (i, t) in terms.iter().enumerate() {
        for c in 0..n_in {
            w.set(i, c, t.w[c] * scale);
            w.set(k + i, c, -(t.w[c] * scale));
        }
        b[i] = t.b * scale;
        b[k + i] = -(t.b * scale);
    }
    weights.push(w);
    biases.push(b);

    // units per term: a = ReLU(g), b = ReLU(g - 1/2), c = ReLU(g - 1), acc
    let unit = |u: usize, i: usize| u * k + i;
    let mut w = Matrix::zeros(4 * k, 2 * k);
    let mut b = vec![0.0; 4 * k];
    for i in 0..k {
        for (u, shift) in [(0, 0.0), (1, -0.5), (2, -1.0), (3, 0.0)] {
            w.set(unit(u, i), i, 1.0);
            w.set(unit(u, i), k + i, 1.0);
            b[unit(u, i)] = shift;
        }
    }
    weights.push(w);
    biases.push(b);

    let mut p = 0.25;
    for _ in 2..=m {
        let mut w = Matrix::zeros(4 * k, 4 * k);
        let mut b = vec![0.0; 4 * k];
        for i in 0..k {
            for (u, shift) in [(0, 0.0), (1, -0.5), (2, -1.0)] {
                w.set(unit(u, i), unit(0, i), 2.0);
                w.set(unit(u, i), unit(1, i), -4.0);
                w.set(unit(u, i), unit(2, i), 2.0);
                b[unit(u, i)] = shift;
            }
            w.set(unit(3, i), unit(0, i), -2.0 * p);
            w.set(unit(3, i), unit(1, i), 4.0 * p);
            w.set(unit(3, i), unit(2, i), -2.0 * p);
            w.set(unit(3, i), unit(3, i), 1.0);
        }
        p *= 0.25;
        weights.push(w);
        biases.push(b);
    }

    let mut w = Matrix::zeros(1, 4 * k);
    for (i, t) in terms.iter().enumerate() {
        w.set(0, unit(0, i), -2.0 * p * t.out);
        w.set(0, unit(1, i), 4.0 * p * t.out);
        w.set(0, unit(2, i), -2.0 * p * t.out);
        w.set(0, unit(3, i), t.out);
    }
    weights.push(w);
    biases.push(vec![0.0]);
    MlpModel::new(weights, biases)
}

/// ReLU network equal to psi(3N(x - m/N)) for every real x.
///
/// Written as min(1, ReLU(2 - |t|)) so that it is exactly zero off the
/// support; weights are bounded by 3N.
pub fn build_trapezoid(m: usize, n: usize) -> Result<ScalarNet> {
    if n == 0 || m > n {
        return Err(ForgeError::Parameter(format!(
            "need 0 <= m <= N, N >= 1; got m={m}, N={n}"
        )));
    }
    let sn = 3.0 * n as f64;
    let sm = 3.0 * m as f64;
    let mlp = MlpModel::new(
        vec![
            Matrix::from_rows(&[vec![sn], vec![-sn]])?,
            Matrix::from_rows(&[vec![-1.0, -1.0]])?,
            Matrix::from_rows(&[vec![1.0], vec![1.0]])?,
            Matrix::from_rows(&[vec![1.0, -1.0]])?,
        ],
        vec![vec![-sm, sm], vec![2.0], vec![0.0, -1.0], vec![0.0]],
    )?;
    Ok(ScalarNet {
        mlp,
        accuracy: 0.0,
        box_bound: f64::INFINITY,
        square_depth: 0,
    })
}

/// ReLU network for x^2 on [-B, B]: B^2 sq(|x|/B) with value and slope
/// error at most `theta`.
pub fn build_square(theta: f64, b: f64) -> Result<ScalarNet> {
    check_open_half("theta", theta)?;
    check_positive("B", b)?;
    let m = square_depth(theta, b);
    let mlp = square_bank(
        1,
        &[SquareTerm {
            w: vec![1.0],
            b: 0.0,
            out: b * b,
        }],
        1.0 / b,
        m,
    )?;
    Ok(ScalarNet {
        mlp,
        accuracy: theta,
        box_bound: b,
        square_depth: m,
    })
}

/// Functional twin of [`build_square`].
pub fn square_eval(x: f64, theta: f64, b: f64) -> f64 {
    let m = square_depth(theta, b);
    let s = 1.0 / b;
    b * b * sq_unit(relu(x * s) + relu(-(x * s)), m)
}

pub(crate) fn product_mlp(p: &ProductApprox) -> Result<MlpModel> {
    let out = 2.0 * p.box_bound * p.box_bound;
    square_bank(
        2,
        &[
            SquareTerm {
                w: vec![1.0, 1.0],
                b: 0.0,
                out,
            },
            SquareTerm {
                w: vec![1.0, 0.0],
                b: 0.0,
                out: -out,
            },
            SquareTerm {
                w: vec![0.0, 1.0],
                b: 0.0,
                out: -out,
            },
        ],
        1.0 / (2.0 * p.box_bound),
        p.depth,
    )
}

/// Two-input multiplication network on [-B, B]^2 with value and gradient
/// error at most `eta` and exact zeros on the axes.
pub fn build_product2(eta: f64, b: f64) -> Result<ScalarNet> {
    let p = ProductApprox::new(eta, b)?;
    Ok(ScalarNet {
        mlp: product_mlp(&p)?,
        accuracy: eta,
        box_bound: b,
        square_depth: p.depth,
    })
}

/// phi_m(x) = prod_k psi(3N(x_k - m_k/N)).
pub fn bump_product(m: &[usize], n: usize, x: &[f64]) -> f64 {
    m.iter().zip(x).map(|(&mk, &xk)| trapezoid(mk, n, xk)).product()
}

pub fn monomial(v: &[usize], x: &[f64]) -> f64 {
    v.iter().zip(x).map(|(&vk, &xk)| xk.powi(vk as i32)).product()
}

/// Approximation of phi_m(x) x^v by a cascade of products: first the
/// monomial factors, then the trapezoid factors one coordinate at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct MonomialBump {
    pub m: Vec<usize>,
    pub v: Vec<usize>,
    pub n: usize,
    pub product: ProductApprox,
}

impl MonomialBump {
    pub fn new(m: &[usize], v: &[usize], n: usize, eps: f64, box_bound: f64) -> Result<Self> {
        if m.len() != v.len() || m.is_empty() {
            return Err(ForgeError::Parameter(format!(
                "multi-index lengths differ or are empty: m={m:?}, v={v:?}"
            )));
        }
        if n == 0 || m.iter().any(|&mk| mk > n) {
            return Err(ForgeError::Parameter(format!("m={m:?} outside {{0..{n}}}^D")));
        }
        if !(eps > 0.0 && eps < 1.0) {
            return Err(ForgeError::Parameter(format!("eps must lie in (0,1), got {eps}")));
        }
        let eta = eps.min(0.49);
        Ok(Self {
            m: m.to_vec(),
            v: v.to_vec(),
            n,
            product: ProductApprox::new(eta, box_bound)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// Coordinates repeated by exponent, in order.
    fn monomial_factors(&self) -> Vec<usize> {
        self.v
            .iter()
            .enumerate()
            .flat_map(|(k, &vk)| std::iter::repeat_n(k, vk))
            .collect()
    }

    /// Number of products in the cascade.
    pub fn product_count(&self) -> usize {
        self.monomial_factors().len().saturating_sub(1) + self.dim()
    }

    /// Values after each product of the cascade; the last one is the output.
    pub fn cascade(&self, x: &[f64]) -> Vec<f64> {
        let factors = self.monomial_factors();
        let mut out = Vec::with_capacity(self.product_count());
        let mut g = match factors.first() {
            None => 1.0,
            Some(&k) => x[k],
        };
        for &k in factors.iter().skip(1) {
            g = self.product.eval(g, x[k]);
            out.push(g);
        }
        for (k, &mk) in self.m.iter().enumerate() {
            g = self.product.eval(g, trapezoid(mk, self.n, x[k]));
            out.push(g);
        }
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        *self.cascade(x).last().expect("cascade has at least one product")
    }

    /// Exact target phi_m(x) x^v.
    pub fn target(&self, x: &[f64]) -> f64 {
        bump_product(&self.m, self.n, x) * monomial(&self.v, x)
    }

    pub fn to_scalar_net(&self) -> Result<ScalarNet> {
        Ok(ScalarNet {
            mlp: self.to_mlp()?,
            accuracy: self.product_count() as f64 * self.product.value_bound(),
            box_bound: self.product.box_bound,
            square_depth: self.product.depth,
        })
    }

    /// MLP realization. Stage by stage the state vector holds the running
    /// product, the coordinates still to be multiplied in and the trapezoid
    /// values still to be used.
    pub fn to_mlp(&self) -> Result<MlpModel> {
        let d = self.dim();
        let prod = product_mlp(&self.product)?;
        let lam = 2.0 * self.product.box_bound;
        let factors = self.monomial_factors();

        // stage 1 on raw x: running product seed, pending coordinates, trapezoids
        let mut first = Vec::new();
        first.push(match factors.first() {
            None => wiring::constant(d, &[1.0]),
            Some(&k) => wiring::select(d, &[k]),
        });
        for &k in factors.iter().skip(1) {
            first.push(wiring::select(d, &[k]));
        }
        for (k, &mk) in self.m.iter().enumerate() {
            let t = build_trapezoid(mk, self.n)?;
            first.push(wiring::precompose(&t.mlp, &wiring::select(d, &[k]).weights[0], &[0.0])?);
        }
        let mut net = wiring::parallel(&first)?;
        let mut pending = factors.len().saturating_sub(1) + d;
        let mut head_scale = 1.0;

        while pending > 0 {
            let width = 1 + pending;
            let mut stage = vec![wiring::precompose(
                &prod,
                &wiring::select(width, &[0, 1]).weights[0],
                &[0.0, 0.0],
            )?];
            for j in 2..width {
                stage.push(wiring::select(width, &[j]));
            }
            let stage = wiring::parallel(&stage)?;
            let mut scales = vec![1.0; width];
            scales[0] = head_scale;
            net = wiring::then(&net, &stage, &scales)?;
            head_scale = lam;
            pending -= 1;
        }
        Ok(net)
    }
}

/// Network approximating phi_m(x) x^v on (0,1)^D with products of
/// accuracy `eps` on the box [-B, B].
pub fn build_monomial_bump(m: &[usize], v: &[usize], n: usize, eps: f64, box_bound: f64) -> Result<ScalarNet> {
    MonomialBump::new(m, v, n, eps, box_bound)?.to_scalar_net()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psi_branches() {
        assert_eq!(psi(0.0), 1.0);
        assert_eq!(psi(1.5), 0.5);
        assert_eq!(psi(-1.5), 0.5);
        assert_eq!(psi(2.5), 0.0);
        assert_eq!(psi(1.0), 1.0);
    }

    #[test]
    fn trapezoid_examples() {
        let net = build_trapezoid(0, 1).unwrap();
        assert_eq!(net.forward(&[0.0]).unwrap(), 1.0);
        assert_eq!(net.forward(&[0.5]).unwrap(), 0.5);
        let net = build_trapezoid(2, 4).unwrap();
        assert_eq!(net.forward(&[0.5]).unwrap(), 1.0);
        assert_eq!(net.forward(&[0.9]).unwrap(), 0.0);
        assert!(build_trapezoid(5, 4).is_err());
    }

    #[test]
    fn trapezoid_matches_psi() {
        for n in [1, 2, 4, 8] {
            for m in 0..=n {
                let net = build_trapezoid(m, n).unwrap();
                for i in 0..200 {
                    let x = -0.5 + 2.0 * i as f64 / 199.0 + 1e-7 * std::f64::consts::SQRT_2;
                    let want = psi(3.0 * n as f64 * (x - m as f64 / n as f64));
                    let got = net.forward(&[x]).unwrap();
                    assert!((got - want).abs() <= 1e-12, "m={m} N={n} x={x}");
                    assert_eq!(got, trapezoid(m, n, x));
                }
            }
        }
    }

    #[test]
    fn sq_unit_is_exact_on_dyadics() {
        for m in 1..6 {
            let h = 0.5f64.powi(m as i32);
            for k in 0..=(1 << m) {
                let u = k as f64 * h;
                assert!((sq_unit(u, m) - u * u).abs() < 1e-15, "m={m} u={u}");
            }
            assert_eq!(sq_unit(0.0, m), 0.0);
        }
    }

    #[test]
    fn square_examples() {
        let net = build_square(0.1, 1.0).unwrap();
        assert_eq!(net.forward(&[0.0]).unwrap(), 0.0);
        assert_eq!(net.forward(&[0.5]).unwrap(), 0.25);
        let net = build_square(1e-3, 1.0).unwrap();
        let worst = (0..10_000)
            .map(|i| -1.0 + 2.0 * i as f64 / 9999.0)
            .map(|x| (net.forward(&[x]).unwrap() - x * x).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-3, "{worst}");
        assert!(build_square(0.7, 1.0).is_err());
        assert!(net.depth() as f64 <= 2.0 * (1e3f64).log2() + 4.0);
    }

    #[test]
    fn square_net_matches_functional() {
        for &(theta, b) in &[(1e-2, 1.0), (1e-4, 3.0)] {
            let net = build_square(theta, b).unwrap();
            for i in 0..101 {
                let x = -b + 2.0 * b * i as f64 / 100.0;
                let y = net.forward(&[x]).unwrap();
                assert!((y - square_eval(x, theta, b)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn product_examples() {
        let net = build_product2(1e-3, 1.0).unwrap();
        assert_eq!(net.forward(&[0.37, 0.0]).unwrap(), 0.0);
        assert_eq!(net.forward(&[0.0, -0.81]).unwrap(), 0.0);
        assert_eq!(net.forward(&[0.0, 0.0]).unwrap(), 0.0);
        assert!((net.forward(&[0.7, -0.3]).unwrap() + 0.21).abs() <= 1e-3);
        assert!(build_product2(0.0, 1.0).is_err());
    }

    #[test]
    fn monomial_bump_examples() {
        let g = MonomialBump::new(&[0], &[1], 1, 1e-3, 3.0).unwrap();
        let net = g.to_scalar_net().unwrap();
        let y = net.forward(&[0.2]).unwrap();
        assert!((y - 0.2).abs() < 1e-3, "{y}");
        assert!((g.eval(&[0.2]) - y).abs() < 1e-12);

        let g = MonomialBump::new(&[1, 2], &[0, 0], 4, 1e-3, 5.0).unwrap();
        let net = g.to_scalar_net().unwrap();
        let center = [0.25, 0.5];
        assert!((net.forward(&center).unwrap() - 1.0).abs() < 3e-3);
        // outside the bump support: exact zero
        assert_eq!(net.forward(&[0.25, 0.7]).unwrap(), 0.0);
        assert_eq!(g.eval(&[0.25, 0.7]), 0.0);
        assert_eq!(net.forward(&[0.9, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn monomial_bump_matches_functional() {
        let g = MonomialBump::new(&[2, 1], &[2, 1], 3, 1e-4, 6.0).unwrap();
        let net = g.to_mlp().unwrap();
        for i in 0..50 {
            let x = [0.5 + 0.3 * (i as f64 * 0.37).sin(), 0.3 + 0.2 * (i as f64 * 0.71).cos()];
            let a = mlp_forward(&net, &x).unwrap()[0];
            let b = g.eval(&x);
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            assert!((b - g.target(&x)).abs() <= g.product_count() as f64 * 1e-4);
        }
    }
}
