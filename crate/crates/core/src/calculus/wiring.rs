//! Combinators for assembling ReLU MLPs out of smaller ones.
//!
//! Sums inside every affine map run in column order. Values that cross a
//! layer boundary are split into adjacent (positive, negative) ReLU units,
//! so a structural zero contributes exact zeros downstream. The product
//! networks rely on this to vanish exactly when one factor is zero.

use crate::error::{shape, Result};
use crate::net::{Matrix, MlpModel};

pub fn affine(weight: Matrix, bias: Vec<f64>) -> Result<MlpModel> {
    MlpModel::new(vec![weight], vec![bias])
}

pub fn identity(n: usize) -> MlpModel {
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        w.set(i, i, 1.0);
    }
    MlpModel {
        weights: vec![w],
        biases: vec![vec![0.0; n]],
    }
}

/// Picks components `idx` out of an `n_in`-vector.
pub fn select(n_in: usize, idx: &[usize]) -> MlpModel {
    let mut w = Matrix::zeros(idx.len(), n_in);
    for (r, &c) in idx.iter().enumerate() {
        w.set(r, c, 1.0);
    }
    MlpModel {
        weights: vec![w],
        biases: vec![vec![0.0; idx.len()]],
    }
}

/// Constant map from `n_in` inputs.
pub fn constant(n_in: usize, value: &[f64]) -> MlpModel {
    MlpModel {
        weights: vec![Matrix::zeros(value.len(), n_in)],
        biases: vec![value.to_vec()],
    }
}

/// net(A x + c): folds an affine map into the first layer.
pub fn precompose(net: &MlpModel, a: &Matrix, c: &[f64]) -> Result<MlpModel> {
    let w1 = &net.weights[0];
    if w1.cols() != a.rows() || c.len() != a.rows() {
        return Err(shape("precompose", w1.cols(), a.rows()));
    }
    let mut out = net.clone();
    out.weights[0] = w1.matmul(a)?;
    let shift = w1.mul_vec(c);
    out.biases[0] = net.biases[0].iter().zip(shift).map(|(b, s)| b + s).collect();
    Ok(out)
}

/// M net(x) + c: folds an affine map into the last layer.
pub fn postcompose(net: &MlpModel, m: &Matrix, c: &[f64]) -> Result<MlpModel> {
    let last = net.weights.len() - 1;
    let wl = &net.weights[last];
    if m.cols() != wl.rows() || c.len() != m.rows() {
        return Err(shape("postcompose", wl.rows(), m.cols()));
    }
    let mut out = net.clone();
    out.weights[last] = m.matmul(wl)?;
    out.biases[last] = m
        .mul_vec(&net.biases[last])
        .into_iter()
        .zip(c)
        .map(|(a, b)| a + b)
        .collect();
    Ok(out)
}

/// outer(inner(x)) through one extra ReLU layer.
///
/// The last affine map of `inner` becomes a hidden layer holding
/// ReLU(+y_i / s_i) and ReLU(-y_i / s_i) side by side, and the first layer
/// of `outer` reads s_i (y_i+ - y_i-). The scales keep weight magnitudes
/// bounded when `inner` ends in a large readout.
pub fn then(inner: &MlpModel, outer: &MlpModel, scales: &[f64]) -> Result<MlpModel> {
    let k = inner.output_dim();
    if outer.input_dim() != k {
        return Err(shape("then", k, outer.input_dim()));
    }
    if scales.len() != k {
        return Err(shape("then scales", k, scales.len()));
    }
    let last = inner.weights.len() - 1;
    let wl = &inner.weights[last];
    let bl = &inner.biases[last];

    let mut hidden = Matrix::zeros(2 * k, wl.cols());
    let mut hidden_b = vec![0.0; 2 * k];
    for i in 0..k {
        let s = scales[i];
        for c in 0..wl.cols() {
            let w = wl.get(i, c) / s;
            hidden.set(2 * i, c, w);
            hidden.set(2 * i + 1, c, -w);
        }
        hidden_b[2 * i] = bl[i] / s;
        hidden_b[2 * i + 1] = -(bl[i] / s);
    }

    let b1 = &outer.weights[0];
    let mut first = Matrix::zeros(b1.rows(), 2 * k);
    for r in 0..b1.rows() {
        for i in 0..k {
            let w = b1.get(r, i) * scales[i];
            first.set(r, 2 * i, w);
            first.set(r, 2 * i + 1, -w);
        }
    }

    let mut weights = inner.weights[..last].to_vec();
    let mut biases = inner.biases[..last].to_vec();
    weights.push(hidden);
    biases.push(hidden_b);
    weights.push(first);
    biases.push(outer.biases[0].clone());
    weights.extend(outer.weights[1..].iter().cloned());
    biases.extend(outer.biases[1..].iter().cloned());
    MlpModel::new(weights, biases)
}

/// Adds identity layers at the end until `net` has `depth` affine maps.
pub fn extend_to(net: &MlpModel, depth: usize) -> Result<MlpModel> {
    let mut out = net.clone();
    let k = net.output_dim();
    let ones = vec![1.0; k];
    while out.depth() < depth {
        out = then(&out, &identity(k), &ones)?;
    }
    Ok(out)
}

/// Runs `nets` side by side on a shared input and concatenates their outputs.
pub fn parallel(nets: &[MlpModel]) -> Result<MlpModel> {
    let n_in = nets
        .first()
        .map(MlpModel::input_dim)
        .ok_or_else(|| shape("parallel", "at least one net", 0))?;
    if let Some(bad) = nets.iter().find(|n| n.input_dim() != n_in) {
        return Err(shape("parallel input", n_in, bad.input_dim()));
    }
    let depth = nets.iter().map(MlpModel::depth).max().unwrap_or(1);
    let padded: Vec<MlpModel> = nets.iter().map(|n| extend_to(n, depth)).collect::<Result<_>>()?;

    let mut weights = Vec::with_capacity(depth);
    let mut biases = Vec::with_capacity(depth);
    for layer in 0..depth {
        let rows: usize = padded.iter().map(|n| n.weights[layer].rows()).sum();
        let cols = if layer == 0 {
            n_in
        } else {
            padded.iter().map(|n| n.weights[layer].cols()).sum()
        };
        let mut w = Matrix::zeros(rows, cols);
        let mut b = Vec::with_capacity(rows);
        let (mut r0, mut c0) = (0, 0);
        for n in &padded {
            let wl = &n.weights[layer];
            for r in 0..wl.rows() {
                for c in 0..wl.cols() {
                    w.set(r0 + r, if layer == 0 { c } else { c0 + c }, wl.get(r, c));
                }
            }
            b.extend_from_slice(&n.biases[layer]);
            r0 += wl.rows();
            c0 += wl.cols();
        }
        weights.push(w);
        biases.push(b);
    }
    MlpModel::new(weights, biases)
}

/// Pads the input with trailing coordinates that the network ignores.
pub fn pad_inputs(net: &MlpModel, n_in: usize) -> Result<MlpModel> {
    let w1 = &net.weights[0];
    if n_in < w1.cols() {
        return Err(shape("pad_inputs", format!(">= {}", w1.cols()), n_in));
    }
    let mut w = Matrix::zeros(w1.rows(), n_in);
    for r in 0..w1.rows() {
        for c in 0..w1.cols() {
            w.set(r, c, w1.get(r, c));
        }
    }
    let mut out = net.clone();
    out.weights[0] = w;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::mlp_forward;

    fn square_ish() -> MlpModel {
        // |x| via two ReLUs
        MlpModel::new(
            vec![
                Matrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap(),
                Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            ],
            vec![vec![0.0, 0.0], vec![0.0]],
        )
        .unwrap()
    }

    #[test]
    fn then_composes() {
        let abs = square_ish();
        let shift = affine(Matrix::from_rows(&[vec![2.0]]).unwrap(), vec![-1.0]).unwrap();
        let net = then(&shift, &abs, &[4.0]).unwrap();
        for x in [-2.0, -0.3, 0.0, 0.5, 3.0] {
            let y = mlp_forward(&net, &[x]).unwrap()[0];
            assert!((y - (2.0 * x - 1.0f64).abs()).abs() < 1e-15, "x={x}");
        }
        assert_eq!(net.depth(), 3);
    }

    #[test]
    fn parallel_pads_depth() {
        let abs = square_ish();
        let id = identity(1);
        let net = parallel(&[abs, id]).unwrap();
        for x in [-1.5, 0.25, 2.0] {
            assert_eq!(mlp_forward(&net, &[x]).unwrap(), vec![f64::abs(x), x]);
        }
    }

    #[test]
    fn pre_and_post_compose() {
        let abs = square_ish();
        let a = Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let net = precompose(&abs, &a, &[0.5]).unwrap();
        let net = postcompose(&net, &Matrix::from_rows(&[vec![3.0]]).unwrap(), &[1.0]).unwrap();
        let y = mlp_forward(&net, &[0.25, 2.0]).unwrap()[0];
        assert!((y - (3.0 * 1.25 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn select_and_constant() {
        let s = select(3, &[2, 0]);
        assert_eq!(mlp_forward(&s, &[1.0, 2.0, 3.0]).unwrap(), vec![3.0, 1.0]);
        let c = constant(2, &[1.0]);
        assert_eq!(mlp_forward(&c, &[7.0, -7.0]).unwrap(), vec![1.0]);
    }
}
