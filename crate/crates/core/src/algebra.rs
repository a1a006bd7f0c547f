//! Structural operations on convolutional networks: realizing an MLP as a
//! CNN, composing CNNs, grouping many CNNs into fewer wide ones, and
//! assembling a list of CNNs into a single residual network whose output is
//! their sum.

use rayon::prelude::*;

use crate::calculus::{wiring, ScalarNet};
use crate::error::{shape, ForgeError, Result};
use crate::net::{
    conv_layer, fc_is_first_row_only, frobenius_dot, ConvResNetModel, FilterTensor, Matrix, MlpModel, ResidualBlockSpec,
};

/// A plain CNN: padding, conv/ReLU layers, fully connected readout.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnFunction {
    pub input_dim: usize,
    pub in_channels: usize,
    pub layers: Vec<(FilterTensor, Matrix)>,
    pub fc_weight: Matrix,
    pub fc_bias: f64,
    pub first_row_only: bool,
}

impl CnnFunction {
    pub fn new(
        input_dim: usize,
        in_channels: usize,
        layers: Vec<(FilterTensor, Matrix)>,
        fc_weight: Matrix,
        fc_bias: f64,
        first_row_only: bool,
    ) -> Result<Self> {
        let f = Self {
            input_dim,
            in_channels,
            layers,
            fc_weight,
            fc_bias,
            first_row_only,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let mut c = self.in_channels;
        for (f, b) in &self.layers {
            if f.in_channels() != c {
                return Err(shape("CnnFunction layer chain", c, f.in_channels()));
            }
            if b.shape() != (self.input_dim, f.out_channels()) {
                return Err(shape(
                    "CnnFunction bias",
                    format!("{}x{}", self.input_dim, f.out_channels()),
                    format!("{}x{}", b.rows(), b.cols()),
                ));
            }
            c = f.out_channels();
        }
        if self.fc_weight.shape() != (self.input_dim, c) {
            return Err(shape(
                "CnnFunction fc",
                format!("{}x{c}", self.input_dim),
                format!("{}x{}", self.fc_weight.rows(), self.fc_weight.cols()),
            ));
        }
        if self.first_row_only && !fc_is_first_row_only(&self.fc_weight) {
            return Err(ForgeError::NotFirstRowOnly);
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_dim {
            return Err(shape("CnnFunction input", self.input_dim, x.len()));
        }
        let mut z = Matrix::padded(x, self.in_channels);
        for (f, b) in &self.layers {
            z = conv_layer(f, b, &z)?;
        }
        Ok(frobenius_dot(&self.fc_weight, &z) + self.fc_bias)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Most channels produced by any layer.
    pub fn width(&self) -> usize {
        self.layers
            .iter()
            .map(|(f, _)| f.out_channels())
            .max()
            .unwrap_or(self.in_channels)
    }

    pub fn filter_width(&self) -> usize {
        self.layers.iter().map(|(f, _)| f.width()).max().unwrap_or(1)
    }

    pub fn kappa1(&self) -> f64 {
        self.layers
            .iter()
            .map(|(f, b)| f.max_abs().max(b.max_abs()))
            .fold(0.0, f64::max)
    }

    pub fn kappa2(&self) -> f64 {
        self.fc_weight.max_abs().max(self.fc_bias.abs())
    }

    fn out_channels(&self) -> usize {
        self.layers.last().map_or(self.in_channels, |(f, _)| f.out_channels())
    }
}

fn row_constant(rows: usize, values: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(rows, values.len());
    for i in 0..rows {
        for (j, &v) in values.iter().enumerate() {
            m.set(i, j, v);
        }
    }
    m
}

/// Realizes a scalar-valued MLP on R^D as a CNN with filters of width `k`.
///
/// The first ceil((D-1)/(k-1)) layers gather x_1..x_D into row 1 as
/// (ReLU(x_s), ReLU(-x_s)) channel pairs; the MLP then runs in row 1 with
/// single-tap filters and the readout uses row 1 only. Depth is at most
/// L + D, channels at most max(2D, widest hidden layer), and weight
/// magnitudes are those of the MLP.
pub fn mlp_to_cnn(mlp: &MlpModel, k: usize) -> Result<CnnFunction> {
    let d = mlp.input_dim();
    if k < 2 || k > d {
        return Err(ForgeError::Parameter(format!("filter width K={k} outside [2, D={d}]")));
    }
    if mlp.output_dim() != 1 {
        return Err(shape("mlp_to_cnn output", 1, mlp.output_dim()));
    }

    let mut layers = Vec::new();
    // largest shift currently held in row 1
    let mut held = 0usize;
    let mut first = true;
    while first || held < d - 1 {
        let next = if first {
            (k - 1).min(d - 1)
        } else {
            (held + k - 1).min(d - 1)
        };
        let in_ch = if first { 1 } else { 2 * (held + 1) };
        let mut entries = Vec::new();
        for s in 0..=next {
            for (sign, w) in [(0, 1.0), (1, -1.0)] {
                if first {
                    entries.push((2 * s + sign, s, 0, w));
                } else if s <= held {
                    entries.push((2 * s + sign, 0, 2 * s + sign, 1.0));
                } else {
                    entries.push((2 * s + sign, s - held, 2 * held + sign, 1.0));
                }
            }
        }
        let f = FilterTensor::from_entries(2 * (next + 1), k, in_ch, entries)?;
        layers.push((f, Matrix::zeros(d, 2 * (next + 1))));
        held = next;
        first = false;
    }

    let last = mlp.depth() - 1;
    let split_weights = |w: &Matrix| {
        let mut entries = Vec::new();
        for j in 0..w.rows() {
            for s in 0..w.cols() {
                let v = w.get(j, s);
                entries.push((j, 0, 2 * s, v));
                entries.push((j, 0, 2 * s + 1, -v));
            }
        }
        entries
    };

    let (fc_weight, fc_bias) = if last == 0 {
        let w = &mlp.weights[0];
        let mut fc = Matrix::zeros(d, 2 * d);
        for s in 0..d {
            fc.set(0, 2 * s, w.get(0, s));
            fc.set(0, 2 * s + 1, -w.get(0, s));
        }
        (fc, mlp.biases[0][0])
    } else {
        let w = &mlp.weights[0];
        let f = FilterTensor::from_entries(w.rows(), k, 2 * d, split_weights(w))?;
        layers.push((f, row_constant(d, &mlp.biases[0])));
        for l in 1..last {
            let w = &mlp.weights[l];
            let entries = (0..w.rows()).flat_map(|j| (0..w.cols()).map(move |c| (j, 0, c, w.get(j, c))));
            let f = FilterTensor::from_entries(w.rows(), k, w.cols(), entries)?;
            layers.push((f, row_constant(d, &mlp.biases[l])));
        }
        let w = &mlp.weights[last];
        let mut fc = Matrix::zeros(d, w.cols());
        for c in 0..w.cols() {
            fc.set(0, c, w.get(0, c));
        }
        (fc, mlp.biases[last][0])
    };
    CnnFunction::new(d, 1, layers, fc_weight, fc_bias, true)
}

/// f2 after f1, for f1: R^D -> R and f2 a CNN on the padded scalar input
/// (t, 0, ..., 0) of the same length D.
///
/// The readout of f1 is folded into the first layer of f2, so the depth is
/// exactly depth(f1) + depth(f2).
pub fn compose_cnn(f1: &CnnFunction, f2: &CnnFunction) -> Result<CnnFunction> {
    if !f1.first_row_only || !f2.first_row_only {
        return Err(ForgeError::NotFirstRowOnly);
    }
    if f1.input_dim != f2.input_dim {
        return Err(shape("compose_cnn input rows", f1.input_dim, f2.input_dim));
    }
    let d = f1.input_dim;
    if f2.layers.is_empty() {
        // f2 is affine in its padded input: a*t + c
        let a = f2.fc_weight.get(0, 0);
        let mut fc = f1.fc_weight.scale(a);
        for i in 1..d {
            for c in 0..fc.cols() {
                fc.set(i, c, 0.0);
            }
        }
        return CnnFunction::new(
            d,
            f1.in_channels,
            f1.layers.clone(),
            fc,
            a * f1.fc_bias + f2.fc_bias,
            true,
        );
    }

    let (f, b) = &f2.layers[0];
    let j1 = f1.out_channels();
    let w1: Vec<f64> = (0..j1).map(|c| f1.fc_weight.get(0, c)).collect();
    let mut entries = Vec::new();
    for (j, tap, inp, w) in f.entries() {
        if inp != 0 {
            continue;
        }
        for (c, &wc) in w1.iter().enumerate() {
            if wc != 0.0 {
                entries.push((j, tap, c, w * wc));
            }
        }
    }
    let merged = FilterTensor::from_entries(f.out_channels(), f.width(), j1, entries)?;
    let mut bias = b.clone();
    for i in 0..d {
        for j in 0..f.out_channels() {
            let reach: f64 = (0..f.width())
                .filter(|&tap| i + tap < d)
                .map(|tap| f.get(j, tap, 0))
                .sum();
            bias.set(i, j, b.get(i, j) + f1.fc_bias * reach);
        }
    }

    let mut layers = f1.layers.clone();
    layers.push((merged, bias));
    layers.extend(f2.layers[1..].iter().cloned());
    CnnFunction::new(d, f1.in_channels, layers, f2.fc_weight.clone(), f2.fc_bias, true)
}

fn same_architecture(cnns: &[CnnFunction]) -> Result<()> {
    let first = cnns
        .first()
        .ok_or_else(|| shape("architecture", "at least one CNN", 0))?;
    for c in cnns {
        if c.input_dim != first.input_dim || c.in_channels != first.in_channels {
            return Err(ForgeError::Heterogeneous(format!(
                "input {}x{} vs {}x{}",
                c.input_dim, c.in_channels, first.input_dim, first.in_channels
            )));
        }
        if c.filter_width() != first.filter_width() {
            return Err(ForgeError::Heterogeneous(format!(
                "filter width {} vs {}",
                c.filter_width(),
                first.filter_width()
            )));
        }
    }
    Ok(())
}

/// Groups `cnns` into ceil(n / c) wider CNNs, c = floor(group_width / J0),
/// each computing the sum of its members. Members of a group run side by
/// side on duplicated copies of the input.
pub fn parallel_sum(cnns: &[CnnFunction], group_width: usize) -> Result<Vec<CnnFunction>> {
    same_architecture(cnns)?;
    let depth = cnns[0].depth();
    if let Some(c) = cnns.iter().find(|c| c.depth() != depth) {
        return Err(ForgeError::Heterogeneous(format!("depth {} vs {depth}", c.depth())));
    }
    if depth == 0 {
        return Err(ForgeError::Heterogeneous(
            "parallel_sum needs at least one conv layer".into(),
        ));
    }
    let j0 = cnns.iter().map(CnnFunction::width).max().unwrap_or(1);
    if group_width < j0 {
        return Err(ForgeError::Parameter(format!(
            "group width {group_width} below member width {j0}"
        )));
    }
    let per_group = group_width / j0;
    cnns.chunks(per_group).map(group).collect()
}

fn group(members: &[CnnFunction]) -> Result<CnnFunction> {
    let d = members[0].input_dim;
    let depth = members[0].depth();
    let k = members[0].filter_width();
    let mut layers = Vec::with_capacity(depth);
    for l in 0..depth {
        let out: usize = members.iter().map(|m| m.layers[l].0.out_channels()).sum();
        let inp: usize = if l == 0 {
            members[0].in_channels
        } else {
            members.iter().map(|m| m.layers[l].0.in_channels()).sum()
        };
        let mut entries = Vec::new();
        let mut bias = Matrix::zeros(d, out);
        let (mut o0, mut i0) = (0, 0);
        for m in members {
            let (f, b) = &m.layers[l];
            for (j, tap, c, w) in f.entries() {
                entries.push((o0 + j, tap, if l == 0 { c } else { i0 + c }, w));
            }
            for i in 0..d {
                for j in 0..f.out_channels() {
                    bias.set(i, o0 + j, b.get(i, j));
                }
            }
            o0 += f.out_channels();
            i0 += f.in_channels();
        }
        layers.push((FilterTensor::from_entries(out, k, inp, entries)?, bias));
    }
    let total: usize = members.iter().map(CnnFunction::out_channels).sum();
    let mut fc = Matrix::zeros(d, total);
    let mut c0 = 0;
    let mut fc_bias = 0.0;
    for m in members {
        for i in 0..d {
            for c in 0..m.out_channels() {
                fc.set(i, c0 + c, m.fc_weight.get(i, c));
            }
        }
        c0 += m.out_channels();
        fc_bias += m.fc_bias;
    }
    let first_row_only = members.iter().all(|m| m.first_row_only);
    CnnFunction::new(d, members[0].in_channels, layers, fc, fc_bias, first_row_only)
}

/// One residual block per CNN. The state keeps the padded input in its
/// first channels and two accumulator channels after them; each block adds
/// ReLU(s f_i) and ReLU(-s f_i) to the accumulators and the readout returns
/// (acc+ - acc-) / s. The scale s = kappa1 / kappa2 keeps every conv weight
/// within kappa1, leaving kappa2 / kappa1 in the readout.
pub fn assemble_resnet(cnns: &[CnnFunction]) -> Result<ConvResNetModel> {
    same_architecture(cnns)?;
    if cnns.iter().any(|c| !c.first_row_only) {
        return Err(ForgeError::NotFirstRowOnly);
    }
    let d = cnns[0].input_dim;
    let c0 = cnns[0].in_channels;
    let channels = c0 + 2;
    let k = cnns[0].filter_width();
    let kappa1 = cnns.iter().map(CnnFunction::kappa1).fold(0.0, f64::max);
    let kappa2 = cnns.iter().map(CnnFunction::kappa2).fold(0.0, f64::max);
    let s = if kappa1 > 0.0 && kappa2 > 0.0 {
        kappa1 / kappa2
    } else {
        1.0
    };

    let mut blocks = Vec::with_capacity(cnns.len());
    for cnn in cnns {
        let mut filters = Vec::with_capacity(cnn.depth() + 1);
        let mut biases = Vec::with_capacity(cnn.depth() + 1);
        for (l, (f, b)) in cnn.layers.iter().enumerate() {
            if l == 0 {
                filters.push(FilterTensor::from_entries(f.out_channels(), k, channels, f.entries())?);
            } else {
                filters.push(f.clone());
            }
            biases.push(b.clone());
        }
        let width = cnn.out_channels();
        let feeds_from_state = cnn.layers.is_empty();
        let mut entries = Vec::new();
        for c in 0..width {
            let w = cnn.fc_weight.get(0, c);
            entries.push((c0, 0, c, s * w));
            entries.push((c0 + 1, 0, c, -(s * w)));
        }
        let in_ch = if feeds_from_state { channels } else { width };
        filters.push(FilterTensor::from_entries(channels, k, in_ch, entries)?);
        let mut bias = Matrix::zeros(d, channels);
        for i in 0..d {
            bias.set(i, c0, s * cnn.fc_bias);
            bias.set(i, c0 + 1, -(s * cnn.fc_bias));
        }
        biases.push(bias);
        blocks.push(ResidualBlockSpec::new(filters, biases)?);
    }
    let mut fc = Matrix::zeros(d, channels);
    fc.set(0, c0, 1.0 / s);
    fc.set(0, c0 + 1, -1.0 / s);
    ConvResNetModel::new(d, channels, blocks, fc, 0.0, true)
}

/// Realizes `count` scalar MLPs (built on demand by `term`) as one residual
/// network computing their sum: terms are padded to a common depth, turned
/// into CNNs with filters of width 2, grouped `per_group` at a time and
/// given one residual block per group.
pub fn sum_network<F>(count: usize, per_group: usize, term: F) -> Result<ConvResNetModel>
where
    F: Fn(usize) -> Result<MlpModel> + Sync,
{
    if count == 0 || per_group == 0 {
        return Err(ForgeError::Parameter(
            "sum_network needs at least one term and group".into(),
        ));
    }
    let starts: Vec<usize> = (0..count).step_by(per_group).collect();
    let groups: Vec<CnnFunction> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + per_group).min(count);
            let mlps = (start..end).map(&term).collect::<Result<Vec<_>>>()?;
            let depth = mlps.iter().map(MlpModel::depth).max().unwrap_or(1);
            let cnns = mlps
                .iter()
                .map(|m| mlp_to_cnn(&wiring::extend_to(m, depth)?, 2))
                .collect::<Result<Vec<_>>>()?;
            let j0 = cnns.iter().map(CnnFunction::width).max().unwrap_or(1);
            let mut grouped = parallel_sum(&cnns, per_group * j0)?;
            Ok(grouped.remove(0))
        })
        .collect::<Result<_>>()?;
    assemble_resnet(&groups)
}

/// Realizes a scalar network as a one-block residual network, padding the
/// input to length max(2, D) so filters of width 2 fit.
pub fn compile_scalar(net: &ScalarNet) -> Result<ConvResNetModel> {
    let cnn = scalar_to_cnn(net)?;
    assemble_resnet(&[cnn])
}

pub fn scalar_to_cnn(net: &ScalarNet) -> Result<CnnFunction> {
    let d = net.input_dim().max(2);
    let mlp = wiring::pad_inputs(&net.mlp, d)?;
    mlp_to_cnn(&mlp, 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{build_product2, build_square, build_trapezoid, psi};
    use crate::net::{audit_class, mlp_forward, resnet_forward};

    fn psi_reference() -> MlpModel {
        MlpModel::new(
            vec![
                Matrix::from_vec(4, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap(),
                Matrix::from_vec(1, 4, vec![1.0, -1.0, -1.0, 1.0]).unwrap(),
            ],
            vec![vec![2.0, 1.0, -1.0, -2.0], vec![0.0]],
        )
        .unwrap()
    }

    #[test]
    fn psi_mlp_as_cnn() {
        let mlp = psi_reference();
        let cnn = mlp_to_cnn(&mlp, 2).unwrap();
        for i in 0..1001 {
            let x = -3.0 + 6.0 * i as f64 / 1000.0;
            let want = mlp_forward(&mlp, &[x, 0.0]).unwrap()[0];
            assert!((cnn.forward(&[x, 0.0]).unwrap() - want).abs() <= 1e-9);
            assert!((want - psi(x)).abs() <= 1e-12);
        }
        assert!(cnn.depth() <= mlp.depth() + 2);
        assert!(cnn.width() <= 4 * mlp.width());
        assert!(cnn.first_row_only);
    }

    #[test]
    fn zero_mlp_gives_zero_cnn() {
        let mlp = MlpModel::new(
            vec![Matrix::zeros(3, 3), Matrix::zeros(1, 3)],
            vec![vec![0.0; 3], vec![0.0]],
        )
        .unwrap();
        let cnn = mlp_to_cnn(&mlp, 3).unwrap();
        assert_eq!(cnn.forward(&[0.3, -2.0, 5.0]).unwrap(), 0.0);
        assert!(mlp_to_cnn(&mlp, 4).is_err());
        assert!(mlp_to_cnn(&mlp, 1).is_err());
    }

    #[test]
    fn gather_with_wide_filters() {
        // affine map over five inputs, K = 3
        let w = Matrix::from_vec(1, 5, vec![1.0, -2.0, 3.0, 0.5, -1.5]).unwrap();
        let mlp = MlpModel::new(vec![w.clone()], vec![vec![0.25]]).unwrap();
        let cnn = mlp_to_cnn(&mlp, 3).unwrap();
        let x = [0.3, -0.7, 1.1, 2.0, -0.4];
        let want = w.mul_vec(&x)[0] + 0.25;
        assert!((cnn.forward(&x).unwrap() - want).abs() < 1e-12);
        assert_eq!(cnn.depth(), 2);
    }

    fn cnn_of(net: &ScalarNet) -> CnnFunction {
        scalar_to_cnn(net).unwrap()
    }

    #[test]
    fn compose_trapezoid_then_square() {
        let f1 = cnn_of(&build_trapezoid(1, 2).unwrap());
        let sq = build_square(1e-3, 1.0).unwrap();
        let f2 = cnn_of(&sq);
        let h = compose_cnn(&f1, &f2).unwrap();
        assert_eq!(h.depth(), f1.depth() + f2.depth());
        for i in 0..301 {
            let x = i as f64 / 300.0;
            let inner = f1.forward(&[x, 0.0]).unwrap();
            let want = f2.forward(&[inner, 0.0]).unwrap();
            assert!((h.forward(&[x, 0.0]).unwrap() - want).abs() <= 1e-9, "x={x}");
        }
    }

    #[test]
    fn compose_with_identity_readout() {
        let f1 = cnn_of(&build_trapezoid(0, 1).unwrap());
        let id = CnnFunction::new(
            2,
            1,
            vec![],
            {
                let mut m = Matrix::zeros(2, 1);
                m.set(0, 0, 1.0);
                m
            },
            0.0,
            true,
        )
        .unwrap();
        let h = compose_cnn(&f1, &id).unwrap();
        for x in [0.1, 0.4, 0.77] {
            assert_eq!(h.forward(&[x, 0.0]).unwrap(), f1.forward(&[x, 0.0]).unwrap());
        }
    }

    #[test]
    fn grouped_copies_sum() {
        let f = cnn_of(&build_trapezoid(1, 4).unwrap());
        let copies = vec![f.clone(); 4];
        let groups = parallel_sum(&copies, 2 * f.width()).unwrap();
        assert_eq!(groups.len(), 2);
        for x in [0.1, 0.2, 0.25, 0.31] {
            let total: f64 = groups.iter().map(|g| g.forward(&[x, 0.0]).unwrap()).sum();
            assert!((total - 4.0 * f.forward(&[x, 0.0]).unwrap()).abs() <= 1e-12);
        }
        for g in &groups {
            assert_eq!(g.kappa1(), f.kappa1());
        }
        let single = parallel_sum(&copies[..1], f.width()).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0], f);
        assert!(parallel_sum(&copies, f.width() - 1).is_err());
    }

    #[test]
    fn resnet_sums_trapezoids() {
        let a = cnn_of(&build_trapezoid(0, 2).unwrap());
        let b = cnn_of(&build_trapezoid(1, 2).unwrap());
        let net = assemble_resnet(&[a.clone(), b.clone()]).unwrap();
        for i in 0..101 {
            let x = i as f64 / 100.0;
            let want = a.forward(&[x, 0.0]).unwrap() + b.forward(&[x, 0.0]).unwrap();
            assert!((resnet_forward(&net, &[x, 0.0]).unwrap() - want).abs() <= 1e-9);
        }
        let p = audit_class(&net);
        assert_eq!(p.m, 2);
        let bound = a.kappa2().max(b.kappa2()) * (1.0f64).max(1.0 / a.kappa1().max(b.kappa1()));
        assert!(p.kappa2 <= bound + 1e-12);
        assert!(p.first_row_only);
    }

    #[test]
    fn resnet_of_product() {
        let net = build_product2(1e-3, 2.0).unwrap();
        let res = compile_scalar(&net).unwrap();
        assert_eq!(res.blocks.len(), 1);
        for &(x, y) in &[(0.3, -1.2), (1.9, 1.9), (0.0, 0.4), (-0.8, 0.0)] {
            let want = net.forward(&[x, y]).unwrap();
            assert!((resnet_forward(&res, &[x, y]).unwrap() - want).abs() <= 1e-9);
        }
        assert_eq!(resnet_forward(&res, &[0.0, 0.4]).unwrap(), 0.0);
    }

    #[test]
    fn assembly_requires_flag() {
        let mut f = cnn_of(&build_trapezoid(0, 1).unwrap());
        f.first_row_only = false;
        assert!(matches!(assemble_resnet(&[f]), Err(ForgeError::NotFirstRowOnly)));
    }
}
