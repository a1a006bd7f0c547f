//! Tensor and network arithmetic for one-sided stride-one convolutional
//! residual networks, plus plain ReLU MLPs.

use serde::{Deserialize, Serialize};

use crate::error::{shape, ForgeError, Result};

#[inline]
pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Dense row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(shape("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Column vector with `x` in the first column and zeros elsewhere.
    pub fn padded(x: &[f64], cols: usize) -> Self {
        let mut m = Self::zeros(x.len(), cols);
        for (i, &v) in x.iter().enumerate() {
            m.data[i * cols] = v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(shape("Matrix::add", fmt_shape(self.shape()), fmt_shape(other.shape())));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// y = self * x
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).fold(0.0, |acc, (w, v)| acc + w * v))
            .collect()
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape("Matrix::matmul", self.cols, other.rows));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.get(i, k) * other.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        Ok(out)
    }
}

fn fmt_shape((r, c): (usize, usize)) -> String {
    format!("{r}x{c}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Tap {
    out: u32,
    tap: u32,
    inp: u32,
    w: f64,
}

/// Convolution filter with dims (output channels, taps, input channels).
///
/// Entries are stored sparsely, sorted by (output, tap, input); absent
/// entries are zero. The dense view is available through [`get`](Self::get)
/// and [`to_dense`](Self::to_dense).
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTensor {
    out_channels: usize,
    width: usize,
    in_channels: usize,
    taps: Vec<Tap>,
}

impl FilterTensor {
    pub fn zeros(out_channels: usize, width: usize, in_channels: usize) -> Result<Self> {
        if out_channels == 0 || width == 0 || in_channels == 0 {
            return Err(ForgeError::Parameter(format!(
                "filter dims must be positive, got [{out_channels},{width},{in_channels}]"
            )));
        }
        Ok(Self {
            out_channels,
            width,
            in_channels,
            taps: Vec::new(),
        })
    }

    /// Builds a filter from (out, tap, in, weight) triples, all zero-based.
    /// Later duplicates overwrite earlier ones; zeros are dropped.
    pub fn from_entries(
        out_channels: usize,
        width: usize,
        in_channels: usize,
        entries: impl IntoIterator<Item = (usize, usize, usize, f64)>,
    ) -> Result<Self> {
        let mut f = Self::zeros(out_channels, width, in_channels)?;
        let mut taps = Vec::new();
        for (j, k, l, w) in entries {
            if j >= out_channels || k >= width || l >= in_channels {
                return Err(shape(
                    "FilterTensor::from_entries",
                    format!("index < [{out_channels},{width},{in_channels}]"),
                    format!("[{j},{k},{l}]"),
                ));
            }
            taps.push(Tap {
                out: j as u32,
                tap: k as u32,
                inp: l as u32,
                w,
            });
        }
        taps.sort_by_key(|t| (t.out, t.tap, t.inp));
        // stable sort keeps insertion order among duplicates; keep the last
        let mut dedup: Vec<Tap> = Vec::with_capacity(taps.len());
        for t in taps {
            match dedup.last_mut() {
                Some(last) if (last.out, last.tap, last.inp) == (t.out, t.tap, t.inp) => *last = t,
                _ => dedup.push(t),
            }
        }
        dedup.retain(|t| t.w != 0.0);
        f.taps = dedup;
        Ok(f)
    }

    /// Row-major over (out, tap, in).
    pub fn from_dense(out_channels: usize, width: usize, in_channels: usize, data: &[f64]) -> Result<Self> {
        if data.len() != out_channels * width * in_channels {
            return Err(shape(
                "FilterTensor::from_dense",
                out_channels * width * in_channels,
                data.len(),
            ));
        }
        let entries =
            (0..out_channels).flat_map(|j| (0..width).flat_map(move |k| (0..in_channels).map(move |l| (j, k, l))));
        Self::from_entries(
            out_channels,
            width,
            in_channels,
            entries.map(|(j, k, l)| (j, k, l, data[(j * width + k) * in_channels + l])),
        )
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut data = vec![0.0; self.out_channels * self.width * self.in_channels];
        for t in &self.taps {
            data[(t.out as usize * self.width + t.tap as usize) * self.in_channels + t.inp as usize] = t.w;
        }
        data
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.out_channels, self.width, self.in_channels]
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn get(&self, j: usize, k: usize, l: usize) -> f64 {
        let key = (j as u32, k as u32, l as u32);
        self.taps
            .binary_search_by_key(&key, |t| (t.out, t.tap, t.inp))
            .map_or(0.0, |i| self.taps[i].w)
    }

    pub fn set(&mut self, j: usize, k: usize, l: usize, w: f64) {
        assert!(j < self.out_channels && k < self.width && l < self.in_channels);
        let key = (j as u32, k as u32, l as u32);
        match self.taps.binary_search_by_key(&key, |t| (t.out, t.tap, t.inp)) {
            Ok(i) if w == 0.0 => {
                self.taps.remove(i);
            }
            Ok(i) => self.taps[i].w = w,
            Err(_) if w == 0.0 => {}
            Err(i) => self.taps.insert(
                i,
                Tap {
                    out: key.0,
                    tap: key.1,
                    inp: key.2,
                    w,
                },
            ),
        }
    }

    /// Nonzero entries as (out, tap, in, weight).
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        self.taps
            .iter()
            .map(|t| (t.out as usize, t.tap as usize, t.inp as usize, t.w))
    }

    pub fn nnz(&self) -> usize {
        self.taps.len()
    }

    pub fn max_abs(&self) -> f64 {
        self.taps.iter().fold(0.0, |a, t| a.max(t.w.abs()))
    }

    /// Largest tap index actually used, plus one.
    pub fn used_width(&self) -> usize {
        self.taps.iter().map(|t| t.tap as usize + 1).max().unwrap_or(0)
    }

    fn accumulate(&self, z: &Matrix, y: &mut Matrix) {
        let d = z.rows();
        let cin = z.cols();
        let cout = y.cols();
        let zs = z.as_slice();
        let ys = &mut y.data;
        for t in &self.taps {
            let (j, k, l) = (t.out as usize, t.tap as usize, t.inp as usize);
            if k >= d {
                continue;
            }
            for i in 0..d - k {
                ys[i * cout + j] += t.w * zs[(i + k) * cin + l];
            }
        }
    }
}

/// Y_{i,j} = sum_k sum_l W_{j,k,l} Z_{i+k,l}, with Z taken as zero past row D.
pub fn conv_forward(filter: &FilterTensor, z: &Matrix) -> Result<Matrix> {
    if filter.in_channels != z.cols() {
        return Err(shape(
            "conv_forward",
            format!("input with {} channels", filter.in_channels),
            format!("{}x{}", z.rows(), z.cols()),
        ));
    }
    let mut y = Matrix::zeros(z.rows(), filter.out_channels);
    filter.accumulate(z, &mut y);
    Ok(y)
}

/// ReLU(conv(W, Z) + B).
pub fn conv_layer(filter: &FilterTensor, bias: &Matrix, z: &Matrix) -> Result<Matrix> {
    if filter.in_channels != z.cols() {
        return Err(shape(
            "conv_layer",
            format!("input with {} channels", filter.in_channels),
            format!("{}x{}", z.rows(), z.cols()),
        ));
    }
    if bias.shape() != (z.rows(), filter.out_channels) {
        return Err(shape(
            "conv_layer bias",
            fmt_shape((z.rows(), filter.out_channels)),
            fmt_shape(bias.shape()),
        ));
    }
    let mut y = bias.clone();
    filter.accumulate(z, &mut y);
    for v in &mut y.data {
        *v = relu(*v);
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlockSpec {
    pub filters: Vec<FilterTensor>,
    pub biases: Vec<Matrix>,
}

impl ResidualBlockSpec {
    pub fn new(filters: Vec<FilterTensor>, biases: Vec<Matrix>) -> Result<Self> {
        let b = Self { filters, biases };
        b.check_internal()?;
        Ok(b)
    }

    /// Block of one layer whose filters and biases are all zero.
    pub fn zero(rows: usize, channels: usize) -> Result<Self> {
        Self::new(
            vec![FilterTensor::zeros(channels, 1, channels)?],
            vec![Matrix::zeros(rows, channels)],
        )
    }

    pub fn depth(&self) -> usize {
        self.filters.len()
    }

    fn check_internal(&self) -> Result<()> {
        if self.filters.is_empty() || self.filters.len() != self.biases.len() {
            return Err(shape(
                "ResidualBlockSpec",
                "equal, nonzero filter and bias counts",
                format!("{} filters, {} biases", self.filters.len(), self.biases.len()),
            ));
        }
        for w in self.filters.windows(2) {
            if w[0].out_channels != w[1].in_channels {
                return Err(shape(
                    "ResidualBlockSpec layer chain",
                    w[0].out_channels,
                    w[1].in_channels,
                ));
            }
        }
        for (f, b) in self.filters.iter().zip(&self.biases) {
            if b.cols() != f.out_channels {
                return Err(shape("ResidualBlockSpec bias", f.out_channels, b.cols()));
            }
        }
        let first = self.filters[0].in_channels;
        let last = self.filters[self.filters.len() - 1].out_channels;
        if first != last {
            return Err(shape("ResidualBlockSpec shortcut", first, last));
        }
        Ok(())
    }

    pub fn validate(&self, rows: usize, channels: usize) -> Result<()> {
        self.check_internal()?;
        if self.filters[0].in_channels != channels {
            return Err(shape("ResidualBlockSpec input", channels, self.filters[0].in_channels));
        }
        for b in &self.biases {
            if b.rows() != rows {
                return Err(shape("ResidualBlockSpec bias rows", rows, b.rows()));
            }
        }
        Ok(())
    }
}

/// Z + ReLU(W_L * ... ReLU(W_1 * Z + B_1) ... + B_L).
pub fn block_forward(block: &ResidualBlockSpec, z: &Matrix) -> Result<Matrix> {
    block.validate(z.rows(), z.cols())?;
    let mut h = z.clone();
    for (f, b) in block.filters.iter().zip(&block.biases) {
        h = conv_layer(f, b, &h)?;
    }
    h.add(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvResNetModel {
    pub input_dim: usize,
    pub channels: usize,
    pub blocks: Vec<ResidualBlockSpec>,
    pub fc_weight: Matrix,
    pub fc_bias: f64,
    pub first_row_only: bool,
}

impl ConvResNetModel {
    pub fn new(
        input_dim: usize,
        channels: usize,
        blocks: Vec<ResidualBlockSpec>,
        fc_weight: Matrix,
        fc_bias: f64,
        first_row_only: bool,
    ) -> Result<Self> {
        let m = Self {
            input_dim,
            channels,
            blocks,
            fc_weight,
            fc_bias,
            first_row_only,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.channels == 0 {
            return Err(ForgeError::Parameter("input_dim and channels must be positive".into()));
        }
        for b in &self.blocks {
            b.validate(self.input_dim, self.channels)?;
        }
        if self.fc_weight.shape() != (self.input_dim, self.channels) {
            return Err(shape(
                "ConvResNetModel fc",
                fmt_shape((self.input_dim, self.channels)),
                fmt_shape(self.fc_weight.shape()),
            ));
        }
        if self.first_row_only && !fc_is_first_row_only(&self.fc_weight) {
            return Err(ForgeError::NotFirstRowOnly);
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        resnet_forward(self, x)
    }
}

pub(crate) fn fc_is_first_row_only(w: &Matrix) -> bool {
    (1..w.rows()).all(|i| w.row(i).iter().all(|&v| v == 0.0))
}

/// Sum of entrywise products.
pub(crate) fn frobenius_dot(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn resnet_forward(net: &ConvResNetModel, x: &[f64]) -> Result<f64> {
    if x.len() != net.input_dim {
        return Err(shape("resnet_forward input", net.input_dim, x.len()));
    }
    let mut z = Matrix::padded(x, net.channels);
    for block in &net.blocks {
        let mut h = z.clone();
        for (f, b) in block.filters.iter().zip(&block.biases) {
            h = conv_layer(f, b, &h)?;
        }
        z = h.add(&z)?;
    }
    Ok(frobenius_dot(&net.fc_weight, &z) + net.fc_bias)
}

/// Affine/ReLU stack; no ReLU after the last affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpModel {
    pub fn new(weights: Vec<Matrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        let m = Self { weights, biases };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.biases.len() {
            return Err(shape(
                "MlpModel",
                "equal, nonzero weight and bias counts",
                format!("{} weights, {} biases", self.weights.len(), self.biases.len()),
            ));
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            if w.rows() != b.len() {
                return Err(shape("MlpModel bias", w.rows(), b.len()));
            }
        }
        for w in self.weights.windows(2) {
            if w[0].rows() != w[1].cols() {
                return Err(shape("MlpModel layer chain", w[0].rows(), w[1].cols()));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights[self.weights.len() - 1].rows()
    }

    /// Number of affine maps.
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    /// Widest hidden layer (the input and output are not counted).
    pub fn width(&self) -> usize {
        self.weights[..self.weights.len() - 1]
            .iter()
            .map(Matrix::rows)
            .max()
            .unwrap_or(0)
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .map(Matrix::max_abs)
            .chain(self.biases.iter().flatten().map(|v| v.abs()))
            .fold(0.0, f64::max)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        mlp_forward(self, x)
    }
}

pub fn mlp_forward(mlp: &MlpModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != mlp.input_dim() {
        return Err(shape("mlp_forward input", mlp.input_dim(), x.len()));
    }
    let last = mlp.weights.len() - 1;
    let mut h = x.to_vec();
    for (idx, (w, b)) in mlp.weights.iter().zip(&mlp.biases).enumerate() {
        let mut next = Vec::with_capacity(w.rows());
        for i in 0..w.rows() {
            let mut acc = b[i];
            for (wv, hv) in w.row(i).iter().zip(&h) {
                acc += wv * hv;
            }
            next.push(if idx < last { relu(acc) } else { acc });
        }
        h = next;
    }
    Ok(h)
}

/// Measured architecture class of a ConvResNet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetClassParams {
    /// Residual block count.
    pub m: usize,
    /// Most conv layers in any block.
    pub l: usize,
    /// Most channels anywhere.
    pub j: usize,
    /// Widest filter.
    pub k: usize,
    pub kappa1: f64,
    pub kappa2: f64,
    pub first_row_only: bool,
}

pub fn audit_class(net: &ConvResNetModel) -> NetClassParams {
    let mut p = NetClassParams {
        m: net.blocks.len(),
        l: 0,
        j: net.channels,
        k: 0,
        kappa1: 0.0,
        kappa2: net.fc_weight.max_abs().max(net.fc_bias.abs()),
        first_row_only: fc_is_first_row_only(&net.fc_weight),
    };
    for b in &net.blocks {
        p.l = p.l.max(b.depth());
        for (f, bias) in b.filters.iter().zip(&b.biases) {
            p.j = p.j.max(f.out_channels).max(f.in_channels);
            p.k = p.k.max(f.width);
            p.kappa1 = p.kappa1.max(f.max_abs()).max(bias.max_abs());
        }
    }
    p
}
