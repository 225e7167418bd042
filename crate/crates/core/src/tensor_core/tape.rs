//! Define-by-run reverse-mode differentiation.
//!
//! Every forward op appends a node holding its value and the information its
//! backward rule needs. `backward` walks the nodes from the loss down to index
//! zero, which is a reverse topological order because inputs are always
//! recorded before the ops that consume them.

use std::fmt;
use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-supplied differentiable op.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Gradient with respect to each input, given the upstream gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Sum(Var),
    Mean(Var),
    TopKMean { x: Var, selected: Vec<usize> },
    DepthwiseConv1d(Var, Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, rows: Vec<usize> },
    Custom { op: Arc<dyn CustomOp>, inputs: Vec<Var> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of forward ops.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` if `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but materialises zeros for unreachable vars.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn dim_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{what}: incompatible shapes {a:?} and {b:?}"))
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner;
    (y, dy)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Indices of the `k` largest values; ties go to the lowest index.
pub(crate) fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // Stable sort keeps ascending index order among equal values.
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx.truncate(k);
    idx
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err(what, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.with_shape_of(ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    fn row_broadcast(&self, what: &str, a: Var, row: Var) -> Result<(usize, usize)> {
        let (r, c) = self.value(a).dims2();
        if self.value(row).len() != c {
            return Err(dim_err(what, self.value(a).shape(), self.value(row).shape()));
        }
        Ok((r, c))
    }

    /// `a + row` with `row` broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, c) = self.row_broadcast("add_row", a, row)?;
        let (ta, tr) = (self.value(a), self.value(row));
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tr.data()[i % c])
            .collect();
        let out = ta.with_shape_of(data);
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// `a ⊙ row` with `row` broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, c) = self.row_broadcast("mul_row", a, row)?;
        let (ta, tr) = (self.value(a), self.value(row));
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * tr.data()[i % c])
            .collect();
        let out = ta.with_shape_of(data);
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    /// `a + col` with the `[rows×1]` column broadcast over every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if self.value(col).len() != r {
            return Err(dim_err("add_col", self.value(a).shape(), self.value(col).shape()));
        }
        let (ta, tc) = (self.value(a), self.value(col));
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tc.data()[i / c])
            .collect();
        let out = ta.with_shape_of(data);
        Ok(self.push(out, Op::AddCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let out = self.value(a).map(|x| x + offset);
        self.push(out, Op::AddScalar(a))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(dim_err("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = Tensor::raw(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n));
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "transpose needs a matrix, got {:?}",
                ta.shape()
            )));
        }
        let (r, c) = ta.dims2();
        let out = Tensor::raw(vec![c, r], transpose_raw(ta.data(), r, c));
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu_parts(x).0);
        self.push(out, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = ta.with_shape_of(data);
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        let mut inv_std = Vec::with_capacity(ta.rows());
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let out = ta.with_shape_of(data);
        self.push(out, Op::LayerNorm { x: a, inv_std })
    }

    /// Scales each row to unit L2 norm; `eps` keeps zero rows finite.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        let mut norms = Vec::with_capacity(ta.rows());
        for row in data.chunks_mut(c) {
            let n = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let out = ta.with_shape_of(data);
        self.push(out, Op::L2NormalizeRows { x: a, norms })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = Tensor::scalar(ta.data().iter().sum::<f64>() / ta.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Sums a non-empty list of same-shape vars in list order.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Argument("add_all of an empty list".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Mean of the `k` largest entries. Ties are broken by lowest index.
    pub fn topk_mean(&mut self, a: Var, k: usize) -> Result<Var> {
        let ta = self.value(a);
        if k == 0 || k > ta.len() {
            return Err(Error::Argument(format!(
                "top-k mean needs 1 <= k <= {}, got k = {k}",
                ta.len()
            )));
        }
        let selected = top_k_indices(ta.data(), k);
        let mean = selected.iter().map(|&i| ta.data()[i]).sum::<f64>() / k as f64;
        Ok(self.push(Tensor::scalar(mean), Op::TopKMean { x: a, selected }))
    }

    /// Per-channel temporal convolution with replicate padding.
    ///
    /// `x` is `[T×C]`, `kernel` is `[C×W]` with `W` odd; output is `[T×C]`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let (t_len, ch) = tx.dims2();
        if tx.shape().len() != 2 || tk.shape().len() != 2 || tk.rows() != ch {
            return Err(dim_err("depthwise_conv1d", tx.shape(), tk.shape()));
        }
        let w = tk.cols();
        if w % 2 == 0 {
            return Err(Error::Config(format!("convolution width must be odd, got {w}")));
        }
        let half = (w / 2) as isize;
        let last = t_len as isize - 1;
        let mut out = vec![0.0; t_len * ch];
        for t in 0..t_len {
            for j in 0..w {
                let src = (t as isize + j as isize - half).clamp(0, last) as usize;
                for c in 0..ch {
                    out[t * ch + c] += tk.data()[c * w + j] * tx.data()[src * ch + c];
                }
            }
        }
        let out = Tensor::raw(vec![t_len, ch], out);
        Ok(self.push(out, Op::DepthwiseConv1d(x, kernel)))
    }

    /// Depthwise-separable convolution: depthwise pass then pointwise mixing.
    pub fn dws_conv1d(&mut self, x: Var, depth_kernel: Var, point_kernel: Var) -> Result<Var> {
        let cx = self.value(x).cols();
        let pk = self.value(point_kernel);
        if pk.shape().len() != 2 || pk.rows() != cx {
            return Err(dim_err("dws_conv1d", self.value(x).shape(), pk.shape()));
        }
        let z = self.depthwise_conv1d(x, depth_kernel)?;
        self.matmul(z, point_kernel)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if len == 0 || start + len > r {
            return Err(Error::Dimension(format!(
                "row slice {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let out = Tensor::raw(vec![len, c], ta.data()[start * c..(start + len) * c].to_vec());
        Ok(self.push(out, Op::SliceRows { x: a, start }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if len == 0 || start + len > c {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in ta.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::raw(vec![r, len], data);
        Ok(self.push(out, Op::SliceCols { x: a, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::Argument("concat_rows of an empty list".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.cols() != c {
                return Err(dim_err("concat_rows", self.value(parts[0]).shape(), tp.shape()));
            }
            rows += tp.rows();
            data.extend_from_slice(tp.data());
        }
        let out = Tensor::raw(vec![rows, c], data);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::Argument("concat_cols of an empty list".into()))?;
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).rows() != r) {
            return Err(dim_err(
                "concat_cols",
                self.value(parts[0]).shape(),
                self.value(bad).shape(),
            ));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::raw(vec![r, total], data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        if rows.is_empty() {
            return Err(Error::Argument("gather_rows with no indices".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension(format!("row {bad} out of range for {r} rows")));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::raw(vec![rows.len(), c], data);
        Ok(self.push(
            out,
            Op::GatherRows {
                x: a,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&values)?;
        Ok(self.push(
            out,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(lv.with_shape_of(vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut acc = |v: Var, delta: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = gd.iter().zip(tb.data()).map(|(g, b)| g * b).collect();
                let db = gd.iter().zip(ta.data()).map(|(g, a)| g * a).collect();
                acc(*a, ta.with_shape_of(da));
                acc(*b, tb.with_shape_of(db));
            }
            Op::AddRow(a, row) => {
                let tr = self.value(*row);
                let c = tr.len();
                let mut dr = vec![0.0; c];
                for (i, &gv) in gd.iter().enumerate() {
                    dr[i % c] += gv;
                }
                acc(*a, g.clone());
                acc(*row, tr.with_shape_of(dr));
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (self.value(*a), self.value(*row));
                let c = tr.len();
                let mut dr = vec![0.0; c];
                let mut da = vec![0.0; ta.len()];
                for (i, &gv) in gd.iter().enumerate() {
                    dr[i % c] += gv * ta.data()[i];
                    da[i] = gv * tr.data()[i % c];
                }
                acc(*a, ta.with_shape_of(da));
                acc(*row, tr.with_shape_of(dr));
            }
            Op::AddCol(a, col) => {
                let tc = self.value(*col);
                let c = y.cols();
                let mut dc = vec![0.0; tc.len()];
                for (i, &gv) in gd.iter().enumerate() {
                    dc[i / c] += gv;
                }
                acc(*a, g.clone());
                acc(*col, tc.with_shape_of(dc));
            }
            Op::Scale(a, f) => acc(*a, g.map(|v| v * f)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = G·Bᵀ, dB = Aᵀ·G
                let bt = transpose_raw(tb.data(), k, n);
                let da = matmul_raw(gd, &bt, m, n, k);
                let at = transpose_raw(ta.data(), m, k);
                let db = matmul_raw(&at, gd, k, m, n);
                acc(*a, ta.with_shape_of(da));
                acc(*b, tb.with_shape_of(db));
            }
            Op::Transpose(a) => {
                let (r, c) = y.dims2();
                let ta = self.value(*a);
                acc(*a, ta.with_shape_of(transpose_raw(gd, r, c)));
            }
            Op::Sigmoid(a) => {
                let d = gd.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                acc(*a, y.with_shape_of(d));
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(y.data()).map(|(g, e)| g * e).collect();
                acc(*a, y.with_shape_of(d));
            }
            Op::Log(a) => {
                let ta = self.value(*a);
                let d = gd.iter().zip(ta.data()).map(|(g, x)| g / x).collect();
                acc(*a, ta.with_shape_of(d));
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let d = gd.iter().zip(ta.data()).map(|(g, &x)| g * gelu_parts(x).1).collect();
                acc(*a, ta.with_shape_of(d));
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let d = gd
                    .iter()
                    .zip(ta.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*a, ta.with_shape_of(d));
            }
            Op::Clamp(a, lo, hi) => {
                let ta = self.value(*a);
                let d = gd
                    .iter()
                    .zip(ta.data())
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect();
                acc(*a, ta.with_shape_of(d));
            }
            Op::Softmax(a) => {
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for ((dr, gr), yr) in d.chunks_mut(c).zip(gd.chunks(c)).zip(y.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = yv * (gv - dot);
                    }
                }
                acc(*a, y.with_shape_of(d));
            }
            Op::LayerNorm { x, inv_std } => {
                let c = y.cols();
                let n = c as f64;
                let mut d = vec![0.0; y.len()];
                for (r, ((dr, gr), yr)) in d.chunks_mut(c).zip(gd.chunks(c)).zip(y.data().chunks(c)).enumerate() {
                    let g_mean = gr.iter().sum::<f64>() / n;
                    let gy_mean = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
                    for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = inv_std[r] * (gv - g_mean - yv * gy_mean);
                    }
                }
                acc(*x, y.with_shape_of(d));
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for (r, ((dr, gr), yr)) in d.chunks_mut(c).zip(gd.chunks(c)).zip(y.data().chunks(c)).enumerate() {
                    // y = x/n with n² = |x|² + eps: dx = (g - y·(g·y))/n
                    let n = norms[r];
                    let gy: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv = (gv - yv * gy) / n;
                    }
                }
                acc(*x, y.with_shape_of(d));
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                acc(*a, Tensor::full(ta.shape(), gd[0]));
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                acc(*a, Tensor::full(ta.shape(), gd[0] / ta.len() as f64));
            }
            Op::TopKMean { x, selected } => {
                let tx = self.value(*x);
                let mut d = vec![0.0; tx.len()];
                let share = gd[0] / selected.len() as f64;
                for &i in selected {
                    d[i] += share;
                }
                acc(*x, tx.with_shape_of(d));
            }
            Op::DepthwiseConv1d(x, kernel) => {
                let (tx, tk) = (self.value(*x), self.value(*kernel));
                let (t_len, ch) = tx.dims2();
                let w = tk.cols();
                let half = (w / 2) as isize;
                let last = t_len as isize - 1;
                let mut dx = vec![0.0; tx.len()];
                let mut dk = vec![0.0; tk.len()];
                for t in 0..t_len {
                    for j in 0..w {
                        let src = (t as isize + j as isize - half).clamp(0, last) as usize;
                        for c in 0..ch {
                            let gv = gd[t * ch + c];
                            dx[src * ch + c] += gv * tk.data()[c * w + j];
                            dk[c * w + j] += gv * tx.data()[src * ch + c];
                        }
                    }
                }
                acc(*x, tx.with_shape_of(dx));
                acc(*kernel, tk.with_shape_of(dk));
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut d = vec![0.0; tx.len()];
                d[start * c..start * c + gd.len()].copy_from_slice(gd);
                acc(*x, tx.with_shape_of(d));
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (c, len) = (tx.cols(), y.cols());
                let mut d = vec![0.0; tx.len()];
                for (dr, gr) in d.chunks_mut(c).zip(gd.chunks(len)) {
                    dr[*start..start + len].copy_from_slice(gr);
                }
                acc(*x, tx.with_shape_of(d));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    acc(p, tp.with_shape_of(gd[offset..offset + tp.len()].to_vec()));
                    offset += tp.len();
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut col = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let w = tp.cols();
                    let mut d = Vec::with_capacity(tp.len());
                    for gr in gd.chunks(total) {
                        d.extend_from_slice(&gr[col..col + w]);
                    }
                    acc(p, tp.with_shape_of(d));
                    col += w;
                }
            }
            Op::GatherRows { x, rows } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut d = vec![0.0; tx.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[r * c + j] += gd[k * c + j];
                    }
                }
                acc(*x, tx.with_shape_of(d));
            }
            Op::Custom { op, inputs } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                for (&v, d) in inputs.iter().zip(op.backward(&values, y, g)) {
                    acc(v, d);
                }
            }
        }
    }
}
