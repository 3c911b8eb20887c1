//! Eager computation tape for reverse-mode differentiation.
//!
//! Every operation evaluates immediately and appends a node holding its
//! value and whatever it needs for the backward pass. Node order is creation
//! order, which is a valid topological order, so `backward` is a single
//! reverse sweep.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::error::{NumError, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Log(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Rc<[usize]>),
    SegmentSum(Var, Rc<[usize]>),
    SegmentMean(Var, Rc<[usize]>, Vec<usize>),
    ScaleRows(Var, Var),
    Maximum(Var, Var),
    SumRows(Var),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    BceWithLogits(Var, Tensor),
    SoftmaxCrossEntropy(Var, Vec<usize>, Tensor),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Affine(..) => "affine",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softplus(_) => "softplus",
            Op::Log(_) => "log",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::SegmentSum(..) => "segment_sum",
            Op::SegmentMean(..) => "segment_mean",
            Op::ScaleRows(..) => "scale_rows",
            Op::Maximum(..) => "maximum",
            Op::SumRows(_) => "sum_rows",
            Op::MeanRows(_) => "mean_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::BceWithLogits(..) => "bce_with_logits",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mismatch(op: &'static str, detail: String) -> NumError {
    NumError::ShapeMismatch { op, detail }
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl Graph {
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<&Tensor> {
        let t = self.value(v);
        if t.is_matrix() {
            Ok(t)
        } else {
            Err(mismatch(op, format!("expected a matrix, got {:?}", t.shape())))
        }
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        if !value.is_matrix() {
            return Err(mismatch("constant", format!("expected a matrix, got {:?}", value.shape())));
        }
        self.push(value, Op::Constant, false)
    }

    /// Records parameter `name` from `store`. Repeated requests for the same
    /// name return the same node. Frozen parameters are recorded but never
    /// receive gradients.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        if !value.is_matrix() {
            return Err(mismatch("param", format!("`{name}` is not a matrix")));
        }
        let needs = !store.is_frozen(name);
        let v = self.push(value, Op::Param(name.to_string()), needs)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.matrix("matmul", a)?, self.matrix("matmul", b)?);
        if ta.cols() != tb.rows() {
            return Err(mismatch("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let out = ta.matmul(tb);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.matrix("transpose", a)?.transpose();
        let needs = self.needs(a);
        self.push(out, Op::Transpose(a), needs)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.same_shape(tb) {
            Ok(())
        } else {
            Err(mismatch(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), needs)
    }

    /// Adds a `1×n` bias to every row of an `m×n` matrix.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.matrix("add_row_bias", a)?, self.matrix("add_row_bias", bias)?);
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(mismatch("add_row_bias", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut out = ta.clone();
        let b = tb.data().to_vec();
        for r in 0..out.rows() {
            for (o, &x) in out.row_mut(r).iter_mut().zip(&b) {
                *o += x;
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        self.push(out, Op::AddRowBias(a, bias), needs)
    }

    /// `scale · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(a).map(|x| scale * x + shift);
        let needs = self.needs(a);
        self.push(out, Op::Affine(a, scale), needs)
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Result<Var> {
        self.affine(a, scale, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let needs = self.needs(a);
        self.push(out, Op::Relu(a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let needs = self.needs(a);
        self.push(out, Op::Sigmoid(a), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        let needs = self.needs(a);
        self.push(out, Op::Tanh(a), needs)
    }

    /// `ln(1 + e^x)` in the overflow-free form.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        let needs = self.needs(a);
        self.push(out, Op::Softplus(a), needs)
    }

    /// Natural log; non-positive inputs are a `NonFinite` error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        let needs = self.needs(a);
        self.push(out, Op::Log(a), needs)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.matrix("softmax_rows", a)?.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let needs = self.needs(a);
        self.push(out, Op::SoftmaxRows(a), needs)
    }

    /// Row-wise layer normalization with `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.matrix("layer_norm", x)?;
        let (tg, tb) = (self.value(gain), self.value(bias));
        let n = tx.cols();
        if tg.shape() != [1, n] || tb.shape() != [1, n] {
            return Err(mismatch(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        let mut xhat = tx.clone();
        let mut inv_std = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let row = xhat.row_mut(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let mut out = xhat.clone();
        for r in 0..out.rows() {
            for ((o, &g), &b) in out.row_mut(r).iter_mut().zip(tg.data()).zip(tb.data()) {
                *o = *o * g + b;
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(mismatch("concat_cols", "no inputs".into()));
        }
        let rows = self.matrix("concat_cols", parts[0])?.rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.matrix("concat_cols", p)?;
            if t.rows() != rows {
                return Err(mismatch("concat_cols", format!("row counts {} vs {}", rows, t.rows())));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_matrix(rows, cols, data), Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(mismatch("concat_rows", "no inputs".into()));
        }
        let cols = self.matrix("concat_rows", parts[0])?.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.matrix("concat_rows", p)?;
            if t.cols() != cols {
                return Err(mismatch("concat_rows", format!("col counts {} vs {}", cols, t.cols())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_matrix(rows, cols, data), Op::ConcatRows(parts.to_vec()), needs)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.matrix("slice_cols", a)?;
        if start > end || end > t.cols() {
            return Err(mismatch("slice_cols", format!("{start}..{end} of {} cols", t.cols())));
        }
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let out = Tensor::from_matrix(t.rows(), end - start, data);
        let needs = self.needs(a);
        self.push(out, Op::SliceCols(a, start), needs)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.matrix("slice_rows", a)?;
        if start > end || end > t.rows() {
            return Err(mismatch("slice_rows", format!("{start}..{end} of {} rows", t.rows())));
        }
        let c = t.cols();
        let out = Tensor::from_matrix(end - start, c, t.data()[start * c..end * c].to_vec());
        let needs = self.needs(a);
        self.push(out, Op::SliceRows(a, start), needs)
    }

    /// Gathers rows by index; the backward pass scatters additively.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let t = self.matrix("gather_rows", a)?;
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= t.rows() {
                return Err(NumError::IndexOutOfRange { op: "gather_rows", index: i, limit: t.rows() });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_matrix(idx.len(), c, data);
        let needs = self.needs(a);
        self.push(out, Op::GatherRows(a, idx), needs)
    }

    fn check_segments(&self, op: &'static str, a: Var, ids: &[usize], n: usize) -> Result<()> {
        let t = self.matrix(op, a)?;
        if ids.len() != t.rows() {
            return Err(mismatch(op, format!("{} ids for {} rows", ids.len(), t.rows())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(NumError::IndexOutOfRange { op, index: bad, limit: n });
        }
        Ok(())
    }

    /// Row `j` of the output is the sum of input rows with segment id `j`.
    pub fn segment_sum(&mut self, a: Var, ids: Rc<[usize]>, n_segments: usize) -> Result<Var> {
        self.check_segments("segment_sum", a, &ids, n_segments)?;
        let t = self.value(a);
        let mut out = Tensor::zeros(n_segments, t.cols());
        for (r, &s) in ids.iter().enumerate() {
            for (o, &v) in out.row_mut(s).iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let needs = self.needs(a);
        self.push(out, Op::SegmentSum(a, ids), needs)
    }

    /// Row `j` of the output is the mean of input rows with segment id `j`;
    /// empty segments give zero rows.
    pub fn segment_mean(&mut self, a: Var, ids: Rc<[usize]>, n_segments: usize) -> Result<Var> {
        self.check_segments("segment_mean", a, &ids, n_segments)?;
        let t = self.value(a);
        let mut counts = vec![0usize; n_segments];
        let mut out = Tensor::zeros(n_segments, t.cols());
        for (r, &s) in ids.iter().enumerate() {
            counts[s] += 1;
            for (o, &v) in out.row_mut(s).iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            if c > 1 {
                let inv = c as f64;
                for o in out.row_mut(s) {
                    *o /= inv;
                }
            }
        }
        let needs = self.needs(a);
        self.push(out, Op::SegmentMean(a, ids, counts), needs)
    }

    /// Multiplies row `i` of an `m×n` matrix by entry `i` of an `m×1` column.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.matrix("scale_rows", a)?, self.matrix("scale_rows", s)?);
        if ts.cols() != 1 || ts.rows() != ta.rows() {
            return Err(mismatch("scale_rows", format!("{:?} by {:?}", ta.shape(), ts.shape())));
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let f = ts.data()[r];
            for o in out.row_mut(r) {
                *o *= f;
            }
        }
        let needs = self.needs(a) || self.needs(s);
        self.push(out, Op::ScaleRows(a, s), needs)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| if x >= y { x } else { y });
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Maximum(a, b), needs)
    }

    /// Column sums as a `1×n` row; an empty matrix gives zeros.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.matrix("sum_rows", a)?;
        let mut out = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (o, &v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::row_vector(out), Op::SumRows(a), needs)
    }

    /// Column means as a `1×n` row. Requires at least one row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.matrix("mean_rows", a)?;
        if t.rows() == 0 {
            return Err(mismatch("mean_rows", "empty input".into()));
        }
        let mut out = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (o, &v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let n = t.rows() as f64;
        for o in &mut out {
            *o /= n;
        }
        let needs = self.needs(a);
        self.push(Tensor::row_vector(out), Op::MeanRows(a), needs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(mismatch("mean", "empty input".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), needs)
    }

    /// Mean binary cross-entropy of `logits` against 0/1 `targets`, in the
    /// stable form `max(z,0) - z·t + ln(1 + e^{-|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(mismatch("bce_with_logits", format!("{:?} vs {:?}", z.shape(), targets.shape())));
        }
        if let Some(&bad) = targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(NumError::InvalidTarget { op: "bce_with_logits", value: bad });
        }
        if z.numel() == 0 {
            return Err(mismatch("bce_with_logits", "empty input".into()));
        }
        let loss = bce_sum(z.data(), targets.data()) / z.numel() as f64;
        let needs = self.needs(logits);
        self.push(Tensor::scalar(loss), Op::BceWithLogits(logits, targets.clone()), needs)
    }

    /// Mean softmax cross-entropy of row logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let z = self.matrix("softmax_cross_entropy", logits)?;
        if z.rows() != classes.len() || z.rows() == 0 {
            return Err(mismatch(
                "softmax_cross_entropy",
                format!("{} rows vs {} classes", z.rows(), classes.len()),
            ));
        }
        let mut probs = z.clone();
        let mut loss = 0.0;
        for (r, &c) in classes.iter().enumerate() {
            if c >= z.cols() {
                return Err(NumError::IndexOutOfRange { op: "softmax_cross_entropy", index: c, limit: z.cols() });
            }
            let row = probs.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[c];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = loss / classes.len() as f64;
        let needs = self.needs(logits);
        self.push(Tensor::scalar(loss), Op::SoftmaxCrossEntropy(logits, classes.to_vec(), probs), needs)
    }

    /// `x·w + b` with `b` a `1×n` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row_bias(h, b)
    }

    /// Reverse sweep from a scalar `loss`. Every parameter recorded on this
    /// graph gets an entry; those off the loss path get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(NumError::NotScalar { shape: lt.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_matrix(lt.rows(), lt.cols(), vec![1.0]));
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(g) = grads[idx].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            if !g.is_finite() {
                return Err(NumError::NonFinite { op: "backward" });
            }
            self.backprop_node(node, &g, &mut grads, &mut out)?;
        }
        for (name, &v) in &self.params {
            if self.nodes[v.0].needs_grad && !out.contains_key(name) {
                let t = self.value(v);
                out.insert(name.clone(), Tensor::zeros(t.rows(), t.cols()));
            }
        }
        Ok(Gradients::from_map(out))
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut BTreeMap<String, Tensor>,
    ) -> Result<()> {
        let acc = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(name) => match out.get_mut(name) {
                Some(t) => t.add_assign(g),
                None => {
                    out.insert(name.clone(), g.clone());
                }
            },
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.matmul_t(self.value(*b)), grads);
                }
                if self.needs(*b) {
                    acc(*b, self.value(*a).t_matmul(g), grads);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose(), grads),
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.map(|x| -x), grads);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    acc(*a, g.zip_map(tb, |x, y| x * y), grads);
                }
                if self.needs(*b) {
                    acc(*b, g.zip_map(ta, |x, y| x * y), grads);
                }
            }
            Op::AddRowBias(a, b) => {
                acc(*a, g.clone(), grads);
                if self.needs(*b) {
                    let mut db = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (d, &v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::row_vector(db), grads);
                }
            }
            Op::Affine(a, s) => {
                let s = *s;
                acc(*a, g.map(|x| x * s), grads);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, g.zip_map(x, |d, v| if v > 0.0 { d } else { 0.0 }), grads);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, g.zip_map(y, |d, s| d * s * (1.0 - s)), grads);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, g.zip_map(y, |d, t| d * (1.0 - t * t)), grads);
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                acc(*a, g.zip_map(x, |d, v| d * sigmoid(v)), grads);
            }
            Op::Log(a) => {
                let x = self.value(*a);
                acc(*a, g.zip_map(x, |d, v| d / v), grads);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = y.clone();
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(d, s)| d * s).sum();
                    for ((o, &d), &s) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = s * (d - dot);
                    }
                }
                acc(*a, dx, grads);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let tg = self.value(*gain);
                let n = xhat.cols();
                if self.needs(*gain) || self.needs(*bias) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for r in 0..xhat.rows() {
                        for j in 0..n {
                            dg[j] += g.get(r, j) * xhat.get(r, j);
                            db[j] += g.get(r, j);
                        }
                    }
                    acc(*gain, Tensor::row_vector(dg), grads);
                    acc(*bias, Tensor::row_vector(db), grads);
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xhat.rows(), n);
                    for r in 0..xhat.rows() {
                        let dxh: Vec<f64> = (0..n).map(|j| g.get(r, j) * tg.data()[j]).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum();
                        let k = n as f64;
                        for j in 0..n {
                            let v = inv_std[r] / k * (k * dxh[j] - s1 - xhat.get(r, j) * s2);
                            dx.set(r, j, v);
                        }
                    }
                    acc(*x, dx, grads);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(g.rows() * c);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[offset..offset + c]);
                        }
                        acc(p, Tensor::from_matrix(g.rows(), c, data), grads);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.needs(p) {
                        let slice = g.data()[offset * cols..(offset + r) * cols].to_vec();
                        acc(p, Tensor::from_matrix(r, cols, slice), grads);
                    }
                    offset += r;
                }
            }
            Op::SliceCols(a, start) => {
                let t = self.value(*a);
                let mut dx = Tensor::zeros(t.rows(), t.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, dx, grads);
            }
            Op::SliceRows(a, start) => {
                let t = self.value(*a);
                let mut dx = Tensor::zeros(t.rows(), t.cols());
                let c = t.cols();
                dx.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                acc(*a, dx, grads);
            }
            Op::GatherRows(a, idx) => {
                let t = self.value(*a);
                let mut dx = Tensor::zeros(t.rows(), t.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*a, dx, grads);
            }
            Op::SegmentSum(a, ids) => {
                let t = self.value(*a);
                let mut dx = Tensor::zeros(t.rows(), t.cols());
                for (r, &s) in ids.iter().enumerate() {
                    dx.row_mut(r).copy_from_slice(g.row(s));
                }
                acc(*a, dx, grads);
            }
            Op::SegmentMean(a, ids, counts) => {
                let t = self.value(*a);
                let mut dx = Tensor::zeros(t.rows(), t.cols());
                for (r, &s) in ids.iter().enumerate() {
                    let c = counts[s] as f64;
                    for (o, &v) in dx.row_mut(r).iter_mut().zip(g.row(s)) {
                        *o = v / c;
                    }
                }
                acc(*a, dx, grads);
            }
            Op::ScaleRows(a, s) => {
                let (ta, ts) = (self.value(*a), self.value(*s));
                if self.needs(*a) {
                    let mut dx = g.clone();
                    for r in 0..dx.rows() {
                        let f = ts.data()[r];
                        for o in dx.row_mut(r) {
                            *o *= f;
                        }
                    }
                    acc(*a, dx, grads);
                }
                if self.needs(*s) {
                    let ds: Vec<f64> = (0..ta.rows())
                        .map(|r| g.row(r).iter().zip(ta.row(r)).map(|(d, x)| d * x).sum())
                        .collect();
                    acc(*s, Tensor::column_vector(ds), grads);
                }
            }
            Op::Maximum(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut da = g.clone();
                let mut db = g.clone();
                for i in 0..g.numel() {
                    if ta.data()[i] >= tb.data()[i] {
                        db.data_mut()[i] = 0.0;
                    } else {
                        da.data_mut()[i] = 0.0;
                    }
                }
                acc(*a, da, grads);
                acc(*b, db, grads);
            }
            Op::SumRows(a) => {
                let t = self.value(*a);
                let mut dx = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    dx.row_mut(r).copy_from_slice(g.data());
                }
                acc(*a, dx, grads);
            }
            Op::MeanRows(a) => {
                let t = self.value(*a);
                let n = t.rows() as f64;
                let mut dx = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    for (o, &v) in dx.row_mut(r).iter_mut().zip(g.data()) {
                        *o = v / n;
                    }
                }
                acc(*a, dx, grads);
            }
            Op::Sum(a) => {
                let t = self.value(*a);
                let d = g.data()[0];
                acc(*a, t.map(|_| d), grads);
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let d = g.data()[0] / t.numel() as f64;
                acc(*a, t.map(|_| d), grads);
            }
            Op::BceWithLogits(a, targets) => {
                let z = self.value(*a);
                let d = g.data()[0] / z.numel() as f64;
                acc(*a, z.zip_map(targets, |x, t| d * (sigmoid(x) - t)), grads);
            }
            Op::SoftmaxCrossEntropy(a, classes, probs) => {
                let d = g.data()[0] / classes.len() as f64;
                let mut dx = probs.map(|p| p * d);
                for (r, &c) in classes.iter().enumerate() {
                    let v = dx.get(r, c);
                    dx.set(r, c, v - d);
                }
                acc(*a, dx, grads);
            }
        }
        Ok(())
    }
}

/// Sum of elementwise stable binary cross-entropy terms.
pub fn bce_sum(logits: &[f64], targets: &[f64]) -> f64 {
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
        .sum()
}
