use std::cell::{Ref, RefCell};

use super::kernels::{self, AxisSlices};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    MeanPool(Var, usize),
    MaxPool(Var, Vec<usize>),
    SegmentMax(Var, Vec<usize>),
    Relu(Var),
    Gelu(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mse(Var, Var),
    SmoothL1(Var, Var, f64),
    SmoothL1Rows(Var, Var, f64),
    WeightedSum(Var, Vec<f64>),
    Cosine(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation for later differentiation.
///
/// A tape is single-threaded; build one per graph and drop it after
/// [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<()> {
    if t.rank() == 2 {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0, 0],
        })
    }
}

fn require_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    require_rank2(op, t)?;
    if axis > 1 {
        return Err(Error::InvalidInput(format!("{op}: axis {axis} out of range")));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A constant leaf; no gradient is ever produced for it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            require_rank2("matmul", &ta)?;
            require_rank2("matmul", &tb)?;
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            if tb.rows() != k {
                return Err(mismatch("matmul", &ta, &tb));
            }
            let mut out = vec![0.0; m * n];
            kernels::matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
            finite("matmul", &out)?;
            Tensor::matrix(m, n, out)
        };
        Ok(self.push(out, self.needs(&[a, b]), Op::MatMul(a, b)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            if ta.shape() != tb.shape() {
                return Err(mismatch("add", &ta, &tb));
            }
            let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            finite("add", &data)?;
            Tensor::new(ta.shape().to_vec(), data)?
        };
        Ok(self.push(out, self.needs(&[a, b]), Op::Add(a, b)))
    }

    /// `a [r, c] + row [1, c]`, the row broadcast over the leading axis.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let out = {
            let (ta, tr) = (self.value(a), self.value(row));
            require_rank2("add_row", &ta)?;
            if tr.shape() != [1, ta.cols()] {
                return Err(mismatch("add_row", &ta, &tr));
            }
            let c = ta.cols();
            let data: Vec<f64> = ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + tr.data()[i % c])
                .collect();
            finite("add_row", &data)?;
            Tensor::matrix(ta.rows(), c, data)
        };
        Ok(self.push(out, self.needs(&[a, row]), Op::AddRow(a, row)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            if ta.shape() != tb.shape() {
                return Err(mismatch("mul", &ta, &tb));
            }
            let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
            finite("mul", &data)?;
            Tensor::new(ta.shape().to_vec(), data)?
        };
        Ok(self.push(out, self.needs(&[a, b]), Op::Mul(a, b)))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            let data: Vec<f64> = ta.data().iter().map(|x| x * c).collect();
            finite("scale", &data)?;
            Tensor::new(ta.shape().to_vec(), data)?
        };
        Ok(self.push(out, self.needs(&[a]), Op::Scale(a, c)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            require_rank2("transpose", &ta)?;
            ta.transpose()
        };
        Ok(self.push(out, self.needs(&[a]), Op::Transpose(a)))
    }

    /// Stacks rank-2 inputs along the leading axis.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat_rows: no inputs".into()));
        }
        let out = {
            let first = self.value(parts[0]);
            require_rank2("concat_rows", &first)?;
            let cols = first.cols();
            drop(first);
            let mut data = Vec::new();
            let mut rows = 0;
            for &p in parts {
                let t = self.value(p);
                require_rank2("concat_rows", &t)?;
                if t.cols() != cols {
                    return Err(Error::ShapeMismatch {
                        op: "concat_rows",
                        lhs: vec![rows, cols],
                        rhs: t.shape().to_vec(),
                    });
                }
                rows += t.rows();
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(rows, cols, data)
        };
        Ok(self.push(out, self.needs(parts), Op::ConcatRows(parts.to_vec())))
    }

    /// Joins rank-2 inputs side by side.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat_cols: no inputs".into()));
        }
        let out = {
            let rows = self.value(parts[0]).rows();
            let mut widths = Vec::with_capacity(parts.len());
            for &p in parts {
                let t = self.value(p);
                require_rank2("concat_cols", &t)?;
                if t.rows() != rows {
                    return Err(Error::ShapeMismatch {
                        op: "concat_cols",
                        lhs: vec![rows],
                        rhs: t.shape().to_vec(),
                    });
                }
                widths.push(t.cols());
            }
            let total: usize = widths.iter().sum();
            let mut data = vec![0.0; rows * total];
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let t = self.value(p);
                for r in 0..rows {
                    data[r * total + offset..r * total + offset + w].copy_from_slice(t.row_slice(r));
                }
                offset += w;
            }
            Tensor::matrix(rows, total, data)
        };
        Ok(self.push(out, self.needs(parts), Op::ConcatCols(parts.to_vec())))
    }

    /// Selects (and possibly repeats or reorders) rows by index.
    pub fn gather_rows(&self, a: Var, index: &[usize]) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            require_rank2("gather_rows", &ta)?;
            let c = ta.cols();
            let mut data = Vec::with_capacity(index.len() * c);
            for &i in index {
                if i >= ta.rows() {
                    return Err(Error::InvalidInput(format!(
                        "gather_rows: row {i} out of {}",
                        ta.rows()
                    )));
                }
                data.extend_from_slice(ta.row_slice(i));
            }
            Tensor::matrix(index.len(), c, data)
        };
        Ok(self.push(out, self.needs(&[a]), Op::GatherRows(a, index.to_vec())))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            require_rank2("slice_cols", &ta)?;
            if start >= end || end > ta.cols() {
                return Err(Error::InvalidInput(format!(
                    "slice_cols: range {start}..{end} outside {} columns",
                    ta.cols()
                )));
            }
            let w = end - start;
            let mut data = Vec::with_capacity(ta.rows() * w);
            for r in 0..ta.rows() {
                data.extend_from_slice(&ta.row_slice(r)[start..end]);
            }
            Tensor::matrix(ta.rows(), w, data)
        };
        Ok(self.push(out, self.needs(&[a]), Op::SliceCols(a, start)))
    }

    /// Mean along `axis`, keeping the reduced dimension as 1.
    pub fn mean_pool(&self, a: Var, axis: usize) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            require_axis("mean_pool", &ta, axis)?;
            let sl = AxisSlices::new(ta.rows(), ta.cols(), axis);
            if sl.len == 0 {
                return Err(Error::InvalidInput("mean_pool: empty axis".into()));
            }
            let data: Vec<f64> = (0..sl.count)
                .map(|s| (0..sl.len).map(|i| ta.data()[sl.index(s, i)]).sum::<f64>() / sl.len as f64)
                .collect();
            Tensor::new(sl.reduced_shape(), data)?
        };
        Ok(self.push(out, self.needs(&[a]), Op::MeanPool(a, axis)))
    }

    /// Max along `axis`; ties resolve to the lowest index.
    pub fn max_pool(&self, a: Var, axis: usize) -> Result<Var> {
        let (out, argmax) = {
            let ta = self.value(a);
            require_axis("max_pool", &ta, axis)?;
            let sl = AxisSlices::new(ta.rows(), ta.cols(), axis);
            if sl.len == 0 {
                return Err(Error::InvalidInput("max_pool: empty axis".into()));
            }
            let mut data = Vec::with_capacity(sl.count);
            let mut argmax = Vec::with_capacity(sl.count);
            for s in 0..sl.count {
                let mut best = sl.index(s, 0);
                for i in 1..sl.len {
                    let j = sl.index(s, i);
                    if ta.data()[j] > ta.data()[best] {
                        best = j;
                    }
                }
                data.push(ta.data()[best]);
                argmax.push(best);
            }
            (Tensor::new(sl.reduced_shape(), data)?, argmax)
        };
        Ok(self.push(out, self.needs(&[a]), Op::MaxPool(a, argmax)))
    }

    /// Column-wise max over consecutive row segments: output row `s` is the
    /// max over rows `offsets[s]..offsets[s + 1]`. Ties go to the lowest row.
    pub fn segment_max(&self, a: Var, offsets: &[usize]) -> Result<Var> {
        let (out, argmax) = {
            let ta = self.value(a);
            require_rank2("segment_max", &ta)?;
            let c = ta.cols();
            if offsets.len() < 2 || *offsets.last().unwrap() != ta.rows() {
                return Err(Error::InvalidInput("segment_max: offsets do not cover rows".into()));
            }
            let segs = offsets.len() - 1;
            let mut data = vec![0.0; segs * c];
            let mut argmax = vec![0; segs * c];
            for s in 0..segs {
                let (lo, hi) = (offsets[s], offsets[s + 1]);
                if lo >= hi {
                    return Err(Error::InvalidInput(format!("segment_max: segment {s} is empty")));
                }
                for j in 0..c {
                    let mut best = lo * c + j;
                    for r in lo + 1..hi {
                        let idx = r * c + j;
                        if ta.data()[idx] > ta.data()[best] {
                            best = idx;
                        }
                    }
                    data[s * c + j] = ta.data()[best];
                    argmax[s * c + j] = best;
                }
            }
            (Tensor::matrix(segs, c, data), argmax)
        };
        Ok(self.push(out, self.needs(&[a]), Op::SegmentMax(a, argmax)))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| x.max(0.0)).collect())?
        };
        Ok(self.push(out, self.needs(&[a]), Op::Relu(a)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            let data: Vec<f64> = ta.data().iter().map(|&x| kernels::gelu(x)).collect();
            finite("gelu", &data)?;
            Tensor::new(ta.shape().to_vec(), data)?
        };
        Ok(self.push(out, self.needs(&[a]), Op::Gelu(a)))
    }

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            require_axis("softmax", &ta, axis)?;
            let sl = AxisSlices::new(ta.rows(), ta.cols(), axis);
            let mut data = vec![0.0; ta.len()];
            for s in 0..sl.count {
                let max = (0..sl.len)
                    .map(|i| ta.data()[sl.index(s, i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..sl.len {
                    let j = sl.index(s, i);
                    let e = (ta.data()[j] - max).exp();
                    data[j] = e;
                    total += e;
                }
                for i in 0..sl.len {
                    data[sl.index(s, i)] /= total;
                }
            }
            finite("softmax", &data)?;
            Tensor::new(ta.shape().to_vec(), data)?
        };
        Ok(self.push(out, self.needs(&[a]), Op::Softmax(a, axis)))
    }

    /// Normalizes each slice along `axis` to zero mean and unit variance,
    /// then applies the affine `gamma`, `beta` (both `[1, slice_len]`).
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidInput("layer_norm: eps must be positive".into()));
        }
        let (out, xhat, inv_std) = {
            let tx = self.value(x);
            require_axis("layer_norm", &tx, axis)?;
            let sl = AxisSlices::new(tx.rows(), tx.cols(), axis);
            let (tg, tb) = (self.value(gamma), self.value(beta));
            if tg.shape() != [1, sl.len] {
                return Err(mismatch("layer_norm", &tx, &tg));
            }
            if tb.shape() != [1, sl.len] {
                return Err(mismatch("layer_norm", &tx, &tb));
            }
            let mut xhat = vec![0.0; tx.len()];
            let mut out = vec![0.0; tx.len()];
            let mut inv_std = Vec::with_capacity(sl.count);
            let n = sl.len as f64;
            for s in 0..sl.count {
                let mean = (0..sl.len).map(|i| tx.data()[sl.index(s, i)]).sum::<f64>() / n;
                let var = (0..sl.len)
                    .map(|i| {
                        let d = tx.data()[sl.index(s, i)] - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / n;
                let r = 1.0 / (var + eps).sqrt();
                inv_std.push(r);
                for i in 0..sl.len {
                    let j = sl.index(s, i);
                    let h = (tx.data()[j] - mean) * r;
                    xhat[j] = h;
                    out[j] = h * tg.data()[i] + tb.data()[i];
                }
            }
            finite("layer_norm", &out)?;
            (Tensor::new(tx.shape().to_vec(), out)?, xhat, inv_std)
        };
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            needs,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                inv_std,
            },
        ))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            if ta.shape() != tb.shape() {
                return Err(mismatch("mse", &ta, &tb));
            }
            if ta.is_empty() {
                return Err(Error::InvalidInput("mse: empty input".into()));
            }
            let s: f64 = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            let v = s / ta.len() as f64;
            finite("mse", &[v])?;
            Tensor::scalar(v)
        };
        Ok(self.push(out, self.needs(&[a, b]), Op::Mse(a, b)))
    }

    /// Smooth L1 (Huber with transition `beta`) averaged over all elements.
    pub fn smooth_l1(&self, a: Var, b: Var, beta: f64) -> Result<Var> {
        if beta <= 0.0 {
            return Err(Error::InvalidInput("smooth_l1: beta must be positive".into()));
        }
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            if ta.shape() != tb.shape() {
                return Err(mismatch("smooth_l1", &ta, &tb));
            }
            if ta.is_empty() {
                return Err(Error::InvalidInput("smooth_l1: empty input".into()));
            }
            let s: f64 = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| kernels::smooth_l1(x - y, beta))
                .sum();
            let v = s / ta.len() as f64;
            finite("smooth_l1", &[v])?;
            Tensor::scalar(v)
        };
        Ok(self.push(out, self.needs(&[a, b]), Op::SmoothL1(a, b, beta)))
    }

    /// Per-row smooth L1 averaged over columns; output is `[rows, 1]`.
    pub fn smooth_l1_rows(&self, a: Var, b: Var, beta: f64) -> Result<Var> {
        if beta <= 0.0 {
            return Err(Error::InvalidInput("smooth_l1: beta must be positive".into()));
        }
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            require_rank2("smooth_l1_rows", &ta)?;
            if ta.shape() != tb.shape() {
                return Err(mismatch("smooth_l1_rows", &ta, &tb));
            }
            let c = ta.cols();
            let data: Vec<f64> = (0..ta.rows())
                .map(|r| {
                    ta.row_slice(r)
                        .iter()
                        .zip(tb.row_slice(r))
                        .map(|(x, y)| kernels::smooth_l1(x - y, beta))
                        .sum::<f64>()
                        / c as f64
                })
                .collect();
            finite("smooth_l1_rows", &data)?;
            Tensor::matrix(ta.rows(), 1, data)
        };
        Ok(self.push(out, self.needs(&[a, b]), Op::SmoothL1Rows(a, b, beta)))
    }

    /// `sum_i weights[i] * a[i]` over the flattened input.
    pub fn weighted_sum(&self, a: Var, weights: &[f64]) -> Result<Var> {
        let out = {
            let ta = self.value(a);
            if ta.len() != weights.len() {
                return Err(Error::ShapeMismatch {
                    op: "weighted_sum",
                    lhs: ta.shape().to_vec(),
                    rhs: vec![weights.len()],
                });
            }
            let v: f64 = ta.data().iter().zip(weights).map(|(x, w)| x * w).sum();
            finite("weighted_sum", &[v])?;
            Tensor::scalar(v)
        };
        Ok(self.push(out, self.needs(&[a]), Op::WeightedSum(a, weights.to_vec())))
    }

    /// Sum of all elements.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        self.weighted_sum(a, &vec![1.0; n])
    }

    /// Cosine similarity of the two flattened inputs; defined as 0 when
    /// either input has zero norm.
    pub fn cosine_sim(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            if ta.len() != tb.len() {
                return Err(mismatch("cosine_sim", &ta, &tb));
            }
            Tensor::scalar(cosine(ta.data(), tb.data()))
        };
        Ok(self.push(out, self.needs(&[a, b]), Op::Cosine(a, b)))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "backward: loss must be scalar, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Grads { grads })
    }
}

/// Cosine similarity of two equal-length slices; 0 when either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            if let Some(ga) = slot(nodes, grads, *a) {
                kernels::matmul_nt_acc(g, tb.data(), ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                kernels::matmul_tn_acc(ta.data(), g, gb, m, k, n);
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = slot(nodes, grads, *v) {
                    gv.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
            }
        }
        Op::AddRow(a, row) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
            }
            let c = val(*row).len();
            if let Some(gr) = slot(nodes, grads, *row) {
                for (i, x) in g.iter().enumerate() {
                    gr[i % c] += x;
                }
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * tb.data()[i];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for i in 0..g.len() {
                    gb[i] += g[i] * ta.data()[i];
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, x)| *o += c * x);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (val(*a).rows(), val(*a).cols());
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = val(*p).len();
                if let Some(gp) = slot(nodes, grads, *p) {
                    gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(o, x)| *o += x);
                }
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let rows = node.value.rows();
            let total = node.value.cols();
            let mut offset = 0;
            for p in parts {
                let w = val(*p).cols();
                if let Some(gp) = slot(nodes, grads, *p) {
                    for r in 0..rows {
                        for j in 0..w {
                            gp[r * w + j] += g[r * total + offset + j];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::GatherRows(a, index) => {
            let c = val(*a).cols();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        ga[i * c + j] += g[k * c + j];
                    }
                }
            }
        }
        Op::SliceCols(a, start) => {
            let c = val(*a).cols();
            let w = node.value.cols();
            if let Some(ga) = slot(nodes, grads, *a) {
                for r in 0..node.value.rows() {
                    for j in 0..w {
                        ga[r * c + start + j] += g[r * w + j];
                    }
                }
            }
        }
        Op::MeanPool(a, axis) => {
            let ta = val(*a);
            let sl = AxisSlices::new(ta.rows(), ta.cols(), *axis);
            if let Some(ga) = slot(nodes, grads, *a) {
                for s in 0..sl.count {
                    let share = g[s] / sl.len as f64;
                    for i in 0..sl.len {
                        ga[sl.index(s, i)] += share;
                    }
                }
            }
        }
        Op::MaxPool(a, argmax) | Op::SegmentMax(a, argmax) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (k, &j) in argmax.iter().enumerate() {
                    ga[j] += g[k];
                }
            }
        }
        Op::Relu(a) => {
            let ta = val(*a);
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    if ta.data()[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let ta = val(*a);
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * kernels::gelu_grad(ta.data()[i]);
                }
            }
        }
        Op::Softmax(a, axis) => {
            let y = &node.value;
            let sl = AxisSlices::new(y.rows(), y.cols(), *axis);
            if let Some(ga) = slot(nodes, grads, *a) {
                for s in 0..sl.count {
                    let dot: f64 = (0..sl.len)
                        .map(|i| {
                            let j = sl.index(s, i);
                            g[j] * y.data()[j]
                        })
                        .sum();
                    for i in 0..sl.len {
                        let j = sl.index(s, i);
                        ga[j] += y.data()[j] * (g[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            axis,
            xhat,
            inv_std,
        } => {
            let tx = val(*x);
            let tg = val(*gamma);
            let sl = AxisSlices::new(tx.rows(), tx.cols(), *axis);
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for s in 0..sl.count {
                    for i in 0..sl.len {
                        let j = sl.index(s, i);
                        gg[i] += g[j] * xhat[j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for s in 0..sl.count {
                    for i in 0..sl.len {
                        gb[i] += g[sl.index(s, i)];
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let n = sl.len as f64;
                for s in 0..sl.count {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for i in 0..sl.len {
                        let j = sl.index(s, i);
                        let d = g[j] * tg.data()[i];
                        sum_d += d;
                        sum_dx += d * xhat[j];
                    }
                    for i in 0..sl.len {
                        let j = sl.index(s, i);
                        let d = g[j] * tg.data()[i];
                        gx[j] += inv_std[s] / n * (n * d - sum_d - xhat[j] * sum_dx);
                    }
                }
            }
        }
        Op::Mse(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let scale = 2.0 * g[0] / ta.len() as f64;
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..ta.len() {
                    ga[i] += scale * (ta.data()[i] - tb.data()[i]);
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for i in 0..ta.len() {
                    gb[i] -= scale * (ta.data()[i] - tb.data()[i]);
                }
            }
        }
        Op::SmoothL1(a, b, beta) => {
            let (ta, tb) = (val(*a), val(*b));
            let scale = g[0] / ta.len() as f64;
            let d: Vec<f64> = (0..ta.len())
                .map(|i| scale * kernels::smooth_l1_grad(ta.data()[i] - tb.data()[i], *beta))
                .collect();
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(&d).for_each(|(o, x)| *o += x);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(&d).for_each(|(o, x)| *o -= x);
            }
        }
        Op::SmoothL1Rows(a, b, beta) => {
            let (ta, tb) = (val(*a), val(*b));
            let c = ta.cols();
            let d: Vec<f64> = (0..ta.len())
                .map(|i| g[i / c] / c as f64 * kernels::smooth_l1_grad(ta.data()[i] - tb.data()[i], *beta))
                .collect();
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(&d).for_each(|(o, x)| *o += x);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(&d).for_each(|(o, x)| *o -= x);
            }
        }
        Op::WeightedSum(a, w) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(w).for_each(|(o, x)| *o += g[0] * x);
            }
        }
        Op::Cosine(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let na = ta.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = tb.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return;
            }
            let c = node.value.item();
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..ta.len() {
                    ga[i] += g[0] * (tb.data()[i] / (na * nb) - c * ta.data()[i] / (na * na));
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for i in 0..tb.len() {
                    gb[i] += g[0] * (ta.data()[i] / (na * nb) - c * tb.data()[i] / (nb * nb));
                }
            }
        }
    }
}
