//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every builder method evaluates its node immediately and appends it to the
//! node list, so inputs always precede outputs. `backward` sweeps the list in
//! reverse id order, which fixes the gradient accumulation order.

use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::sketch::{
    circular_convolve_slice, circular_correlate_slice, count_sketch_slice, CountSketchParams,
};
use crate::tensor::{
    check_same_shape, log_softmax_slice, matmul_into, matmul_nt_into, matmul_tn_into, sigmoid,
    softmax_slice, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

const SQRT_EPS: f64 = 1e-8;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Transpose(NodeId),
    MatVec(NodeId, NodeId),
    VecMat(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    SumAll(NodeId),
    Reshape(NodeId, Vec<usize>),
    Gather(NodeId, Arc<[usize]>),
    Conv3 {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    SliceRow(NodeId, usize),
    SliceCols(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    Concat(Vec<NodeId>),
    WeightedSum {
        terms: Vec<Option<NodeId>>,
        weights: NodeId,
        softmax: bool,
    },
    Corr3(NodeId, NodeId, NodeId),
    Contract3 {
        c3: NodeId,
        m: NodeId,
        axis: usize,
    },
    CountSketch(NodeId, Arc<CountSketchParams>),
    CircConv(NodeId, NodeId),
    CrossEntropy(NodeId, usize),
    SignedSqrt(NodeId),
    L2Normalize(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape2(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    /// Gradient of the last `backward` loss with respect to `id`. Parameters
    /// always have a buffer (zeros when unreached); other nodes only if reached.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        let shape = self.nodes[id.0].value.shape().to_vec();
        match self.grads.get(id.0) {
            Some(Some(g)) => Some(Tensor::from_parts(shape, g.clone())),
            _ if self.params.contains(&id) && !self.grads.is_empty() => {
                Some(Tensor::zeros(&shape))
            }
            _ => None,
        }
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let value = self.eval(&op)?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Constant,
            value: t,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf node that receives a gradient buffer during `backward`.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        let id = self.constant(t);
        self.nodes[id.0].op = Op::Param;
        self.params.push(id);
        id
    }

    /// Replaces the value of a leaf. Dependent nodes keep their cached values
    /// until [`Graph::recompute`] runs.
    pub fn set_value(&mut self, id: NodeId, t: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Constant | Op::Param) {
            return Err(Error::Contract("only leaf values can be replaced".into()));
        }
        check_same_shape(&node.value, &t, "set_value")?;
        node.value = t;
        Ok(())
    }

    /// Re-evaluates every non-leaf node after `from`, in id order.
    pub fn recompute_after(&mut self, from: NodeId) -> Result<()> {
        for i in from.0 + 1..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Constant | Op::Param) {
                continue;
            }
            let v = self.eval(&self.nodes[i].op)?;
            self.nodes[i].value = v;
        }
        Ok(())
    }

    pub fn recompute(&mut self) -> Result<()> {
        if self.nodes.is_empty() {
            return Ok(());
        }
        for i in 0..self.nodes.len() {
            if !matches!(self.nodes[i].op, Op::Constant | Op::Param) {
                let v = self.eval(&self.nodes[i].op)?;
                self.nodes[i].value = v;
            }
        }
        Ok(())
    }

    // ---- builders -------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMulNT(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(a))
    }

    /// Matrix `[m×n]` times vector `[n]`, giving `[m]`.
    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> Result<NodeId> {
        self.push(Op::MatVec(a, x))
    }

    /// Weighted row sum: `p[n]` against rows of `x[n×d]`, giving `[d]`.
    pub fn vecmat(&mut self, p: NodeId, x: NodeId) -> Result<NodeId> {
        self.push(Op::VecMat(p, x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    /// `x[m×n] + b[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::AddRowBias(x, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumAll(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.push(Op::Reshape(a, shape))
    }

    /// Rows `table[ids[i]]`, giving `[ids.len() × d]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.push(Op::Gather(table, ids.into()))
    }

    /// Width-3 temporal convolution over rows with one row of zero padding at
    /// each end. `kernel` is `[3, d_in, d_out]` (taps t−1, t, t+1).
    pub fn conv3(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::Conv3 { x, kernel, bias })
    }

    /// Row `r` of a matrix as a `[1×n]` matrix.
    pub fn slice_row(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        self.push(Op::SliceRow(x, r))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::SliceCols(x, start, len))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.push(Op::ConcatRows(xs.to_vec()))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.push(Op::ConcatCols(xs.to_vec()))
    }

    /// Flattened concatenation into a vector.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Concat(xs.to_vec()))
    }

    /// `Σ_i weights[i]·terms[i] + weights[last]`; `None` terms count as zero.
    pub fn weighted_sum(&mut self, terms: &[Option<NodeId>], weights: NodeId) -> Result<NodeId> {
        self.push(Op::WeightedSum {
            terms: terms.to_vec(),
            weights,
            softmax: false,
        })
    }

    /// `softmax(Σ_i weights[i]·terms[i] + weights[last])`. The bias cancels
    /// under softmax, so it is left out of the forward sum: the output is then
    /// bitwise independent of it and its gradient is exactly zero.
    pub fn weighted_softmax(&mut self, terms: &[Option<NodeId>], weights: NodeId) -> Result<NodeId> {
        self.push(Op::WeightedSum {
            terms: terms.to_vec(),
            weights,
            softmax: true,
        })
    }

    /// `C[i,j,k] = Σ_l q[i,l]·v[j,l]·a[k,l]`
    pub fn corr3(&mut self, q: NodeId, v: NodeId, a: NodeId) -> Result<NodeId> {
        self.push(Op::Corr3(q, v, a))
    }

    /// Contracts the two axes of `c3` other than `axis` against matrix `m`
    /// (whose axes are the remaining axes in order).
    pub fn contract3(&mut self, c3: NodeId, m: NodeId, axis: usize) -> Result<NodeId> {
        self.push(Op::Contract3 { c3, m, axis })
    }

    pub fn count_sketch(&mut self, x: NodeId, p: Arc<CountSketchParams>) -> Result<NodeId> {
        self.push(Op::CountSketch(x, p))
    }

    pub fn circ_conv(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::CircConv(a, b))
    }

    /// `−log softmax(logits)[gold]` as a scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, gold: usize) -> Result<NodeId> {
        self.push(Op::CrossEntropy(logits, gold))
    }

    pub fn signed_sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SignedSqrt(a))
    }

    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::L2Normalize(a))
    }

    // ---- forward --------------------------------------------------------

    fn v(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        Ok(match op {
            Op::Constant | Op::Param => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => crate::tensor::matmul(self.v(*a), self.v(*b))?,
            Op::MatMulNT(a, b) => {
                let (a, b) = (self.v(*a), self.v(*b));
                match (shape2(a), shape2(b)) {
                    (Some((m, k)), Some((n, k2))) if k == k2 => {
                        let mut out = vec![0.0; m * n];
                        matmul_nt_into(a.data(), b.data(), &mut out, m, k, n);
                        Tensor::from_parts(vec![m, n], out)
                    }
                    _ => {
                        return dim_err(format!(
                            "a·bᵀ needs matrices with equal column counts: {:?} x {:?}",
                            a.shape(),
                            b.shape()
                        ))
                    }
                }
            }
            Op::Transpose(a) => crate::tensor::transpose(self.v(*a))?,
            Op::MatVec(a, x) => {
                let (a, x) = (self.v(*a), self.v(*x));
                match shape2(a) {
                    Some((m, n)) if x.shape() == [n] => {
                        let out = (0..m)
                            .map(|i| a.row(i).iter().zip(x.data()).map(|(p, q)| p * q).sum())
                            .collect();
                        Tensor::from_parts(vec![m], out)
                    }
                    _ => {
                        return dim_err(format!(
                            "matrix-vector product shapes {:?} x {:?}",
                            a.shape(),
                            x.shape()
                        ))
                    }
                }
            }
            Op::VecMat(p, x) => {
                let (p, x) = (self.v(*p), self.v(*x));
                match shape2(x) {
                    Some((n, d)) if p.shape() == [n] => {
                        let mut out = vec![0.0; d];
                        for (i, &w) in p.data().iter().enumerate() {
                            for (o, &xv) in out.iter_mut().zip(x.row(i)) {
                                *o += w * xv;
                            }
                        }
                        Tensor::from_parts(vec![d], out)
                    }
                    _ => {
                        return dim_err(format!(
                            "weighted row sum needs p[n] and x[n×d], got {:?} and {:?}",
                            p.shape(),
                            x.shape()
                        ))
                    }
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (self.v(*a), self.v(*b));
                check_same_shape(a, b, "add")?;
                let d = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                Tensor::from_parts(a.shape().to_vec(), d)
            }
            Op::AddRowBias(x, b) => {
                let (x, b) = (self.v(*x), self.v(*b));
                if b.shape() != [x.cols()] || x.rank() != 2 {
                    return dim_err(format!(
                        "row bias {:?} does not fit {:?}",
                        b.shape(),
                        x.shape()
                    ));
                }
                let n = x.cols();
                let d = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + b.data()[i % n])
                    .collect();
                Tensor::from_parts(x.shape().to_vec(), d)
            }
            Op::Mul(a, b) => {
                let (a, b) = (self.v(*a), self.v(*b));
                check_same_shape(a, b, "mul")?;
                let d = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                Tensor::from_parts(a.shape().to_vec(), d)
            }
            Op::Scale(a, c) => self.v(*a).map(|x| x * c),
            Op::Tanh(a) => self.v(*a).map(f64::tanh),
            Op::Sigmoid(a) => self.v(*a).map(sigmoid),
            Op::Relu(a) => self.v(*a).map(|x| x.max(0.0)),
            Op::Softmax(a) => crate::tensor::softmax_1d(self.v(*a))?,
            Op::SumAll(a) => Tensor::scalar(self.v(*a).sum()),
            Op::Reshape(a, shape) => self.v(*a).reshape(shape.clone())?,
            Op::Gather(table, ids) => {
                let t = self.v(*table);
                let Some((rows, d)) = shape2(t) else {
                    return dim_err(format!("gather table must be a matrix, got {:?}", t.shape()));
                };
                let mut out = Vec::with_capacity(ids.len() * d);
                for &id in ids.iter() {
                    if id >= rows {
                        return Err(Error::Vocab { id, size: rows });
                    }
                    out.extend_from_slice(t.row(id));
                }
                Tensor::new(vec![ids.len(), d], out)?
            }
            Op::Conv3 { x, kernel, bias } => {
                let (x, k, b) = (self.v(*x), self.v(*kernel), self.v(*bias));
                let Some((n, di)) = shape2(x) else {
                    return dim_err(format!("conv3 input must be a matrix, got {:?}", x.shape()));
                };
                let [3, ki, d_out] = *k.shape() else {
                    return dim_err(format!("conv3 kernel must be [3, d_in, d_out], got {:?}", k.shape()));
                };
                if ki != di || b.shape() != [d_out] {
                    return dim_err(format!(
                        "conv3 shapes: input {:?}, kernel {:?}, bias {:?}",
                        x.shape(),
                        k.shape(),
                        b.shape()
                    ));
                }
                let mut out = Vec::with_capacity(n * d_out);
                for _ in 0..n {
                    out.extend_from_slice(b.data());
                }
                let tap = di * d_out;
                for t in 0..n {
                    for (tau, src) in [(0usize, t.checked_sub(1)), (1, Some(t)), (2, Some(t + 1))] {
                        let Some(src) = src.filter(|&s| s < n) else { continue };
                        matmul_into(
                            x.row(src),
                            &k.data()[tau * tap..(tau + 1) * tap],
                            &mut out[t * d_out..(t + 1) * d_out],
                            1,
                            di,
                            d_out,
                        );
                    }
                }
                Tensor::from_parts(vec![n, d_out], out)
            }
            Op::SliceRow(x, r) => {
                let x = self.v(*x);
                if x.rank() != 2 || *r >= x.rows() {
                    return dim_err(format!("row {r} of {:?}", x.shape()));
                }
                Tensor::from_parts(vec![1, x.cols()], x.row(*r).to_vec())
            }
            Op::SliceCols(x, start, len) => {
                let x = self.v(*x);
                let Some((m, n)) = shape2(x) else {
                    return dim_err(format!("column slice of non-matrix {:?}", x.shape()));
                };
                if *len == 0 || start + len > n {
                    return dim_err(format!("columns {start}..{} of {:?}", start + len, x.shape()));
                }
                let mut out = Vec::with_capacity(m * len);
                for i in 0..m {
                    out.extend_from_slice(&x.row(i)[*start..start + len]);
                }
                Tensor::from_parts(vec![m, *len], out)
            }
            Op::ConcatRows(xs) => {
                let n = self.v(xs[0]).cols();
                let mut rows = 0;
                let mut out = Vec::new();
                for &x in xs {
                    let x = self.v(x);
                    if x.rank() != 2 || x.cols() != n {
                        return dim_err(format!("row concat of mismatched {:?}", x.shape()));
                    }
                    rows += x.rows();
                    out.extend_from_slice(x.data());
                }
                Tensor::from_parts(vec![rows, n], out)
            }
            Op::ConcatCols(xs) => {
                let m = self.v(xs[0]).rows();
                if xs.iter().any(|&x| self.v(x).rank() != 2 || self.v(x).rows() != m) {
                    return dim_err("column concat needs matrices with equal row counts");
                }
                let total: usize = xs.iter().map(|&x| self.v(x).cols()).sum();
                let mut out = Vec::with_capacity(m * total);
                for i in 0..m {
                    for &x in xs {
                        out.extend_from_slice(self.v(x).row(i));
                    }
                }
                Tensor::from_parts(vec![m, total], out)
            }
            Op::Concat(xs) => {
                let mut out = Vec::new();
                for &x in xs {
                    out.extend_from_slice(self.v(x).data());
                }
                let n = out.len();
                Tensor::from_parts(vec![n], out)
            }
            Op::WeightedSum {
                terms,
                weights,
                softmax,
            } => {
                let w = self.v(*weights);
                if w.shape() != [terms.len() + 1] {
                    return dim_err(format!(
                        "{} terms need {} weights, got {:?}",
                        terms.len(),
                        terms.len() + 1,
                        w.shape()
                    ));
                }
                let Some(first) = terms.iter().flatten().next() else {
                    return dim_err("weighted sum needs at least one present term");
                };
                let shape = self.v(*first).shape().to_vec();
                let mut out = vec![0.0; self.v(*first).len()];
                for (i, t) in terms.iter().enumerate() {
                    let Some(t) = t else { continue };
                    let t = self.v(*t);
                    if t.shape() != shape.as_slice() {
                        return dim_err(format!(
                            "potential lengths differ: {:?} vs {shape:?}",
                            t.shape()
                        ));
                    }
                    let wi = w.data()[i];
                    for (o, &x) in out.iter_mut().zip(t.data()) {
                        *o += wi * x;
                    }
                }
                if *softmax {
                    Tensor::from_parts(shape, crate::tensor::softmax_slice(&out))
                } else {
                    let bias = w.data()[terms.len()];
                    for o in &mut out {
                        *o += bias;
                    }
                    Tensor::from_parts(shape, out)
                }
            }
            Op::Corr3(q, v, a) => {
                let (q, v, a) = (self.v(*q), self.v(*v), self.v(*a));
                match (shape2(q), shape2(v), shape2(a)) {
                    (Some((nq, d)), Some((nv, d2)), Some((na, d3))) if d == d2 && d == d3 => {
                        let mut out = vec![0.0; nq * nv * na];
                        let mut qv = vec![0.0; d];
                        for i in 0..nq {
                            for j in 0..nv {
                                for ((o, x), y) in qv.iter_mut().zip(q.row(i)).zip(v.row(j)) {
                                    *o = x * y;
                                }
                                for k in 0..na {
                                    out[(i * nv + j) * na + k] =
                                        qv.iter().zip(a.row(k)).map(|(x, y)| x * y).sum();
                                }
                            }
                        }
                        Tensor::from_parts(vec![nq, nv, na], out)
                    }
                    _ => {
                        return dim_err(format!(
                            "corr3 needs matrices sharing d: {:?}, {:?}, {:?}",
                            q.shape(),
                            v.shape(),
                            a.shape()
                        ))
                    }
                }
            }
            Op::Contract3 { c3, m, axis } => {
                let (c, m) = (self.v(*c3), self.v(*m));
                let dims = contract_dims(c, m, *axis)?;
                let mut out = vec![0.0; dims[*axis]];
                for_each3(dims, |flat, idx| {
                    let (t, mi) = contract_index(dims, idx, *axis);
                    out[t] += m.data()[mi] * c.data()[flat];
                });
                Tensor::from_parts(vec![dims[*axis]], out)
            }
            Op::CountSketch(x, p) => {
                let x = self.v(*x);
                if x.len() != p.d_in() {
                    return dim_err(format!(
                        "count sketch expects length {}, got {:?}",
                        p.d_in(),
                        x.shape()
                    ));
                }
                Tensor::from_parts(vec![p.d_out()], count_sketch_slice(x.data(), p))
            }
            Op::CircConv(a, b) => {
                let (a, b) = (self.v(*a), self.v(*b));
                if a.rank() != 1 || a.shape() != b.shape() {
                    return dim_err(format!(
                        "circular convolution of {:?} and {:?}",
                        a.shape(),
                        b.shape()
                    ));
                }
                Tensor::from_parts(a.shape().to_vec(), circular_convolve_slice(a.data(), b.data()))
            }
            Op::CrossEntropy(z, gold) => {
                let z = self.v(*z);
                if *gold >= z.len() {
                    return Err(Error::Contract(format!(
                        "gold class {gold} out of range for {} logits",
                        z.len()
                    )));
                }
                Tensor::scalar(-log_softmax_slice(z.data())[*gold])
            }
            Op::SignedSqrt(a) => self
                .v(*a)
                .map(|x| x.signum() * ((x.abs() + SQRT_EPS).sqrt() - SQRT_EPS.sqrt())),
            Op::L2Normalize(a) => {
                let a = self.v(*a);
                let n = (a.data().iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
                a.map(|x| x / n)
            }
        })
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`, filling gradient buffers.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for &p in &self.params {
            if grads[p.0].is_none() {
                grads[p.0] = Some(vec![0.0; self.nodes[p.0].value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        macro_rules! buf {
            ($id:expr) => {
                slot(grads, self.nodes[$id.0].value.len(), $id)
            };
        }
        match &self.nodes[i].op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.v(*a), self.v(*b));
                let (m, k) = shape2(av).unwrap();
                let n = bv.cols();
                matmul_nt_into(g, bv.data(), buf!(*a), m, n, k);
                matmul_tn_into(av.data(), g, buf!(*b), k, m, n);
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.v(*a), self.v(*b));
                let (m, k) = shape2(av).unwrap();
                let n = bv.rows();
                matmul_into(g, bv.data(), buf!(*a), m, n, k);
                matmul_tn_into(g, av.data(), buf!(*b), n, m, k);
            }
            Op::Transpose(a) => {
                let (m, n) = shape2(self.v(*a)).unwrap();
                let ga = buf!(*a);
                for r in 0..m {
                    for c in 0..n {
                        ga[r * n + c] += g[c * m + r];
                    }
                }
            }
            Op::MatVec(a, x) => {
                let (av, xv) = (self.v(*a), self.v(*x));
                let (m, n) = shape2(av).unwrap();
                {
                    let ga = buf!(*a);
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[r] * xv.data()[c];
                        }
                    }
                }
                let gx = buf!(*x);
                for r in 0..m {
                    for c in 0..n {
                        gx[c] += av.data()[r * n + c] * g[r];
                    }
                }
            }
            Op::VecMat(p, x) => {
                let (pv, xv) = (self.v(*p), self.v(*x));
                let d = xv.cols();
                {
                    let gp = buf!(*p);
                    for (r, gpr) in gp.iter_mut().enumerate() {
                        *gpr += xv.row(r).iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                let gx = buf!(*x);
                for (r, &w) in pv.data().iter().enumerate() {
                    for c in 0..d {
                        gx[r * d + c] += w * g[c];
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(buf!(*a), g);
                add_into(buf!(*b), g);
            }
            Op::AddRowBias(x, b) => {
                add_into(buf!(*x), g);
                let n = self.v(*b).len();
                let gb = buf!(*b);
                for (j, &gv) in g.iter().enumerate() {
                    gb[j % n] += gv;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.v(*a).data(), self.v(*b).data());
                {
                    let ga = buf!(*a);
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                let gb = buf!(*b);
                for j in 0..g.len() {
                    gb[j] += g[j] * av[j];
                }
            }
            Op::Scale(a, c) => {
                for (o, &gv) in buf!(*a).iter_mut().zip(g) {
                    *o += c * gv;
                }
            }
            Op::Tanh(a) => {
                for ((o, &gv), &y) in buf!(*a).iter_mut().zip(g).zip(out.data()) {
                    *o += gv * (1.0 - y * y);
                }
            }
            Op::Sigmoid(a) => {
                for ((o, &gv), &y) in buf!(*a).iter_mut().zip(g).zip(out.data()) {
                    *o += gv * y * (1.0 - y);
                }
            }
            Op::Relu(a) => {
                let x = self.v(*a).data();
                for ((o, &gv), &xv) in buf!(*a).iter_mut().zip(g).zip(x) {
                    if xv > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::Softmax(a) => {
                let y = out.data();
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                for ((o, &gv), &yv) in buf!(*a).iter_mut().zip(g).zip(y) {
                    *o += yv * (gv - dot);
                }
            }
            Op::SumAll(a) => {
                for o in buf!(*a).iter_mut() {
                    *o += g[0];
                }
            }
            Op::Reshape(a, _) => add_into(buf!(*a), g),
            Op::Gather(table, ids) => {
                let d = self.v(*table).cols();
                let gt = buf!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[id * d + c] += g[r * d + c];
                    }
                }
            }
            Op::Conv3 { x, kernel, bias } => {
                let (xv, kv) = (self.v(*x), self.v(*kernel));
                let (n, di) = shape2(xv).unwrap();
                let d_out = self.v(*bias).len();
                let tap = di * d_out;
                {
                    let gb = buf!(*bias);
                    for t in 0..n {
                        add_into(gb, &g[t * d_out..(t + 1) * d_out]);
                    }
                }
                for t in 0..n {
                    let gt = &g[t * d_out..(t + 1) * d_out];
                    for (tau, src) in [(0usize, t.checked_sub(1)), (1, Some(t)), (2, Some(t + 1))] {
                        let Some(src) = src.filter(|&s| s < n) else { continue };
                        let kt = &kv.data()[tau * tap..(tau + 1) * tap];
                        // dx[src] += K_tau · g[t]ᵀ
                        matmul_nt_into(gt, kt, &mut buf!(*x)[src * di..(src + 1) * di], 1, d_out, di);
                        // dK_tau += x[src]ᵀ g[t]
                        matmul_tn_into(
                            xv.row(src),
                            gt,
                            &mut buf!(*kernel)[tau * tap..(tau + 1) * tap],
                            di,
                            1,
                            d_out,
                        );
                    }
                }
            }
            Op::SliceRow(x, r) => {
                let n = self.v(*x).cols();
                add_into(&mut buf!(*x)[r * n..(r + 1) * n], g);
            }
            Op::SliceCols(x, start, len) => {
                let n = self.v(*x).cols();
                let gx = buf!(*x);
                for (r, chunk) in g.chunks(*len).enumerate() {
                    add_into(&mut gx[r * n + start..r * n + start + len], chunk);
                }
            }
            Op::ConcatRows(xs) | Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = self.v(x).len();
                    add_into(buf!(x), &g[off..off + len]);
                    off += len;
                }
            }
            Op::ConcatCols(xs) => {
                let total = out.cols();
                let mut col = 0;
                for &x in xs {
                    let (m, c) = shape2(self.v(x)).unwrap();
                    let gx = buf!(x);
                    for r in 0..m {
                        add_into(&mut gx[r * c..(r + 1) * c], &g[r * total + col..r * total + col + c]);
                    }
                    col += c;
                }
            }
            Op::WeightedSum {
                terms,
                weights,
                softmax,
            } => {
                let dz;
                let g = if *softmax {
                    let y = out.data();
                    let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    dz = y.iter().zip(g).map(|(&yv, &gv)| yv * (gv - dot)).collect::<Vec<_>>();
                    &dz[..]
                } else {
                    g
                };
                let w = self.v(*weights).data().to_vec();
                for (k, t) in terms.iter().enumerate() {
                    let Some(t) = t else { continue };
                    let dot: f64 = self.v(*t).data().iter().zip(g).map(|(a, b)| a * b).sum();
                    buf!(*weights)[k] += dot;
                    for (o, &gv) in buf!(*t).iter_mut().zip(g) {
                        *o += w[k] * gv;
                    }
                }
                buf!(*weights)[terms.len()] += g.iter().sum::<f64>();
            }
            Op::Corr3(q, v, a) => {
                let (qv, vv, av) = (self.v(*q), self.v(*v), self.v(*a));
                let (nq, d) = shape2(qv).unwrap();
                let nv = vv.rows();
                let na = av.rows();
                let mut gq = vec![0.0; nq * d];
                let mut gvv = vec![0.0; nv * d];
                let mut ga = vec![0.0; na * d];
                for i in 0..nq {
                    for j in 0..nv {
                        for k in 0..na {
                            let gc = g[(i * nv + j) * na + k];
                            if gc == 0.0 {
                                continue;
                            }
                            let (qr, vr, ar) = (qv.row(i), vv.row(j), av.row(k));
                            for l in 0..d {
                                gq[i * d + l] += gc * vr[l] * ar[l];
                                gvv[j * d + l] += gc * qr[l] * ar[l];
                                ga[k * d + l] += gc * qr[l] * vr[l];
                            }
                        }
                    }
                }
                add_into(buf!(*q), &gq);
                add_into(buf!(*v), &gvv);
                add_into(buf!(*a), &ga);
            }
            Op::Contract3 { c3, m, axis } => {
                let (cv, mv) = (self.v(*c3), self.v(*m));
                let dims: [usize; 3] = cv.shape().try_into().unwrap();
                let mut gc = vec![0.0; cv.len()];
                let mut gm = vec![0.0; mv.len()];
                for_each3(dims, |flat, idx| {
                    let (t, mi) = contract_index(dims, idx, *axis);
                    gc[flat] += g[t] * mv.data()[mi];
                    gm[mi] += g[t] * cv.data()[flat];
                });
                add_into(buf!(*c3), &gc);
                add_into(buf!(*m), &gm);
            }
            Op::CountSketch(x, p) => {
                let gx = buf!(*x);
                for (j, (&h, &s)) in p.hashes().iter().zip(p.signs()).enumerate() {
                    gx[j] += f64::from(s) * g[h as usize];
                }
            }
            Op::CircConv(a, b) => {
                let (av, bv) = (self.v(*a).data(), self.v(*b).data());
                let ga = circular_correlate_slice(g, bv);
                let gb = circular_correlate_slice(g, av);
                add_into(buf!(*a), &ga);
                add_into(buf!(*b), &gb);
            }
            Op::CrossEntropy(z, gold) => {
                let p = softmax_slice(self.v(*z).data());
                let gz = buf!(*z);
                for (j, pj) in p.into_iter().enumerate() {
                    let t = if j == *gold { 1.0 } else { 0.0 };
                    gz[j] += g[0] * (pj - t);
                }
            }
            Op::SignedSqrt(a) => {
                let x = self.v(*a).data();
                for ((o, &gv), &xv) in buf!(*a).iter_mut().zip(g).zip(x) {
                    *o += gv * 0.5 / (xv.abs() + SQRT_EPS).sqrt();
                }
            }
            Op::L2Normalize(a) => {
                let x = self.v(*a).data();
                let n = (x.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
                let y = out.data();
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                for ((o, &gv), &yv) in buf!(*a).iter_mut().zip(g).zip(y) {
                    *o += (gv - yv * dot) / n;
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], len: usize, id: NodeId) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn contract_dims(c: &Tensor, m: &Tensor, axis: usize) -> Result<[usize; 3]> {
    if axis > 2 {
        return Err(Error::Contract(format!("contraction axis {axis} out of range")));
    }
    let Ok(dims) = <[usize; 3]>::try_from(c.shape()) else {
        return dim_err(format!("expected a 3-way tensor, got {:?}", c.shape()));
    };
    let rest: Vec<usize> = (0..3).filter(|&a| a != axis).map(|a| dims[a]).collect();
    if m.shape() != rest.as_slice() {
        return dim_err(format!(
            "marginal weights {:?} do not match summed axes {rest:?}",
            m.shape()
        ));
    }
    Ok(dims)
}

fn for_each3(dims: [usize; 3], mut f: impl FnMut(usize, [usize; 3])) {
    let mut flat = 0;
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                f(flat, [i, j, k]);
                flat += 1;
            }
        }
    }
}

/// (target index, flat index into the marginal-weight matrix)
fn contract_index(dims: [usize; 3], idx: [usize; 3], axis: usize) -> (usize, usize) {
    match axis {
        0 => (idx[0], idx[1] * dims[2] + idx[2]),
        1 => (idx[1], idx[0] * dims[2] + idx[2]),
        _ => (idx[2], idx[0] * dims[1] + idx[1]),
    }
}

/// Central-difference check of every parameter entry against the analytic
/// gradient. Returns the largest `|a − n| / max(1e-8, |a| + |n|)`.
pub fn grad_check(g: &mut Graph, loss: NodeId, eps: f64) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::Contract("grad_check needs eps > 0".into()));
    }
    if g.params.is_empty() {
        return Ok(0.0);
    }
    g.backward(loss)?;
    let params = g.params.clone();
    let mut worst = 0.0f64;
    for p in params {
        let analytic = g.grad(p).expect("parameter gradient buffer");
        let orig = g.value(p).clone();
        let shape = orig.shape().to_vec();
        for k in 0..orig.len() {
            let mut eval_at = |delta: f64| -> Result<f64> {
                let mut d = orig.to_vec();
                d[k] += delta;
                g.set_value(p, Tensor::from_parts(shape.clone(), d))?;
                g.recompute_after(p)?;
                Ok(g.value(loss).item())
            };
            let fp = eval_at(eps)?;
            let fm = eval_at(-eps)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        g.set_value(p, orig)?;
        g.recompute_after(p)?;
    }
    Ok(worst)
}
