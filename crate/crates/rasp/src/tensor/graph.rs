//! The computation graph: a tape of nodes in topological order.
//!
//! Construction is single-threaded per graph; separate graphs share no
//! mutable state and may run on separate threads. `backward` walks the
//! tape once in reverse, accumulating gradients into every node that
//! requires them.

use super::Tensor;
use crate::{Error, Result};

/// sqrt arguments are clamped here from below; the gradient is zero below
/// the floor. Keeps the weighted-std path finite when float error makes a
/// variance slightly negative.
pub const SQRT_FLOOR: f64 = 1e-10;

/// arccos arguments are clamped to `[-1 + ACOS_MARGIN, 1 - ACOS_MARGIN]`
/// before differentiation; the gradient is zero outside the clamp.
pub const ACOS_MARGIN: f64 = 1e-7;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Operation kinds recorded on the tape.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    SqrtClamped,
    Sigmoid,
    Exp,
    Ln,
    Cos,
    AcosClamped,
    SoftmaxRows,
    MeanLast,
    SumLast,
    SumAll,
    ConcatRows,
    TileCols { cols: usize },
    ShiftCols { offset: isize },
    Reshape,
    Scale { factor: f64 },
    AddScalar { offset: f64 },
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    tensor: Tensor,
}

/// Reverse-mode autodiff tape.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

// ----------------------------------------------------------------------
// broadcasting helpers (rank <= 2, numpy-style right alignment)
// ----------------------------------------------------------------------

/// Output shape of a broadcast binary op, or an error naming the op.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() > 2 || b.len() > 2 {
        return Err(Error::InvalidOp {
            op,
            msg: format!("rank > 2 unsupported: {:?} vs {:?}", a, b),
        });
    }
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// View any rank <= 2 shape as (rows, cols).
fn as2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!("rank checked by broadcast_shape"),
    }
}

/// Row/col strides of `shape` when broadcast against an (r, c) output;
/// broadcast axes get stride 0.
fn strides2(shape: &[usize], out: (usize, usize)) -> (usize, usize) {
    let (r, c) = as2(shape);
    let sr = if r == out.0 { c } else { 0 };
    let sc = if c == out.1 { 1 } else { 0 };
    (sr, sc)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf; it participates in backward iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], tensor)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, mut tensor: Tensor) -> NodeId {
        tensor.requires_grad = false;
        self.push(Op::Leaf, vec![], tensor)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn tensor(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].tensor.data()
    }

    pub fn item(&self, id: NodeId) -> Result<f64> {
        self.nodes[id.0].tensor.item()
    }

    /// Gradient of a node after [`Graph::backward`], if one was computed.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, mut tensor: Tensor) -> NodeId {
        if !matches!(op, Op::Leaf) {
            tensor.requires_grad = parents
                .iter()
                .any(|p| self.nodes[p.0].tensor.requires_grad);
        }
        tensor.grad = None;
        self.nodes.push(Node { op, parents, tensor });
        NodeId(self.nodes.len() - 1)
    }

    // ------------------------------------------------------------------
    // binary elementwise ops with broadcasting
    // ------------------------------------------------------------------

    fn binary(
        &mut self,
        op: Op,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let out_shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let out2 = as2(&out_shape);
        let (asr, asc) = strides2(self.shape(a), out2);
        let (bsr, bsc) = strides2(self.shape(b), out2);
        let ad = self.data(a);
        let bd = self.data(b);
        let mut data = Vec::with_capacity(out2.0 * out2.1);
        for r in 0..out2.0 {
            for c in 0..out2.1 {
                data.push(f(ad[r * asr + c * asc], bd[r * bsr + c * bsc]));
            }
        }
        Ok(self.push(op, vec![a, b], Tensor::new(out_shape, data)?))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, "add", a, b, |x, y| x + y)
    }

    /// Elementwise difference with broadcasting.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, "sub", a, b, |x, y| x - y)
    }

    /// Hadamard product with broadcasting.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, "mul", a, b, |x, y| x * y)
    }

    /// Elementwise quotient with broadcasting.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Div, "div", a, b, |x, y| x / y)
    }

    // ------------------------------------------------------------------
    // matrix multiply
    // ------------------------------------------------------------------

    /// `[m,k] @ [k,n] -> [m,n]`; both operands must be rank 2.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self
            .tensor(a)
            .dims2()
            .map_err(|_| Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            })?;
        let (k2, n) = self
            .tensor(b)
            .dims2()
            .map_err(|_| Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            })?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), m, k, n, &mut out);
        Ok(self.push(Op::MatMul, vec![a, b], Tensor::new(vec![m, n], out)?))
    }

    // ------------------------------------------------------------------
    // unary elementwise ops
    // ------------------------------------------------------------------

    fn unary(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op, vec![a], Tensor::new(shape, data).expect("same shape"))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu, a, |x| if x > 0.0 { x } else { 0.0 })
    }

    /// `sqrt(max(x, SQRT_FLOOR))`, zero gradient below the floor.
    pub fn sqrt_clamped(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::SqrtClamped, a, |x| x.max(SQRT_FLOOR).sqrt())
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid, a, |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Ln, a, f64::ln)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Cos, a, f64::cos)
    }

    /// `acos` of the argument clamped to `[-1 + ACOS_MARGIN, 1 - ACOS_MARGIN]`.
    pub fn acos_clamped(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::AcosClamped, a, |x| {
            x.clamp(-1.0 + ACOS_MARGIN, 1.0 - ACOS_MARGIN).acos()
        })
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.unary(Op::Scale { factor }, a, |x| x * factor)
    }

    /// Add a constant to every element.
    pub fn add_scalar(&mut self, a: NodeId, offset: f64) -> NodeId {
        self.unary(Op::AddScalar { offset }, a, |x| x + offset)
    }

    // ------------------------------------------------------------------
    // softmax and reductions
    // ------------------------------------------------------------------

    /// Row-wise softmax of a rank-2 tensor over its last axis, with
    /// per-row max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.tensor(a).dims2().map_err(|_| Error::InvalidOp {
            op: "softmax_rows",
            msg: format!("expected rank-2 input, got shape {:?}", self.shape(a)),
        })?;
        let ad = self.data(a);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &ad[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - m).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        Ok(self.push(
            Op::SoftmaxRows,
            vec![a],
            Tensor::new(vec![rows, cols], data)?,
        ))
    }

    fn reduce_last(&mut self, op: Op, a: NodeId, mean: bool) -> Result<NodeId> {
        let name = if mean { "mean_last" } else { "sum_last" };
        let (shape, rows, cols) = match self.shape(a) {
            [r, c] => (vec![*r], *r, *c),
            [n] => (vec![], 1usize, *n),
            other => {
                return Err(Error::InvalidOp {
                    op: name,
                    msg: format!("expected rank 1 or 2, got shape {:?}", other),
                })
            }
        };
        let ad = self.data(a);
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            let mut s = 0.0;
            for c in 0..cols {
                s += ad[r * cols + c];
            }
            data[r] = if mean { s / cols as f64 } else { s };
        }
        Ok(self.push(op, vec![a], Tensor::new(shape, data)?))
    }

    /// Mean over the last axis: `[d,t] -> [d]`, `[t] -> scalar`.
    pub fn mean_last(&mut self, a: NodeId) -> Result<NodeId> {
        self.reduce_last(Op::MeanLast, a, true)
    }

    /// Sum over the last axis: `[d,t] -> [d]`, `[t] -> scalar`.
    pub fn sum_last(&mut self, a: NodeId) -> Result<NodeId> {
        self.reduce_last(Op::SumLast, a, false)
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.data(a).iter().sum();
        self.push(Op::SumAll, vec![a], Tensor::scalar(s))
    }

    // ------------------------------------------------------------------
    // shape ops
    // ------------------------------------------------------------------

    /// Concatenate along the first axis. Rank-2 inputs must agree on the
    /// column count; rank-1 inputs concatenate end to end.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = match (sa.as_slice(), sb.as_slice()) {
            ([r1, c1], [r2, c2]) if c1 == c2 => vec![r1 + r2, *c1],
            ([n1], [n2]) => vec![n1 + n2],
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        let mut data = Vec::with_capacity(self.data(a).len() + self.data(b).len());
        data.extend_from_slice(self.data(a));
        data.extend_from_slice(self.data(b));
        Ok(self.push(Op::ConcatRows, vec![a, b], Tensor::new(out_shape, data)?))
    }

    /// Repeat a rank-1 vector as `cols` identical columns: `[d] -> [d, cols]`.
    pub fn tile_cols(&mut self, a: NodeId, cols: usize) -> Result<NodeId> {
        let d = match self.shape(a) {
            [d] => *d,
            other => {
                return Err(Error::InvalidOp {
                    op: "tile_cols",
                    msg: format!("expected rank-1 input, got shape {:?}", other),
                })
            }
        };
        if cols == 0 {
            return Err(Error::InvalidOp {
                op: "tile_cols",
                msg: "cols must be >= 1".into(),
            });
        }
        let ad = self.data(a);
        let mut data = vec![0.0; d * cols];
        for r in 0..d {
            for c in 0..cols {
                data[r * cols + c] = ad[r];
            }
        }
        Ok(self.push(
            Op::TileCols { cols },
            vec![a],
            Tensor::new(vec![d, cols], data)?,
        ))
    }

    /// Shift columns of a rank-2 tensor: `out[:, t] = in[:, t + offset]`,
    /// zero where `t + offset` falls outside the input.
    pub fn shift_cols(&mut self, a: NodeId, offset: isize) -> Result<NodeId> {
        let (d, t) = self.tensor(a).dims2().map_err(|_| Error::InvalidOp {
            op: "shift_cols",
            msg: format!("expected rank-2 input, got shape {:?}", self.shape(a)),
        })?;
        let ad = self.data(a);
        let mut data = vec![0.0; d * t];
        for r in 0..d {
            for c in 0..t {
                let src = c as isize + offset;
                if src >= 0 && (src as usize) < t {
                    data[r * t + c] = ad[r * t + src as usize];
                }
            }
        }
        Ok(self.push(
            Op::ShiftCols { offset },
            vec![a],
            Tensor::new(vec![d, t], data)?,
        ))
    }

    /// Reinterpret the data with a new shape of identical element count.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.data(a).len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidOp {
                op: "reshape",
                msg: format!(
                    "cannot reshape {:?} ({} elements) to {:?}",
                    self.shape(a),
                    self.data(a).len(),
                    shape
                ),
            });
        }
        let data = self.data(a).to_vec();
        Ok(self.push(Op::Reshape, vec![a], Tensor::new(shape, data)?))
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Clears previous gradients,
    /// then accumulates `dLoss/dNode` into every node reachable from
    /// `loss` that requires a gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].tensor.is_scalar() {
            return Err(Error::InvalidOp {
                op: "backward",
                msg: format!(
                    "loss must be scalar, got shape {:?}",
                    self.shape(loss)
                ),
            });
        }
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
        if !self.nodes[loss.0].tensor.requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].tensor.grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].tensor.grad.is_none()
                || matches!(self.nodes[idx].op, Op::Leaf)
            {
                continue;
            }
            let gout = self.nodes[idx].tensor.grad.clone().expect("checked");
            self.backprop_node(idx, &gout);
        }
        Ok(())
    }

    fn needs_grad(&self, p: NodeId) -> bool {
        self.nodes[p.0].tensor.requires_grad
    }

    fn add_grad(&mut self, p: NodeId, delta: Vec<f64>) {
        let tensor = &mut self.nodes[p.0].tensor;
        debug_assert_eq!(delta.len(), tensor.numel());
        match &mut tensor.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => tensor.grad = Some(delta),
        }
    }

    /// Accumulate a broadcast-aware contribution into parent `p`.
    fn add_grad_broadcast(&mut self, p: NodeId, out_shape: &[usize], contrib: &[f64]) {
        let out2 = as2(out_shape);
        let (sr, sc) = strides2(self.shape(p), out2);
        let mut delta = vec![0.0; self.data(p).len()];
        for r in 0..out2.0 {
            for c in 0..out2.1 {
                delta[r * sr + c * sc] += contrib[r * out2.1 + c];
            }
        }
        self.add_grad(p, delta);
    }

    fn backprop_node(&mut self, idx: usize, gout: &[f64]) {
        let op = self.nodes[idx].op.clone();
        let parents = self.nodes[idx].parents.clone();
        match op {
            Op::Leaf => {}
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                let (a, b) = (parents[0], parents[1]);
                let out_shape = self.shape(NodeId(idx)).to_vec();
                let out2 = as2(&out_shape);
                let (asr, asc) = strides2(self.shape(a), out2);
                let (bsr, bsc) = strides2(self.shape(b), out2);
                if self.needs_grad(a) {
                    let bd = self.data(b);
                    let mut contrib = vec![0.0; gout.len()];
                    for r in 0..out2.0 {
                        for c in 0..out2.1 {
                            let g = gout[r * out2.1 + c];
                            contrib[r * out2.1 + c] = match op {
                                Op::Add | Op::Sub => g,
                                Op::Mul => g * bd[r * bsr + c * bsc],
                                Op::Div => g / bd[r * bsr + c * bsc],
                                _ => unreachable!(),
                            };
                        }
                    }
                    self.add_grad_broadcast(a, &out_shape, &contrib);
                }
                if self.needs_grad(b) {
                    let ad = self.data(a);
                    let bd = self.data(b);
                    let mut contrib = vec![0.0; gout.len()];
                    for r in 0..out2.0 {
                        for c in 0..out2.1 {
                            let g = gout[r * out2.1 + c];
                            contrib[r * out2.1 + c] = match op {
                                Op::Add => g,
                                Op::Sub => -g,
                                Op::Mul => g * ad[r * asr + c * asc],
                                Op::Div => {
                                    let bv = bd[r * bsr + c * bsc];
                                    -g * ad[r * asr + c * asc] / (bv * bv)
                                }
                                _ => unreachable!(),
                            };
                        }
                    }
                    self.add_grad_broadcast(b, &out_shape, &contrib);
                }
            }
            Op::MatMul => {
                let (a, b) = (parents[0], parents[1]);
                let (m, k) = self.tensor(a).dims2().expect("checked at forward");
                let n = self.shape(b)[1];
                if self.needs_grad(a) {
                    // dA[i,p] = sum_j gout[i,j] * B[p,j]
                    let bd = self.data(b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let go = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += go[j] * brow[j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    self.add_grad(a, da);
                }
                if self.needs_grad(b) {
                    // dB[p,j] = sum_i A[i,p] * gout[i,j]
                    let ad = self.data(a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let go = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let dbr = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                dbr[j] += av * go[j];
                            }
                        }
                    }
                    self.add_grad(b, db);
                }
            }
            Op::Relu => {
                let a = parents[0];
                if self.needs_grad(a) {
                    let ad = self.data(a);
                    let delta = gout
                        .iter()
                        .zip(ad)
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    self.add_grad(a, delta);
                }
            }
            Op::SqrtClamped => {
                let a = parents[0];
                if self.needs_grad(a) {
                    let ad = self.data(a);
                    let yd = self.data(NodeId(idx));
                    let delta = gout
                        .iter()
                        .zip(ad.iter().zip(yd))
                        .map(|(&g, (&x, &y))| if x > SQRT_FLOOR { g * 0.5 / y } else { 0.0 })
                        .collect();
                    self.add_grad(a, delta);
                }
            }
            Op::Sigmoid => {
                let a = parents[0];
                if self.needs_grad(a) {
                    let yd = self.data(NodeId(idx));
                    let delta = gout
                        .iter()
                        .zip(yd)
                        .map(|(&g, &y)| g * y * (1.0 - y))
                        .collect();
                    self.add_grad(a, delta);
                }
            }
            Op::Exp => {
                let a = parents[0];
                if self.needs_grad(a) {
                    let yd = self.data(NodeId(idx));
                    let delta = gout.iter().zip(yd).map(|(&g, &y)| g * y).collect();
                    self.add_grad(a, delta);
                }
            }
            Op::Ln => {
                let a = parents[0];
                if self.needs_grad(a) {
                    let ad = self.data(a);
                    let delta = gout.iter().zip(ad).map(|(&g, &x)| g / x).collect();
                    self.add_grad(a, delta);
                }
            }
            Op::Cos => {
                let a = parents[0];
                if self.needs_grad(a) {
                    let ad = self.data(a);
                    let delta = gout
                        .iter()
                        .zip(ad)
                        .map(|(&g, &x)| -g * x.sin())
                        .collect();
                    self.add_grad(a, delta);
                }
            }
            Op::AcosClamped => {
                let a = parents[0];
                if self.needs_grad(a) {
                    let (lo, hi) = (-1.0 + ACOS_MARGIN, 1.0 - ACOS_MARGIN);
                    let ad = self.data(a);
                    let delta = gout
                        .iter()
                        .zip(ad)
                        .map(|(&g, &x)| {
                            if x > lo && x < hi {
                                -g / (1.0 - x * x).sqrt()
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.add_grad(a, delta);
                }
            }
            Op::SoftmaxRows => {
                let a = parents[0];
                if self.needs_grad(a) {
                    let yd = self.data(NodeId(idx));
                    let (rows, cols) = self.tensor(NodeId(idx)).dims2().expect("rank 2");
                    let mut delta = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let y = &yd[r * cols..(r + 1) * cols];
                        let g = &gout[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(g).map(|(&yi, &gi)| yi * gi).sum();
                        let d = &mut delta[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            d[j] = y[j] * (g[j] - dot);
                        }
                    }
                    self.add_grad(a, delta);
                }
            }
            Op::MeanLast | Op::SumLast => {
                let a = parents[0];
                if self.needs_grad(a) {
                    let (rows, cols) = as2(self.shape(a));
                    let scale = if matches!(op, Op::MeanLast) {
                        1.0 / cols as f64
                    } else {
                        1.0
                    };
                    let mut delta = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let g = gout[r] * scale;
                        for c in 0..cols {
                            delta[r * cols + c] = g;
                        }
                    }
                    self.add_grad(a, delta);
                }
            }
            Op::SumAll => {
                let a = parents[0];
                if self.needs_grad(a) {
                    let delta = vec![gout[0]; self.data(a).len()];
                    self.add_grad(a, delta);
                }
            }
            Op::ConcatRows => {
                let (a, b) = (parents[0], parents[1]);
                let na = self.data(a).len();
                if self.needs_grad(a) {
                    self.add_grad(a, gout[..na].to_vec());
                }
                if self.needs_grad(b) {
                    self.add_grad(b, gout[na..].to_vec());
                }
            }
            Op::TileCols { cols } => {
                let a = parents[0];
                if self.needs_grad(a) {
                    let d = self.data(a).len();
                    let mut delta = vec![0.0; d];
                    for r in 0..d {
                        let mut s = 0.0;
                        for c in 0..cols {
                            s += gout[r * cols + c];
                        }
                        delta[r] = s;
                    }
                    self.add_grad(a, delta);
                }
            }
            Op::ShiftCols { offset } => {
                let a = parents[0];
                if self.needs_grad(a) {
                    let (d, t) = self.tensor(a).dims2().expect("rank 2");
                    let mut delta = vec![0.0; d * t];
                    for r in 0..d {
                        for c in 0..t {
                            let src = c as isize + offset;
                            if src >= 0 && (src as usize) < t {
                                delta[r * t + src as usize] += gout[r * t + c];
                            }
                        }
                    }
                    self.add_grad(a, delta);
                }
            }
            Op::Reshape => {
                let a = parents[0];
                if self.needs_grad(a) {
                    self.add_grad(a, gout.to_vec());
                }
            }
            Op::Scale { factor } => {
                let a = parents[0];
                if self.needs_grad(a) {
                    let delta = gout.iter().map(|&g| g * factor).collect();
                    self.add_grad(a, delta);
                }
            }
            Op::AddScalar { .. } => {
                let a = parents[0];
                if self.needs_grad(a) {
                    self.add_grad(a, gout.to_vec());
                }
            }
        }
    }
}

/// `out += a @ b` with `out` pre-zeroed; row-major, ikj order.
fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}
