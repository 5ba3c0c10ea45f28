use std::f64::consts::PI;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Sigmoid,
    /// Tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    Gelu,
    Relu,
    Log,
    Exp,
    Square,
    Recip,
    Sqrt,
    Add,
    Sub,
    Mul,
}

impl ElementwiseKind {
    pub fn arity(self) -> usize {
        match self {
            ElementwiseKind::Add | ElementwiseKind::Sub | ElementwiseKind::Mul => 2,
            _ => 1,
        }
    }
}

/// Reduction axis for [`Tape::softmax`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Along rows of a matrix, i.e. each column is normalized.
    Rows,
    /// Along columns, i.e. each row is normalized. Vectors use this axis.
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Pointwise(ElementwiseKind, NodeId),
    Pairwise(ElementwiseKind, NodeId, NodeId),
    AddRow(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    Affine { x: NodeId, scale: f64 },
    ScaleBy(NodeId, NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Pow { x: NodeId, exponent: f64 },
    Softmax(NodeId, Axis),
    Conv1d { x: NodeId, kernel: NodeId, pad: usize },
    /// `selected` holds, per output column, the `k` flat input indices that were averaged.
    TopKMean { x: NodeId, k: usize, selected: Vec<usize> },
    Sum(NodeId),
    Mean(NodeId),
    SumCols(NodeId),
    NormalizeRows { x: NodeId, eps: f64 },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::Pairwise(_, a, b)
            | Op::AddRow(a, b)
            | Op::ConcatCols(a, b)
            | Op::ScaleBy(a, b) => vec![a, b],
            Op::Conv1d { x, kernel, .. } => vec![x, kernel],
            Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Pointwise(_, x)
            | Op::Affine { x, .. }
            | Op::Clamp { x, .. }
            | Op::Pow { x, .. }
            | Op::Softmax(x, _)
            | Op::TopKMean { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumCols(x)
            | Op::NormalizeRows { x, .. } => vec![x],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order of the
/// graph. A node is *tracked* when it is a gradient leaf or depends on one;
/// backward only materializes gradients for tracked nodes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`NodeId`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or zeros of `shape` when no gradient reached it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let tracked = op.inputs().iter().any(|id| self.nodes[id.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        NodeId(self.nodes.len() - 1)
    }

    /// Gradient-tracked input (parameter or differentiated input).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn is_tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    fn require_rank2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        match *self.shape(id) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            }),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.require_rank2("matmul", a)?;
        let (k2, n) = self.require_rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bj) in row.iter_mut().zip(brow) {
                    *o += s * bj;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.require_rank2("transpose", x)?;
        let value = transpose_data(self.value(x).data(), r, c);
        let value = Tensor::new(vec![c, r], value)?;
        Ok(self.push(value, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Apply a pointwise operation. Binary kinds require equal shapes.
    pub fn elementwise(&mut self, kind: ElementwiseKind, args: &[NodeId]) -> Result<NodeId> {
        if args.len() != kind.arity() {
            return Err(Error::Contract(format!(
                "{kind:?} takes {} argument(s), got {}",
                kind.arity(),
                args.len()
            )));
        }
        match kind {
            ElementwiseKind::Add | ElementwiseKind::Sub | ElementwiseKind::Mul => {
                self.pairwise(kind, args[0], args[1])
            }
            _ => self.pointwise(kind, args[0]),
        }
    }

    fn pointwise(&mut self, kind: ElementwiseKind, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let check = |bad: fn(f64) -> bool, op: &'static str, what: &str| -> Result<()> {
            match xv.data().iter().position(|&v| bad(v)) {
                Some(i) => Err(Error::Domain {
                    op,
                    detail: format!("{what} at flat index {i}: {}", xv.data()[i]),
                }),
                None => Ok(()),
            }
        };
        let value = match kind {
            ElementwiseKind::Sigmoid => xv.map(sigmoid),
            ElementwiseKind::Gelu => xv.map(gelu),
            ElementwiseKind::Relu => xv.map(|v| v.max(0.0)),
            ElementwiseKind::Log => {
                check(|v| v <= 0.0 || v.is_nan(), "log", "non-positive value")?;
                xv.map(f64::ln)
            }
            ElementwiseKind::Exp => xv.map(f64::exp),
            ElementwiseKind::Square => xv.map(|v| v * v),
            ElementwiseKind::Recip => {
                check(|v| v == 0.0, "recip", "zero value")?;
                xv.map(f64::recip)
            }
            ElementwiseKind::Sqrt => {
                check(|v| v < 0.0 || v.is_nan(), "sqrt", "negative value")?;
                xv.map(f64::sqrt)
            }
            _ => unreachable!("binary kind routed to pointwise"),
        };
        Ok(self.push(value, Op::Pointwise(kind, x)))
    }

    fn pairwise(&mut self, kind: ElementwiseKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension {
                op: "elementwise",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let f: fn(f64, f64) -> f64 = match kind {
            ElementwiseKind::Add => |x, y| x + y,
            ElementwiseKind::Sub => |x, y| x - y,
            ElementwiseKind::Mul => |x, y| x * y,
            _ => unreachable!("unary kind routed to pairwise"),
        };
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Pairwise(kind, a, b)))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.pointwise(ElementwiseKind::Sigmoid, x)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.pointwise(ElementwiseKind::Gelu, x)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.pointwise(ElementwiseKind::Relu, x)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.pointwise(ElementwiseKind::Log, x)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.pointwise(ElementwiseKind::Exp, x)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.pointwise(ElementwiseKind::Square, x)
    }

    pub fn recip(&mut self, x: NodeId) -> Result<NodeId> {
        self.pointwise(ElementwiseKind::Recip, x)
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.pointwise(ElementwiseKind::Sqrt, x)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.pairwise(ElementwiseKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.pairwise(ElementwiseKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.pairwise(ElementwiseKind::Mul, a, b)
    }

    /// `x[r, :] + bias` for every row `r`. The only row broadcast on the tape.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.require_rank2("add_row", x)?;
        if self.shape(bias) != [c] {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: vec![r, c],
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.push(value, Op::AddRow(x, bias)))
    }

    /// Columnwise concatenation `[a | b]`.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.require_rank2("concat_cols", a)?;
        let (rb, cb) = self.require_rank2("concat_cols", b)?;
        if ra != rb {
            return Err(Error::Dimension {
                op: "concat_cols",
                lhs: vec![ra, ca],
                rhs: vec![rb, cb],
            });
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let value = Tensor::new(vec![ra, ca + cb], data)?;
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let value = self.value(x).map(|v| scale * v + shift);
        Ok(self.push(value, Op::Affine { x, scale }))
    }

    /// Explicit scalar-times-array product; `s` must be a scalar node.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).numel() != 1 {
            return Err(Error::Dimension {
                op: "scale_by",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s).item();
        let value = self.value(x).map(|v| v * sv);
        Ok(self.push(value, Op::ScaleBy(x, s)))
    }

    /// Clamp into `[lo, hi]`; gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi {
            return Err(Error::Config(format!("clamp bounds inverted: {lo} > {hi}")));
        }
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        Ok(self.push(value, Op::Clamp { x, lo, hi }))
    }

    /// `x^exponent` for non-negative `x`.
    pub fn pow(&mut self, x: NodeId, exponent: f64) -> Result<NodeId> {
        let xv = self.value(x);
        if let Some(&v) = xv.data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "pow",
                detail: format!("negative base {v}"),
            });
        }
        let value = xv.map(|v| v.powf(exponent));
        Ok(self.push(value, Op::Pow { x, exponent }))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: Axis) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric {
                op: "softmax",
                detail: "NaN input".into(),
            });
        }
        let (r, c) = xv.dims2();
        let mut data = xv.data().to_vec();
        for_each_lane(r, c, axis, |idx| {
            let max = idx.iter().map(|&i| data[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &i in idx {
                data[i] = (data[i] - max).exp();
                total += data[i];
            }
            for &i in idx {
                data[i] /= total;
            }
        });
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax(x, axis)))
    }

    /// Temporal convolution of `x: N x d_in` with `kernel: w x d_in x d_out`,
    /// zero padded by `pad` on both ends. Requires odd `w` and `pad = (w-1)/2`.
    pub fn conv1d(&mut self, x: NodeId, kernel: NodeId, pad: usize) -> Result<NodeId> {
        let (n, d_in) = self.require_rank2("conv1d", x)?;
        let (w, k_in, d_out) = match *self.shape(kernel) {
            [w, i, o] => (w, i, o),
            ref s => {
                return Err(Error::Dimension {
                    op: "conv1d",
                    lhs: vec![n, d_in],
                    rhs: s.to_vec(),
                })
            }
        };
        if w % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel width {w} must be odd")));
        }
        if pad != (w - 1) / 2 {
            return Err(Error::Config(format!(
                "conv1d padding {pad} does not preserve length for width {w}"
            )));
        }
        if k_in != d_in {
            return Err(Error::Dimension {
                op: "conv1d",
                lhs: vec![n, d_in],
                rhs: vec![w, k_in, d_out],
            });
        }
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let mut out = vec![0.0; n * d_out];
        for t in 0..n {
            let orow = &mut out[t * d_out..(t + 1) * d_out];
            for j in 0..w {
                let src = t + j;
                if src < pad || src - pad >= n {
                    continue;
                }
                let xrow = &xv[(src - pad) * d_in..(src - pad + 1) * d_in];
                let kj = &kv[j * d_in * d_out..(j + 1) * d_in * d_out];
                for (i, &xi) in xrow.iter().enumerate() {
                    let krow = &kj[i * d_out..(i + 1) * d_out];
                    for (o, &kk) in orow.iter_mut().zip(krow) {
                        *o += xi * kk;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, d_out], out)?;
        Ok(self.push(value, Op::Conv1d { x, kernel, pad }))
    }

    /// Mean of the `k` largest entries. A vector reduces to a scalar; a
    /// matrix reduces each column, giving a vector of column scores. Ties go
    /// to the lowest index.
    pub fn topk_mean(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (n, cols, out_shape) = match *xv.shape() {
            [n] => (n, 1, Vec::new()),
            [n, c] => (n, c, vec![c]),
            ref s => {
                return Err(Error::Dimension {
                    op: "topk_mean",
                    lhs: s.to_vec(),
                    rhs: vec![k],
                })
            }
        };
        if k == 0 || k > n {
            return Err(Error::Config(format!("top-k with k={k} outside 1..={n}")));
        }
        let data = xv.data();
        let mut selected = Vec::with_capacity(k * cols);
        let mut out = Vec::with_capacity(cols);
        let mut order: Vec<usize> = Vec::with_capacity(n);
        for c in 0..cols {
            order.clear();
            order.extend(0..n);
            order.sort_by(|&i, &j| {
                data[j * cols + c]
                    .total_cmp(&data[i * cols + c])
                    .then(i.cmp(&j))
            });
            let mut acc = 0.0;
            for &i in &order[..k] {
                acc += data[i * cols + c];
                selected.push(i * cols + c);
            }
            out.push(acc / k as f64);
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::TopKMean { x, k, selected }))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x)))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(x)))
    }

    /// Per-row sums of a matrix: `N x d -> N`.
    pub fn sum_cols(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.require_rank2("sum_cols", x)?;
        let data = self.value(x).data().chunks_exact(c).map(|row| row.iter().sum()).collect();
        let value = Tensor::new(vec![r], data)?;
        Ok(self.push(value, Op::SumCols(x)))
    }

    /// Row-wise `x / (||x|| + eps)`. A vector is treated as one row.
    pub fn normalize_rows(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let (_, c) = xv.dims2();
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let s = norm + eps;
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::NormalizeRows { x, eps }))
    }

    /// Which side of every non-differentiable point each tracked value lies
    /// on: ReLU sign, clamp region and top-k selection. Two evaluations with
    /// equal patterns lie on the same smooth piece of the graph.
    pub fn kink_pattern(&self) -> Vec<usize> {
        let mut pattern = Vec::new();
        for node in self.nodes.iter().filter(|n| n.tracked) {
            match &node.op {
                Op::Pointwise(ElementwiseKind::Relu, x) => {
                    pattern.extend(self.value(*x).data().iter().map(|&v| usize::from(v > 0.0)));
                }
                Op::Clamp { x, lo, hi } => {
                    pattern.extend(self.value(*x).data().iter().map(|v| match v {
                        v if v < lo => 0,
                        v if v > hi => 2,
                        _ => 1,
                    }));
                }
                Op::TopKMean { selected, .. } => pattern.extend(selected),
                _ => {}
            }
        }
        pattern
    }

    /// Reverse sweep from a scalar `root`.
    ///
    /// Records are visited in reverse creation order; contributions to a node
    /// with several consumers are summed.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].tracked {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, contribution: Vec<f64>) {
        if !self.nodes[id.0].tracked {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => {
                let shape = self.nodes[id.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, contribution).expect("gradient shape"));
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let wants = |id: NodeId| self.nodes[id.0].tracked;
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2();
                let n = self.nodes[b.0].value.cols();
                let (av, bv) = (val(a), val(b));
                if wants(a) {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, a, da);
                }
                if wants(b) {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = av[i * k + p];
                            for (o, &gj) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += s * gj;
                            }
                        }
                    }
                    self.accumulate(grads, b, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = g.dims2();
                self.accumulate(grads, x, transpose_data(gd, r, c));
            }
            Op::Reshape(x) => self.accumulate(grads, x, gd.to_vec()),
            Op::Pointwise(kind, x) => {
                let xv = val(x);
                let yv = node.value.data();
                let dx: Vec<f64> = match kind {
                    ElementwiseKind::Sigmoid => {
                        zip_map(gd, yv, |g, y| g * y * (1.0 - y))
                    }
                    ElementwiseKind::Gelu => zip_map(gd, xv, |g, x| g * gelu_grad(x)),
                    ElementwiseKind::Relu => {
                        zip_map(gd, xv, |g, x| if x > 0.0 { g } else { 0.0 })
                    }
                    ElementwiseKind::Log => zip_map(gd, xv, |g, x| g / x),
                    ElementwiseKind::Exp => zip_map(gd, yv, |g, y| g * y),
                    ElementwiseKind::Square => zip_map(gd, xv, |g, x| 2.0 * g * x),
                    ElementwiseKind::Recip => zip_map(gd, yv, |g, y| -g * y * y),
                    ElementwiseKind::Sqrt => zip_map(gd, yv, |g, y| g / (2.0 * y)),
                    _ => unreachable!(),
                };
                self.accumulate(grads, x, dx);
            }
            Op::Pairwise(kind, a, b) => match kind {
                ElementwiseKind::Add => {
                    self.accumulate(grads, a, gd.to_vec());
                    self.accumulate(grads, b, gd.to_vec());
                }
                ElementwiseKind::Sub => {
                    self.accumulate(grads, a, gd.to_vec());
                    self.accumulate(grads, b, gd.iter().map(|v| -v).collect());
                }
                ElementwiseKind::Mul => {
                    if wants(a) {
                        self.accumulate(grads, a, zip_map(gd, val(b), |g, y| g * y));
                    }
                    if wants(b) {
                        self.accumulate(grads, b, zip_map(gd, val(a), |g, x| g * x));
                    }
                }
                _ => unreachable!(),
            },
            Op::AddRow(x, bias) => {
                self.accumulate(grads, x, gd.to_vec());
                if wants(bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in gd.chunks_exact(c) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, bias, db);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[a.0].value.cols();
                let c = g.cols();
                let (mut da, mut db) = (Vec::new(), Vec::new());
                for row in gd.chunks_exact(c) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, a, da);
                self.accumulate(grads, b, db);
            }
            Op::Affine { x, scale } => {
                self.accumulate(grads, x, gd.iter().map(|v| v * scale).collect());
            }
            Op::ScaleBy(x, s) => {
                let sv = val(s)[0];
                if wants(x) {
                    self.accumulate(grads, x, gd.iter().map(|v| v * sv).collect());
                }
                if wants(s) {
                    let ds = gd.iter().zip(val(x)).map(|(g, x)| g * x).sum();
                    self.accumulate(grads, s, vec![ds]);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let dx = zip_map(gd, val(x), |g, x| if x >= lo && x <= hi { g } else { 0.0 });
                self.accumulate(grads, x, dx);
            }
            Op::Pow { x, exponent } => {
                let dx = zip_map(gd, val(x), |g, x| {
                    if exponent == 0.0 || (x == 0.0 && exponent < 1.0) {
                        0.0
                    } else {
                        g * exponent * x.powf(exponent - 1.0)
                    }
                });
                self.accumulate(grads, x, dx);
            }
            Op::Softmax(x, axis) => {
                let yv = node.value.data();
                let (r, c) = node.value.dims2();
                let mut dx = vec![0.0; yv.len()];
                for_each_lane(r, c, axis, |idx| {
                    let dot: f64 = idx.iter().map(|&i| gd[i] * yv[i]).sum();
                    for &i in idx {
                        dx[i] = yv[i] * (gd[i] - dot);
                    }
                });
                self.accumulate(grads, x, dx);
            }
            Op::Conv1d { x, kernel, pad } => {
                let (n, d_in) = self.nodes[x.0].value.dims2();
                let kshape = self.nodes[kernel.0].value.shape();
                let (w, d_out) = (kshape[0], kshape[2]);
                let (xv, kv) = (val(x), val(kernel));
                let mut dx = wants(x).then(|| vec![0.0; n * d_in]);
                let mut dk = wants(kernel).then(|| vec![0.0; w * d_in * d_out]);
                for t in 0..n {
                    let grow = &gd[t * d_out..(t + 1) * d_out];
                    for j in 0..w {
                        let src = t + j;
                        if src < pad || src - pad >= n {
                            continue;
                        }
                        let s = src - pad;
                        let kj = &kv[j * d_in * d_out..(j + 1) * d_in * d_out];
                        if let Some(dx) = dx.as_mut() {
                            for i in 0..d_in {
                                let krow = &kj[i * d_out..(i + 1) * d_out];
                                dx[s * d_in + i] +=
                                    grow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            let xrow = &xv[s * d_in..(s + 1) * d_in];
                            let dkj = &mut dk[j * d_in * d_out..(j + 1) * d_in * d_out];
                            for (i, &xi) in xrow.iter().enumerate() {
                                for (o, &gv) in
                                    dkj[i * d_out..(i + 1) * d_out].iter_mut().zip(grow)
                                {
                                    *o += xi * gv;
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, x, dx);
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, kernel, dk);
                }
            }
            Op::TopKMean { x, k, ref selected } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for (col, chunk) in selected.chunks_exact(k).enumerate() {
                    for &i in chunk {
                        dx[i] += gd[col] / k as f64;
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(grads, x, vec![gd[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(grads, x, vec![gd[0] / n as f64; n]);
            }
            Op::SumCols(x) => {
                let c = self.nodes[x.0].value.cols();
                let dx = gd.iter().flat_map(|&g| std::iter::repeat_n(g, c)).collect();
                self.accumulate(grads, x, dx);
            }
            Op::NormalizeRows { x, eps } => {
                let xv = val(x);
                let c = self.nodes[x.0].value.cols();
                let mut dx = vec![0.0; xv.len()];
                for ((xrow, grow), drow) in xv
                    .chunks_exact(c)
                    .zip(gd.chunks_exact(c))
                    .zip(dx.chunks_exact_mut(c))
                {
                    let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let s = norm + eps;
                    let xg: f64 = xrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for i in 0..c {
                        drow[i] = grow[i] / s;
                        if norm > 0.0 {
                            drow[i] -= xrow[i] * xg / (norm * s * s);
                        }
                    }
                }
                self.accumulate(grads, x, dx);
            }
        }
        Ok(())
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn transpose_data(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    out
}

/// Visit the flat indices of every softmax lane.
fn for_each_lane(r: usize, c: usize, axis: Axis, mut f: impl FnMut(&[usize])) {
    let mut idx = Vec::new();
    match axis {
        Axis::Cols => {
            for i in 0..r {
                idx.clear();
                idx.extend(i * c..(i + 1) * c);
                f(&idx);
            }
        }
        Axis::Rows => {
            for j in 0..c {
                idx.clear();
                idx.extend((0..r).map(|i| i * c + j));
                f(&idx);
            }
        }
    }
}
