//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so a node's inputs always have
//! smaller ids and the reverse of the node list is a valid topological order
//! for the backward sweep.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, T),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
    },
    Relu(NodeId),
    Abs(NodeId),
    MaxPool2d {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Reshape(NodeId),
    Concat(Vec<NodeId>),
    SliceRows {
        input: NodeId,
        start: usize,
    },
    SquaredL2(NodeId, NodeId),
    RowSquaredDistance(NodeId, NodeId),
    Softmax(NodeId),
    Log(NodeId),
    ClampMin(NodeId, T),
    Sum(NodeId),
    Pick {
        input: NodeId,
        cols: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::SquaredL2(a, b)
            | Op::RowSquaredDistance(a, b) => vec![*a, *b],
            Op::ScalarMul(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::Log(a)
            | Op::ClampMin(a, _)
            | Op::Sum(a) => vec![*a],
            Op::MaxPool2d { input, .. } | Op::SliceRows { input, .. } | Op::Pick { input, .. } => {
                vec![*input]
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

fn slot<'g, T: Scalar>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    id: NodeId,
) -> &'g mut Vec<T> {
    let n = nodes[id.0].value.numel();
    grads[id.0].get_or_insert_with(|| vec![T::zero(); n])
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// A single forward pass recorded for differentiation.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidShape {
        op,
        msg: msg.into(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> NodeId {
        tensor.set_grad(None);
        self.nodes.push(Node {
            op: Op::Leaf,
            value: tensor,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, mut tensor: Tensor<T>) -> NodeId {
        tensor.set_requires_grad(true);
        self.leaf(tensor)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> NodeId {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].value.grad()
    }

    fn push(
        &mut self,
        name: &'static str,
        op: Op<T>,
        shape: Vec<usize>,
        data: Vec<T>,
    ) -> Result<NodeId> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op
            .inputs()
            .iter()
            .any(|i| self.nodes[i.0].value.requires_grad());
        let mut value = Tensor::from_parts(shape, data);
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    fn map(&self, a: NodeId, f: impl Fn(T) -> T) -> Vec<T> {
        self.value(a).data().iter().map(|&x| f(x)).collect()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = self.zip(a, b, |x, y| x + y);
        self.push("add", Op::Add(a, b), self.shape(a).to_vec(), data)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data = self.zip(a, b, |x, y| x - y);
        self.push("sub", Op::Sub(a, b), self.shape(a).to_vec(), data)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = self.zip(a, b, |x, y| x * y);
        self.push("mul", Op::Mul(a, b), self.shape(a).to_vec(), data)
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let data = self.map(a, |x| x * c);
        self.push(
            "scalar_mul",
            Op::ScalarMul(a, c),
            self.shape(a).to_vec(),
            data,
        )
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let data = self.map(a, |x| x + c);
        self.push("add_scalar", Op::AddScalar(a), self.shape(a).to_vec(), data)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scalar_mul(a, -T::one())
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let (x, w) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let xv = x[i * k + p];
                if xv == T::zero() {
                    continue;
                }
                for (o, &wv) in row.iter_mut().zip(&w[p * m..(p + 1) * m]) {
                    *o = *o + xv * wv;
                }
            }
        }
        self.push("matmul", Op::MatMul(a, b), vec![n, m], out)
    }

    /// Adds a vector of length `m` to every row of a `[.., m]` tensor.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(mismatch("add_bias", sx, sb));
        }
        let m = sb[0];
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % m])
            .collect();
        self.push("add_bias", Op::AddBias(x, bias), sx.to_vec(), data)
    }

    /// Valid-padding 2-D convolution.
    ///
    /// input `[n, c, h, w]`, weight `[o, c, k, k]`, bias `[o]` ->
    /// `[n, o, (h - k) / stride + 1, (w - k) / stride + 1]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if si.len() != 4 || sw.len() != 4 || sw[1] != si[1] || sw[2] != sw[3] {
            return Err(mismatch("conv2d", si, sw));
        }
        if sb != [sw[0]] {
            return Err(mismatch("conv2d", sw, sb));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, k) = (sw[0], sw[2]);
        if h < k || w < k {
            return Err(invalid(
                "conv2d",
                format!("kernel {k} larger than input {h}x{w}"),
            ));
        }
        let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let (x, wt, b) = (
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let mut out = vec![T::zero(); n * o * ho * wo];
        for ni in 0..n {
            for oi in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[oi];
                        for ci in 0..c {
                            for ky in 0..k {
                                let xrow = ((ni * c + ci) * h + oy * stride + ky) * w + ox * stride;
                                let wrow = ((oi * c + ci) * k + ky) * k;
                                for kx in 0..k {
                                    acc = acc + wt[wrow + kx] * x[xrow + kx];
                                }
                            }
                        }
                        out[((ni * o + oi) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        self.push(
            "conv2d",
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            },
            vec![n, o, ho, wo],
            out,
        )
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push("relu", Op::Relu(a), self.shape(a).to_vec(), data)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.map(a, |x| x.abs());
        self.push("abs", Op::Abs(a), self.shape(a).to_vec(), data)
    }

    /// Non-overlapping max pooling with window and stride `size`; ties pick
    /// the first element in row-major window order.
    pub fn max_pool2d(&mut self, input: NodeId, size: usize) -> Result<NodeId> {
        let si = self.shape(input);
        if si.len() != 4 {
            return Err(invalid(
                "max_pool2d",
                format!("expected rank 4, got {si:?}"),
            ));
        }
        if size == 0 || si[2] < size || si[3] < size {
            return Err(invalid(
                "max_pool2d",
                format!("window {size} does not fit input {si:?}"),
            ));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (ho, wo) = (h / size, w / size);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = plane * h * w + oy * size * w + ox * size;
                    for ky in 0..size {
                        for kx in 0..size {
                            let idx = plane * h * w + (oy * size + ky) * w + ox * size + kx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        self.push(
            "max_pool2d",
            Op::MaxPool2d { input, argmax },
            vec![n, c, ho, wo],
            out,
        )
    }

    /// `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        let n = s[0];
        let rest: usize = s[1..].iter().product();
        let data = self.value(a).data().to_vec();
        self.push("flatten", Op::Reshape(a), vec![n, rest.max(1)], data)
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(mismatch("concat", self.shape(first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push("concat", Op::Concat(parts.to_vec()), shape, data)
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if start >= end || end > s[0] {
            return Err(invalid(
                "slice_rows",
                format!("range {start}..{end} invalid for shape {s:?}"),
            ));
        }
        let stride = self.value(a).numel() / s[0];
        let mut shape = s.to_vec();
        shape[0] = end - start;
        let data = self.value(a).data()[start * stride..end * stride].to_vec();
        self.push("slice_rows", Op::SliceRows { input: a, start }, shape, data)
    }

    /// `sum((a - b)^2)` as a scalar.
    pub fn squared_l2_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("squared_l2_distance", a, b)?;
        let d = self.zip(a, b, |x, y| (x - y) * (x - y)).into_iter().sum();
        self.push("squared_l2_distance", Op::SquaredL2(a, b), vec![1], vec![d])
    }

    /// Per-row squared distance: `[n, d] x [n, d] -> [n]`.
    pub fn row_squared_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("row_squared_distance", a, b)?;
        let s = self.shape(a);
        let n = s[0];
        let d = self.value(a).numel() / n;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let out = (0..n)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        let e = x[i * d + j] - y[i * d + j];
                        e * e
                    })
                    .sum()
            })
            .collect();
        self.push(
            "row_squared_distance",
            Op::RowSquaredDistance(a, b),
            vec![n],
            out,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        let m = *s.last().expect("rank >= 1");
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(m) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z = z + *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        self.push("softmax", Op::Softmax(a), s, out)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.map(a, |x| x.ln());
        self.push("log", Op::Log(a), self.shape(a).to_vec(), data)
    }

    /// `max(x, floor)` element-wise; the gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: NodeId, floor: T) -> Result<NodeId> {
        let data = self.map(a, |x| if x > floor { x } else { floor });
        self.push(
            "clamp_min",
            Op::ClampMin(a, floor),
            self.shape(a).to_vec(),
            data,
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.value(a).data().iter().copied().sum();
        self.push("sum", Op::Sum(a), vec![1], vec![total])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = T::from_usize(self.value(a).numel()).expect("count");
        let s = self.sum(a)?;
        self.scalar_mul(s, T::one() / n)
    }

    /// `[n, c] -> [n]`, selecting column `cols[i]` from row `i`.
    pub fn pick(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != cols.len() || cols.iter().any(|&c| c >= s[1]) {
            return Err(invalid(
                "pick",
                format!("{} column indices do not fit shape {s:?}", cols.len()),
            ));
        }
        let m = s[1];
        let x = self.value(a).data();
        let out = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| x[i * m + c])
            .collect();
        self.push(
            "pick",
            Op::Pick {
                input: a,
                cols: cols.to_vec(),
            },
            vec![cols.len()],
            out,
        )
    }

    /// Reverse sweep from a scalar `loss`, filling the gradient slot of every
    /// node that requires one. Previous gradients are discarded first, so
    /// repeated calls give identical results.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let loss_shape = self.shape(loss);
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        for node in &mut self.nodes {
            node.value.set_grad(None);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            let g = grads[i]
                .take()
                .unwrap_or_else(|| vec![T::zero(); self.nodes[i].value.numel()]);
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.set_grad(Some(g));
        }
        for node in &mut self.nodes[loss.0 + 1..] {
            if node.value.requires_grad() {
                let n = node.value.numel();
                node.value.set_grad(Some(vec![T::zero(); n]));
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |id: NodeId| nodes[id.0].value.requires_grad();
        let val = |id: NodeId| nodes[id.0].value.data();
        let two = T::lit(2.0);

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if wants(*a) {
                    for (d, &gv) in slot(grads, nodes, *a).iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
                if wants(*b) {
                    for (d, &gv) in slot(grads, nodes, *b).iter_mut().zip(g) {
                        *d = *d + sign * gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let y = val(*b).to_vec();
                    for ((d, &gv), yv) in slot(grads, nodes, *a).iter_mut().zip(g).zip(y) {
                        *d = *d + gv * yv;
                    }
                }
                if wants(*b) {
                    let x = val(*a).to_vec();
                    for ((d, &gv), xv) in slot(grads, nodes, *b).iter_mut().zip(g).zip(x) {
                        *d = *d + gv * xv;
                    }
                }
            }
            Op::ScalarMul(a, c) => {
                if wants(*a) {
                    for (d, &gv) in slot(grads, nodes, *a).iter_mut().zip(g) {
                        *d = *d + *c * gv;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if wants(*a) {
                    for (d, &gv) in slot(grads, nodes, *a).iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let w = val(*b);
                    let da = slot(grads, nodes, *a);
                    for r in 0..n {
                        for p in 0..k {
                            let mut acc = T::zero();
                            for j in 0..m {
                                acc = acc + g[r * m + j] * w[p * m + j];
                            }
                            da[r * k + p] = da[r * k + p] + acc;
                        }
                    }
                }
                if wants(*b) {
                    let x = val(*a);
                    let db = slot(grads, nodes, *b);
                    for r in 0..n {
                        for p in 0..k {
                            let xv = x[r * k + p];
                            for j in 0..m {
                                db[p * m + j] = db[p * m + j] + xv * g[r * m + j];
                            }
                        }
                    }
                }
            }
            Op::AddBias(x, bias) => {
                let m = nodes[bias.0].value.numel();
                if wants(*x) {
                    for (d, &gv) in slot(grads, nodes, *x).iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
                if wants(*bias) {
                    let db = slot(grads, nodes, *bias);
                    for (idx, &gv) in g.iter().enumerate() {
                        db[idx % m] = db[idx % m] + gv;
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            } => {
                let si = nodes[input.0].value.shape();
                let sw = nodes[weight.0].value.shape();
                let so = nodes[i].value.shape();
                let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
                let (o, k) = (sw[0], sw[2]);
                let (ho, wo) = (so[2], so[3]);
                let s = *stride;
                if wants(*bias) {
                    let db = slot(grads, nodes, *bias);
                    for (idx, &gv) in g.iter().enumerate() {
                        let oi = (idx / (ho * wo)) % o;
                        db[oi] = db[oi] + gv;
                    }
                }
                if wants(*weight) {
                    let x = val(*input);
                    let dw = slot(grads, nodes, *weight);
                    for ni in 0..n {
                        for oi in 0..o {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let gv = g[((ni * o + oi) * ho + oy) * wo + ox];
                                    for ci in 0..c {
                                        for ky in 0..k {
                                            let xrow =
                                                ((ni * c + ci) * h + oy * s + ky) * w + ox * s;
                                            let wrow = ((oi * c + ci) * k + ky) * k;
                                            for kx in 0..k {
                                                dw[wrow + kx] = dw[wrow + kx] + gv * x[xrow + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if wants(*input) {
                    let wt = val(*weight);
                    let dx = slot(grads, nodes, *input);
                    for ni in 0..n {
                        for oi in 0..o {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let gv = g[((ni * o + oi) * ho + oy) * wo + ox];
                                    for ci in 0..c {
                                        for ky in 0..k {
                                            let xrow =
                                                ((ni * c + ci) * h + oy * s + ky) * w + ox * s;
                                            let wrow = ((oi * c + ci) * k + ky) * k;
                                            for kx in 0..k {
                                                dx[xrow + kx] = dx[xrow + kx] + gv * wt[wrow + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let x = val(*a);
                    for ((d, &gv), &xv) in slot(grads, nodes, *a).iter_mut().zip(g).zip(x) {
                        if xv > T::zero() {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::Abs(a) => {
                if wants(*a) {
                    let x = val(*a);
                    for ((d, &gv), &xv) in slot(grads, nodes, *a).iter_mut().zip(g).zip(x) {
                        if xv > T::zero() {
                            *d = *d + gv;
                        } else if xv < T::zero() {
                            *d = *d - gv;
                        }
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if wants(*input) {
                    let dx = slot(grads, nodes, *input);
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src] = dx[src] + gv;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.numel();
                    if wants(*p) {
                        for (d, &gv) in slot(grads, nodes, *p)
                            .iter_mut()
                            .zip(&g[offset..offset + len])
                        {
                            *d = *d + gv;
                        }
                    }
                    offset += len;
                }
            }
            Op::SliceRows { input, start } => {
                if wants(*input) {
                    let src = &nodes[input.0].value;
                    let stride = src.numel() / src.shape()[0];
                    let base = start * stride;
                    let dx = slot(grads, nodes, *input);
                    for (j, &gv) in g.iter().enumerate() {
                        dx[base + j] = dx[base + j] + gv;
                    }
                }
            }
            Op::SquaredL2(a, b) | Op::RowSquaredDistance(a, b) => {
                let row_len = nodes[a.0].value.numel() / g.len();
                let (x, y) = (val(*a), val(*b));
                let diff: Vec<T> = x
                    .iter()
                    .zip(y)
                    .enumerate()
                    .map(|(j, (&xv, &yv))| two * g[j / row_len] * (xv - yv))
                    .collect();
                if wants(*a) {
                    for (d, &e) in slot(grads, nodes, *a).iter_mut().zip(&diff) {
                        *d = *d + e;
                    }
                }
                if wants(*b) {
                    for (d, &e) in slot(grads, nodes, *b).iter_mut().zip(&diff) {
                        *d = *d - e;
                    }
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let y = nodes[i].value.data();
                    let m = *nodes[i].value.shape().last().expect("rank");
                    let da = slot(grads, nodes, *a);
                    for r in 0..y.len() / m {
                        let row = r * m..(r + 1) * m;
                        let dot: T = g[row.clone()]
                            .iter()
                            .zip(&y[row.clone()])
                            .map(|(&gv, &yv)| gv * yv)
                            .sum();
                        for j in row {
                            da[j] = da[j] + y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::Log(a) => {
                if wants(*a) {
                    let x = val(*a);
                    for ((d, &gv), &xv) in slot(grads, nodes, *a).iter_mut().zip(g).zip(x) {
                        *d = *d + gv / xv;
                    }
                }
            }
            Op::ClampMin(a, floor) => {
                if wants(*a) {
                    let x = val(*a);
                    for ((d, &gv), &xv) in slot(grads, nodes, *a).iter_mut().zip(g).zip(x) {
                        if xv > *floor {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    for d in slot(grads, nodes, *a).iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::Pick { input, cols } => {
                if wants(*input) {
                    let m = nodes[input.0].value.shape()[1];
                    let dx = slot(grads, nodes, *input);
                    for (r, (&c, &gv)) in cols.iter().zip(g).enumerate() {
                        dx[r * m + c] = dx[r * m + c] + gv;
                    }
                }
            }
        }
    }
}
