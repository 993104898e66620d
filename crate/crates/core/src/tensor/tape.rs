//! Reverse-mode gradient tape over a fixed primitive set.
//!
//! A [`Tape`] records every forward operation as a node; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients for every leaf
//! created with [`Tape::param`]. There is no graph optimization: the models
//! built on top are small and correctness is the product, so every op keeps
//! a direct, loop-level backward rule.

use std::cell::RefCell;
use std::collections::BTreeMap;

use super::{matmul2, strides_of, Result, Tensor, TensorError};

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Relu(usize),
    Sigmoid(usize),
    Softmax(usize, usize),
    Concat(Vec<usize>, usize),
    Slice {
        src: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Sum(usize, Option<usize>),
    Mean(usize, Option<usize>),
    BiasAdd {
        src: usize,
        bias: usize,
        axis: usize,
    },
    HuberElem(usize, f64),
    Conv1dCausal {
        input: usize,
        filters: usize,
        dilation: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    param: Option<String>,
}

/// Gradient tape. One tape per forward/backward pass; single-threaded.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.idx, self.shape())
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    per_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.per_node[v.idx].as_ref()
    }
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

    /// Constant leaf; no gradient is tracked through it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, false, None)
    }

    /// Trainable leaf. Gradients accumulate under `name` in
    /// [`Tape::param_grads`].
    pub fn param(&self, name: &str, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, true, Some(name.to_string()))
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(v))
    }

    fn push(&self, op: Op, value: Tensor, needs_grad: bool, param: Option<String>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            needs_grad,
            param,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    fn record(&self, op: Op, value: Tensor, op_name: &'static str) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs = {
            let nodes = self.nodes.borrow();
            match &op {
                Op::Leaf => false,
                Op::Add(a, b)
                | Op::Sub(a, b)
                | Op::Mul(a, b)
                | Op::MatMul(a, b)
                | Op::BiasAdd {
                    src: a, bias: b, ..
                }
                | Op::Conv1dCausal {
                    input: a,
                    filters: b,
                    ..
                } => nodes[*a].needs_grad || nodes[*b].needs_grad,
                Op::Scale(a, _)
                | Op::Reshape(a)
                | Op::Permute(a, _)
                | Op::Relu(a)
                | Op::Sigmoid(a)
                | Op::Softmax(a, _)
                | Op::Slice { src: a, .. }
                | Op::Sum(a, _)
                | Op::Mean(a, _)
                | Op::HuberElem(a, _) => nodes[*a].needs_grad,
                Op::Concat(srcs, _) => srcs.iter().any(|&s| nodes[s].needs_grad),
            }
        };
        Ok(self.push(op, value, needs, None))
    }

    fn shape_of(&self, idx: usize) -> Vec<usize> {
        self.nodes.borrow()[idx].value.shape().to_vec()
    }

    /// Run reverse-mode accumulation from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if !nodes[loss.idx].value.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: nodes[loss.idx].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.idx] = Some(Tensor::full(nodes[loss.idx].value.shape(), 1.0));

        for idx in (0..=loss.idx).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gout);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, gout.clone(), &nodes);
                    accumulate(&mut grads, *b, gout, &nodes);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, gout.clone(), &nodes);
                    accumulate(&mut grads, *b, gout.map(|v| -v), &nodes);
                }
                Op::Mul(a, b) => {
                    let ga = elementwise(&gout, &nodes[*b].value, |g, v| g * v);
                    let gb = elementwise(&gout, &nodes[*a].value, |g, v| g * v);
                    accumulate(&mut grads, *a, ga, &nodes);
                    accumulate(&mut grads, *b, gb, &nodes);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, gout.map(|v| v * c), &nodes);
                }
                Op::MatMul(a, b) => {
                    let ga = matmul2(&gout, &transpose2(&nodes[*b].value))?;
                    let gb = matmul2(&transpose2(&nodes[*a].value), &gout)?;
                    accumulate(&mut grads, *a, ga, &nodes);
                    accumulate(&mut grads, *b, gb, &nodes);
                }
                Op::Reshape(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    let (_, data) = gout.into_parts();
                    accumulate(&mut grads, *a, Tensor::new(shape, data)?, &nodes);
                }
                Op::Permute(a, perm) => {
                    let inv = invert_perm(perm);
                    accumulate(&mut grads, *a, permute(&gout, &inv), &nodes);
                }
                Op::Relu(a) => {
                    let g = elementwise(
                        &gout,
                        &nodes[*a].value,
                        |g, x| {
                            if x > 0.0 {
                                g
                            } else {
                                0.0
                            }
                        },
                    );
                    accumulate(&mut grads, *a, g, &nodes);
                }
                Op::Sigmoid(a) => {
                    let g = elementwise(&gout, &node.value, |g, s| g * s * (1.0 - s));
                    accumulate(&mut grads, *a, g, &nodes);
                }
                Op::Softmax(a, axis) => {
                    let g = softmax_backward(&gout, &node.value, *axis);
                    accumulate(&mut grads, *a, g, &nodes);
                }
                Op::Concat(srcs, axis) => {
                    let mut start = 0;
                    for &s in srcs {
                        let len = nodes[s].value.shape()[*axis];
                        let piece = slice_tensor(&gout, *axis, start, len);
                        accumulate(&mut grads, s, piece, &nodes);
                        start += len;
                    }
                }
                Op::Slice {
                    src,
                    axis,
                    start,
                    len,
                } => {
                    let mut full = Tensor::zeros(nodes[*src].value.shape());
                    scatter_slice(&mut full, &gout, *axis, *start, *len);
                    accumulate(&mut grads, *src, full, &nodes);
                }
                Op::Sum(a, axis) => {
                    let g = broadcast_back(&gout, nodes[*a].value.shape(), *axis, 1.0);
                    accumulate(&mut grads, *a, g, &nodes);
                }
                Op::Mean(a, axis) => {
                    let denom = match axis {
                        None => nodes[*a].value.len() as f64,
                        Some(ax) => nodes[*a].value.shape()[*ax] as f64,
                    };
                    let g = broadcast_back(&gout, nodes[*a].value.shape(), *axis, 1.0 / denom);
                    accumulate(&mut grads, *a, g, &nodes);
                }
                Op::BiasAdd { src, bias, axis } => {
                    let gb = reduce_except(&gout, *axis);
                    accumulate(&mut grads, *src, gout, &nodes);
                    accumulate(&mut grads, *bias, gb, &nodes);
                }
                Op::HuberElem(a, delta) => {
                    let g = elementwise(&gout, &nodes[*a].value, |g, x| {
                        if x.abs() <= *delta {
                            g * x
                        } else {
                            g * delta * x.signum()
                        }
                    });
                    accumulate(&mut grads, *a, g, &nodes);
                }
                Op::Conv1dCausal {
                    input,
                    filters,
                    dilation,
                } => {
                    let (gi, gw) = conv1d_backward(
                        &gout,
                        &nodes[*input].value,
                        &nodes[*filters].value,
                        *dilation,
                    );
                    accumulate(&mut grads, *input, gi, &nodes);
                    accumulate(&mut grads, *filters, gw, &nodes);
                }
            }
        }
        Ok(Gradients { per_node: grads })
    }

    /// Collect gradients of every `param` leaf by name, summing duplicates.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let nodes = self.nodes.borrow();
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (idx, node) in nodes.iter().enumerate() {
            let Some(name) = &node.param else { continue };
            let Some(g) = &grads.per_node[idx] else {
                continue;
            };
            match out.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    out.insert(name.clone(), g.clone());
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, delta: Tensor, nodes: &[Node]) {
    if !nodes[idx].needs_grad {
        return;
    }
    match &mut grads[idx] {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn elementwise(g: &Tensor, v: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(v.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::new(g.shape().to_vec(), data).expect("same shape")
}

fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = Tensor::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.set2(j, i, t.at2(i, j));
        }
    }
    out
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute(t: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides_of(in_shape);
    let out_strides = strides_of(&out_shape);
    let mut data = vec![0.0; t.len()];
    for (lin, &v) in t.data().iter().enumerate() {
        let mut rem = lin;
        let mut out_lin = 0;
        for (axis, &stride) in in_strides.iter().enumerate() {
            let coord = rem / stride;
            rem %= stride;
            // axis in input appears at position j in output where perm[j] == axis
            let j = perm.iter().position(|&p| p == axis).unwrap();
            out_lin += coord * out_strides[j];
        }
        data[out_lin] = v;
    }
    Tensor::new(out_shape, data).expect("permute preserves length")
}

/// Split a shape at `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn slice_tensor(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, full, inner) = axis_split(t.shape(), axis);
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        for a in start..start + len {
            let base = (o * full + a) * inner;
            data.extend_from_slice(&t.data()[base..base + inner]);
        }
    }
    Tensor::new(shape, data).expect("slice length")
}

fn scatter_slice(dst: &mut Tensor, src: &Tensor, axis: usize, start: usize, len: usize) {
    let (outer, full, inner) = axis_split(dst.shape().to_vec().as_slice(), axis);
    for o in 0..outer {
        for a in 0..len {
            let dbase = (o * full + start + a) * inner;
            let sbase = (o * len + a) * inner;
            for i in 0..inner {
                dst.data_mut()[dbase + i] += src.data()[sbase + i];
            }
        }
    }
}

fn softmax_forward(t: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(t.shape(), axis);
    let mut out = Tensor::zeros(t.shape());
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| t.data()[(o * len + a) * inner + i];
            let max = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for a in 0..len {
                denom += (at(a) - max).exp();
            }
            for a in 0..len {
                out.data_mut()[(o * len + a) * inner + i] = (at(a) - max).exp() / denom;
            }
        }
    }
    out
}

fn softmax_backward(g: &Tensor, y: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let mut out = Tensor::zeros(y.shape());
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mut dot = 0.0;
            for a in 0..len {
                dot += g.data()[idx(a)] * y.data()[idx(a)];
            }
            for a in 0..len {
                out.data_mut()[idx(a)] = y.data()[idx(a)] * (g.data()[idx(a)] - dot);
            }
        }
    }
    out
}

/// Expand a reduced gradient back over `shape`, scaling by `factor`.
fn broadcast_back(g: &Tensor, shape: &[usize], axis: Option<usize>, factor: f64) -> Tensor {
    match axis {
        None => Tensor::full(shape, g.data()[0] * factor),
        Some(ax) => {
            let (outer, len, inner) = axis_split(shape, ax);
            let mut out = Tensor::zeros(shape);
            for o in 0..outer {
                for a in 0..len {
                    for i in 0..inner {
                        out.data_mut()[(o * len + a) * inner + i] =
                            g.data()[o * inner + i] * factor;
                    }
                }
            }
            out
        }
    }
}

/// Sum over every axis except `axis`; result is a vector of that extent.
fn reduce_except(g: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(g.shape(), axis);
    let mut out = Tensor::zeros(&[len]);
    for o in 0..outer {
        for a in 0..len {
            for i in 0..inner {
                out.data_mut()[a] += g.data()[(o * len + a) * inner + i];
            }
        }
    }
    out
}

fn conv1d_forward(input: &Tensor, filters: &Tensor, dilation: usize) -> Tensor {
    let (n, f_in, p) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (taps, _, f_out) = (filters.shape()[0], filters.shape()[1], filters.shape()[2]);
    let mut out = Tensor::zeros(&[n, f_out, p]);
    for node in 0..n {
        for b in 0..taps {
            let shift = dilation * b;
            for fi in 0..f_in {
                for t in shift..p {
                    let x = input.at3(node, fi, t - shift);
                    if x == 0.0 {
                        continue;
                    }
                    for fo in 0..f_out {
                        let w = filters.at3(b, fi, fo);
                        let cur = out.at3(node, fo, t);
                        out.set3(node, fo, t, cur + w * x);
                    }
                }
            }
        }
    }
    out
}

fn conv1d_backward(
    gout: &Tensor,
    input: &Tensor,
    filters: &Tensor,
    dilation: usize,
) -> (Tensor, Tensor) {
    let (n, f_in, p) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (taps, _, f_out) = (filters.shape()[0], filters.shape()[1], filters.shape()[2]);
    let mut gi = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(filters.shape());
    for node in 0..n {
        for b in 0..taps {
            let shift = dilation * b;
            for fi in 0..f_in {
                for t in shift..p {
                    let x = input.at3(node, fi, t - shift);
                    for fo in 0..f_out {
                        let g = gout.at3(node, fo, t);
                        if g == 0.0 {
                            continue;
                        }
                        let w = filters.at3(b, fi, fo);
                        let cur_gi = gi.at3(node, fi, t - shift);
                        gi.set3(node, fi, t - shift, cur_gi + g * w);
                        let cur_gw = gw.at3(b, fi, fo);
                        gw.set3(b, fi, fo, cur_gw + g * x);
                    }
                }
            }
        }
    }
    (gi, gw)
}

#[allow(clippy::should_implement_trait)] // method names follow the op set, not std ops
impl<'t> Var<'t> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.idx)
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn scalar_value(&self) -> f64 {
        self.tape.nodes.borrow()[self.idx].value.scalar_value()
    }

    fn same_shape(&self, rhs: Var<'t>, op: &'static str) -> Result<()> {
        let (a, b) = (self.shape(), rhs.shape());
        if a != b {
            return Err(TensorError::Shape {
                op,
                left: a,
                right: b,
            });
        }
        Ok(())
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(rhs, "add")?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            elementwise(&nodes[self.idx].value, &nodes[rhs.idx].value, |a, b| a + b)
        };
        self.tape.record(Op::Add(self.idx, rhs.idx), value, "add")
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(rhs, "sub")?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            elementwise(&nodes[self.idx].value, &nodes[rhs.idx].value, |a, b| a - b)
        };
        self.tape.record(Op::Sub(self.idx, rhs.idx), value, "sub")
    }

    /// Hadamard (element-wise) product.
    pub fn hadamard(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(rhs, "hadamard")?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            elementwise(&nodes[self.idx].value, &nodes[rhs.idx].value, |a, b| a * b)
        };
        self.tape
            .record(Op::Mul(self.idx, rhs.idx), value, "hadamard")
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let value = self.tape.nodes.borrow()[self.idx].value.map(|v| v * c);
        self.tape.record(Op::Scale(self.idx, c), value, "scale")
    }

    /// 2D matrix product.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            matmul2(&nodes[self.idx].value, &nodes[rhs.idx].value)?
        };
        self.tape
            .record(Op::MatMul(self.idx, rhs.idx), value, "matmul")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let cur = &nodes[self.idx].value;
            if shape.iter().product::<usize>() != cur.len() {
                return Err(TensorError::Shape {
                    op: "reshape",
                    left: cur.shape().to_vec(),
                    right: shape.to_vec(),
                });
            }
            Tensor::new(shape.to_vec(), cur.data().to_vec())?
        };
        self.tape.record(Op::Reshape(self.idx), value, "reshape")
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let cur = &nodes[self.idx].value;
            if perm.len() != cur.rank() {
                return Err(TensorError::Shape {
                    op: "permute",
                    left: cur.shape().to_vec(),
                    right: perm.to_vec(),
                });
            }
            permute(cur, perm)
        };
        self.tape
            .record(Op::Permute(self.idx, perm.to_vec()), value, "permute")
    }

    /// Swap two axes; `transpose()` with no arguments swaps a matrix.
    pub fn transpose(self) -> Result<Var<'t>> {
        self.permute(&[1, 0])
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let value = self.tape.nodes.borrow()[self.idx].value.map(|v| v.max(0.0));
        self.tape.record(Op::Relu(self.idx), value, "relu")
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        let value = self.tape.nodes.borrow()[self.idx]
            .value
            .map(|v| 1.0 / (1.0 + (-v).exp()));
        self.tape.record(Op::Sigmoid(self.idx), value, "sigmoid")
    }

    /// Softmax along `axis`; slices along that axis sum to 1.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let cur = &nodes[self.idx].value;
            if axis >= cur.rank() {
                return Err(TensorError::Axis {
                    axis,
                    shape: cur.shape().to_vec(),
                });
            }
            softmax_forward(cur, axis)
        };
        self.tape
            .record(Op::Softmax(self.idx, axis), value, "softmax")
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let tape = parts[0].tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let first = nodes[parts[0].idx].value.shape().to_vec();
            let mut total = 0;
            for p in parts {
                let s = nodes[p.idx].value.shape();
                if s.len() != first.len()
                    || s.iter()
                        .zip(&first)
                        .enumerate()
                        .any(|(i, (a, b))| i != axis && a != b)
                {
                    return Err(TensorError::Shape {
                        op: "concat",
                        left: first.clone(),
                        right: s.to_vec(),
                    });
                }
                total += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = total;
            let (outer, _, inner) = axis_split(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.idx].value;
                    let len = t.shape()[axis];
                    let base = o * len * inner;
                    data.extend_from_slice(&t.data()[base..base + len * inner]);
                }
            }
            Tensor::new(shape, data)?
        };
        tape.record(
            Op::Concat(parts.iter().map(|p| p.idx).collect(), axis),
            value,
            "concat",
        )
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let cur = &nodes[self.idx].value;
            if axis >= cur.rank() || start + len > cur.shape()[axis] {
                return Err(TensorError::Axis {
                    axis,
                    shape: cur.shape().to_vec(),
                });
            }
            slice_tensor(cur, axis, start, len)
        };
        self.tape.record(
            Op::Slice {
                src: self.idx,
                axis,
                start,
                len,
            },
            value,
            "slice",
        )
    }

    pub fn sum(self, axis: Option<usize>) -> Result<Var<'t>> {
        let value = self.reduce_value(axis, false)?;
        self.tape.record(Op::Sum(self.idx, axis), value, "sum")
    }

    pub fn mean(self, axis: Option<usize>) -> Result<Var<'t>> {
        let value = self.reduce_value(axis, true)?;
        self.tape.record(Op::Mean(self.idx, axis), value, "mean")
    }

    fn reduce_value(&self, axis: Option<usize>, mean: bool) -> Result<Tensor> {
        let nodes = self.tape.nodes.borrow();
        let cur = &nodes[self.idx].value;
        match axis {
            None => {
                let mut s: f64 = cur.data().iter().sum();
                if mean {
                    s /= cur.len() as f64;
                }
                Ok(Tensor::scalar(s))
            }
            Some(ax) => {
                if ax >= cur.rank() {
                    return Err(TensorError::Axis {
                        axis: ax,
                        shape: cur.shape().to_vec(),
                    });
                }
                let (outer, len, inner) = axis_split(cur.shape(), ax);
                let mut shape = cur.shape().to_vec();
                shape.remove(ax);
                let mut out = Tensor::zeros(&shape);
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            out.data_mut()[o * inner + i] += cur.data()[(o * len + a) * inner + i];
                        }
                    }
                }
                if mean {
                    for v in out.data_mut() {
                        *v /= len as f64;
                    }
                }
                Ok(out)
            }
        }
    }

    /// Add a vector bias along `axis`, broadcast over all other axes.
    pub fn bias_add(self, bias: Var<'t>, axis: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let cur = &nodes[self.idx].value;
            let b = &nodes[bias.idx].value;
            if axis >= cur.rank() || b.rank() != 1 || b.len() != cur.shape()[axis] {
                return Err(TensorError::Shape {
                    op: "bias_add",
                    left: cur.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let (outer, len, inner) = axis_split(cur.shape(), axis);
            let mut out = cur.clone();
            for o in 0..outer {
                for a in 0..len {
                    for i in 0..inner {
                        out.data_mut()[(o * len + a) * inner + i] += b.data()[a];
                    }
                }
            }
            out
        };
        self.tape.record(
            Op::BiasAdd {
                src: self.idx,
                bias: bias.idx,
                axis,
            },
            value,
            "bias_add",
        )
    }

    /// Element-wise Huber value: 0.5 x^2 inside the threshold, linear outside.
    pub fn huber_elem(self, delta: f64) -> Result<Var<'t>> {
        let value = self.tape.nodes.borrow()[self.idx].value.map(|x| {
            if x.abs() <= delta {
                0.5 * x * x
            } else {
                delta * (x.abs() - 0.5 * delta)
            }
        });
        self.tape
            .record(Op::HuberElem(self.idx, delta), value, "huber")
    }

    /// Dilated causal 1D convolution over the trailing time axis.
    ///
    /// `self` is `[N, F, P]`, `filters` is `[B, F, F']`, output is
    /// `[N, F', P]`. Tap `b` reads `dilation * b` steps into the past;
    /// out-of-range reads are zero, so no future timestep is touched.
    pub fn conv1d_causal(self, filters: Var<'t>, dilation: usize) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let w = &nodes[filters.idx].value;
            if x.rank() != 3 || w.rank() != 3 || x.shape()[1] != w.shape()[1] {
                return Err(TensorError::Shape {
                    op: "conv1d_causal",
                    left: x.shape().to_vec(),
                    right: w.shape().to_vec(),
                });
            }
            if dilation == 0 {
                return Err(TensorError::Invalid("conv1d dilation must be >= 1".into()));
            }
            let receptive = dilation * (w.shape()[0].saturating_sub(1));
            if receptive >= x.shape()[2] {
                log::warn!(
                    "conv1d receptive field {} exceeds window length {}",
                    receptive + 1,
                    x.shape()[2]
                );
            }
            conv1d_forward(x, w, dilation)
        };
        self.tape.record(
            Op::Conv1dCausal {
                input: self.idx,
                filters: filters.idx,
                dilation,
            },
            value,
            "conv1d_causal",
        )
    }

    // --- composite contractions used by the model ---

    /// `[N, F, P] x [F, G] -> [N, G, P]`: mix the middle (feature) axis.
    pub fn feature_map(self, w: Var<'t>) -> Result<Var<'t>> {
        let s = self.shape();
        let (n, f, p) = (s[0], s[1], s[2]);
        let g = w.shape()[1];
        self.permute(&[0, 2, 1])?
            .reshape(&[n * p, f])?
            .matmul(w)?
            .reshape(&[n, p, g])?
            .permute(&[0, 2, 1])
    }

    /// `[K, N] x [N, ...] -> [K, ...]`: mix the leading (node) axis.
    pub fn left_mul(self, m: Var<'t>) -> Result<Var<'t>> {
        let s = self.shape();
        let rest: usize = s[1..].iter().product();
        let k = m.shape()[0];
        let mut out_shape = s.clone();
        out_shape[0] = k;
        m.matmul(self.reshape(&[s[0], rest])?)?.reshape(&out_shape)
    }

    /// `[..., P] x [P, H] -> [..., H]`: mix the trailing (time) axis.
    pub fn time_map(self, w: Var<'t>) -> Result<Var<'t>> {
        let s = self.shape();
        let p = *s.last().expect("rank >= 1");
        let pre: usize = s[..s.len() - 1].iter().product();
        let h = w.shape()[1];
        let mut out_shape = s.clone();
        *out_shape.last_mut().unwrap() = h;
        self.reshape(&[pre, p])?.matmul(w)?.reshape(&out_shape)
    }
}
