//! Small reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is a tape: every op evaluates eagerly and appends a node.
//! Gradients are seeded on one or more nodes and swept back in reverse
//! insertion order, so accumulation order is fixed.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward called on a graph with no recorded forward pass")]
    NotForwarded,
    #[error("node {0} does not exist")]
    NoSuchNode(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(AutodiffError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::vector(vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Element at a 2D index.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<usize> },
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Reshape(usize),
    Slice { input: usize, start: usize },
    Scale(usize, f64),
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> AutodiffError {
    AutodiffError::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Cow<'a, Tensor>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<usize, AutodiffError> {
        if id.0 < self.nodes.len() {
            Ok(id.0)
        } else {
            Err(AutodiffError::NoSuchNode(id.0))
        }
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf { param: None }, Cow::Owned(t))
    }

    /// Borrowed parameter tensor tagged with a caller-chosen index.
    pub fn param(&mut self, index: usize, t: &'a Tensor) -> NodeId {
        self.push(Op::Leaf { param: Some(index) }, Cow::Borrowed(t))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// `(m, k) x (k, n) -> (m, n)` or `(m, k) x (k,) -> (m,)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.is_empty() || sb.len() > 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if sb.len() == 2 { sb[1] } else { 1 };
        let mut out = vec![0.0; m * n];
        if n == 1 {
            for (o, row) in out.iter_mut().zip(ta.data.chunks_exact(k)) {
                *o = row.iter().zip(&tb.data).map(|(x, y)| x * y).sum();
            }
        }
        for i in 0..if n == 1 { 0 } else { m } {
            for p in 0..k {
                let av = ta.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let row = &tb.data[p * n..(p + 1) * n];
                for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o += av * bv;
                }
            }
        }
        let shape = if sb.len() == 2 { vec![m, n] } else { vec![m] };
        Ok(self.push(Op::MatMul(ia, ib), Cow::Owned(Tensor { shape, data: out })))
    }

    /// Elementwise sum; `b` may also be a bias vector matching the last axis of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let last = *ta.shape().last().unwrap_or(&0);
        let data: Vec<f64> = if ta.shape() == tb.shape() {
            ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect()
        } else if tb.shape().len() == 1 && tb.len() == last && last > 0 {
            ta.data
                .iter()
                .enumerate()
                .map(|(i, x)| x + tb.data[i % last])
                .collect()
        } else {
            return Err(shape_err("add", &[ta.shape(), tb.shape()]));
        };
        let shape = ta.shape.clone();
        Ok(self.push(Op::Add(ia, ib), Cow::Owned(Tensor { shape, data })))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", &[ta.shape(), tb.shape()]));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        Ok(self.push(Op::Mul(ia, ib), Cow::Owned(Tensor { shape, data })))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, AutodiffError> {
        let idx: Vec<usize> = inputs.iter().map(|&i| self.check(i)).collect::<Result<_, _>>()?;
        let shapes: Vec<&[usize]> = idx.iter().map(|&i| self.nodes[i].value.shape()).collect();
        let Some(first) = shapes.first() else {
            return Err(shape_err("concat", &[]));
        };
        let compatible = axis < first.len()
            && shapes.iter().all(|s| {
                s.len() == first.len() && s.iter().zip(*first).enumerate().all(|(d, (x, y))| d == axis || x == y)
            });
        if !compatible {
            return Err(shape_err("concat", &shapes));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total_axis: usize = shapes.iter().map(|s| s[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &i in &idx {
                let t = &self.nodes[i].value;
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total_axis;
        Ok(self.push(Op::Concat { inputs: idx, axis }, Cow::Owned(Tensor { shape, data })))
    }

    fn unary(&mut self, a: NodeId, op: fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Result<NodeId, AutodiffError> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| f(x)).collect(),
        };
        Ok(self.push(op(ia), Cow::Owned(out)))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, Op::Relu, |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        self.unary(a, Op::Sigmoid, crate::losses::sigmoid)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId, AutodiffError> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| x * s).collect(),
        };
        Ok(self.push(Op::Scale(ia, s), Cow::Owned(out)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        if shape.iter().product::<usize>() != t.len() {
            return Err(shape_err("reshape", &[t.shape(), shape]));
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: t.data.clone(),
        };
        Ok(self.push(Op::Reshape(ia), Cow::Owned(out)))
    }

    /// Rows `start..start + len` along the first axis.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, AutodiffError> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        if t.shape.is_empty() || start + len > t.shape[0] {
            return Err(shape_err("slice", &[t.shape(), &[start, len]]));
        }
        let inner: usize = t.shape[1..].iter().product();
        let mut shape = t.shape.clone();
        shape[0] = len;
        let data = t.data[start * inner..(start + len) * inner].to_vec();
        Ok(self.push(Op::Slice { input: ia, start }, Cow::Owned(Tensor { shape, data })))
    }

    /// `w x + b` for a weight matrix `(out, in)`, vector `x` and bias `(out,)`.
    pub fn linear(&mut self, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId, AutodiffError> {
        let y = self.matmul(w, x)?;
        self.add(y, b)
    }

    /// Adds `grad` to the upstream gradient of `node` ahead of [`Graph::backward`].
    pub fn inject_external_gradient(&mut self, node: NodeId, grad: &Tensor) -> Result<(), AutodiffError> {
        let i = self.check(node)?;
        let shape = self.nodes[i].value.shape();
        if grad.len() != self.nodes[i].value.len() || (grad.shape() != shape && grad.shape().len() != 1) {
            return Err(shape_err("inject_external_gradient", &[shape, grad.shape()]));
        }
        let g = Tensor {
            shape: shape.to_vec(),
            data: grad.data.clone(),
        };
        match &mut self.grads[i] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
        Ok(())
    }

    /// Seeds `node` with `seed` and runs the backward sweep.
    pub fn backward_from(&mut self, node: NodeId, seed: &Tensor) -> Result<(), AutodiffError> {
        if self.nodes.is_empty() {
            return Err(AutodiffError::NotForwarded);
        }
        self.inject_external_gradient(node, seed)?;
        self.backward()
    }

    /// Propagates all injected gradients to every node.
    pub fn backward(&mut self) -> Result<(), AutodiffError> {
        if self.nodes.is_empty() {
            return Err(AutodiffError::NotForwarded);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, i: usize, data: Vec<f64>) {
        let shape = self.nodes[i].value.shape.clone();
        let g = Tensor { shape, data };
        match &mut self.grads[i] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, op: &Op, g: &Tensor) {
        let out = &self.nodes[i].value;
        match *op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = if tb.shape.len() == 2 { tb.shape[1] } else { 1 };
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                if n == 1 {
                    for ((gar, ar), gv) in ga.chunks_exact_mut(k).zip(ta.data.chunks_exact(k)).zip(&g.data) {
                        for (((o, bv), gbv), av) in gar.iter_mut().zip(&tb.data).zip(gb.iter_mut()).zip(ar) {
                            *o = gv * bv;
                            *gbv += av * gv;
                        }
                    }
                }
                for r in 0..if n == 1 { 0 } else { m } {
                    let grow = &g.data[r * n..(r + 1) * n];
                    for p in 0..k {
                        let brow = &tb.data[p * n..(p + 1) * n];
                        ga[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        let av = ta.data[r * k + p];
                        for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                }
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.data.clone());
                let nb = self.nodes[b].value.len();
                if nb == g.len() {
                    self.accumulate(b, g.data.clone());
                } else {
                    let mut gb = vec![0.0; nb];
                    for (j, v) in g.data.iter().enumerate() {
                        gb[j % nb] += v;
                    }
                    self.accumulate(b, gb);
                }
            }
            Op::Mul(a, b) => {
                let ga = g.data.iter().zip(&self.nodes[b].value.data).map(|(x, y)| x * y).collect();
                let gb = g.data.iter().zip(&self.nodes[a].value.data).map(|(x, y)| x * y).collect();
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Concat { ref inputs, axis } => {
                let inner: usize = out.shape[axis + 1..].iter().product();
                let outer: usize = out.shape[..axis].iter().product();
                let mut parts: Vec<Vec<f64>> = inputs.iter().map(|&j| Vec::with_capacity(self.nodes[j].value.len())).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (p, &j) in parts.iter_mut().zip(inputs) {
                        let chunk = self.nodes[j].value.shape[axis] * inner;
                        p.extend_from_slice(&g.data[off..off + chunk]);
                        off += chunk;
                    }
                }
                for (p, &j) in parts.into_iter().zip(inputs) {
                    self.accumulate(j, p);
                }
            }
            Op::Relu(a) => {
                let ga = g.data.iter().zip(&self.nodes[a].value.data).map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 }).collect();
                self.accumulate(a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.data.iter().zip(&out.data).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                self.accumulate(a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.data.iter().zip(&out.data).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                self.accumulate(a, ga);
            }
            Op::Reshape(a) => self.accumulate(a, g.data.clone()),
            Op::Slice { input, start } => {
                let t = &self.nodes[input].value;
                let inner: usize = t.shape[1..].iter().product();
                let mut ga = vec![0.0; t.len()];
                ga[start * inner..start * inner + g.len()].copy_from_slice(&g.data);
                self.accumulate(input, ga);
            }
            Op::Scale(a, s) => {
                let ga = g.data.iter().map(|v| v * s).collect();
                self.accumulate(a, ga);
            }
        }
    }

    /// Which relu inputs are positive, over every relu node in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(i) => Some(i),
                _ => None,
            })
            .flat_map(|i| self.nodes[i].value.data.iter().map(|&v| v > 0.0))
            .collect()
    }

    /// Gradient reaching `node` after [`Graph::backward`]; zeros if none did.
    pub fn grad(&self, node: NodeId) -> Tensor {
        match &self.grads[node.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[node.0].value.shape()),
        }
    }

    /// Like [`Graph::param_grads`] but moves the gradients out of the graph.
    pub fn into_param_grads(self, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; n_params];
        for (node, g) in self.nodes.into_iter().zip(self.grads) {
            if let (Op::Leaf { param: Some(p) }, Some(g)) = (node.op, g) {
                if p < n_params {
                    match &mut out[p] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
        }
        out
    }

    /// Summed gradients per parameter index, for indices `0..n_params`.
    pub fn param_grads(&self, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; n_params];
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Leaf { param: Some(p) }, Some(g)) = (&node.op, g) {
                if *p < n_params {
                    match &mut out[*p] {
                        Some(acc) => acc.add_assign(g),
                        slot => *slot = Some(g.clone()),
                    }
                }
            }
        }
        out
    }
}
