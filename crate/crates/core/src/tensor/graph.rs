use super::kernels::{self, axis_split, broadcast_map, broadcast_shape};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Expand(Var),
    Narrow { input: Var, axis: usize, start: usize },
    IndexSelect { input: Var, axis: usize, indices: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Relu(Var),
    Sqrt(Var),
    Abs(Var),
    Log1pExp(Var),
    Softmax { input: Var, axis: usize },
    Sum { input: Var, axis: usize },
    Mean { input: Var, axis: usize },
    Variance { input: Var, axis: usize },
    Max { input: Var, axis: usize, argmax: Vec<usize> },
    SumAll(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Permute(a, _) | Reshape(a) | Expand(a) | Relu(a)
            | Sqrt(a) | Abs(a) | Log1pExp(a) | SumAll(a) => vec![*a],
            Narrow { input, .. }
            | IndexSelect { input, .. }
            | Softmax { input, .. }
            | Sum { input, .. }
            | Mean { input, .. }
            | Variance { input, .. }
            | Max { input, .. } => vec![*input],
            Concat { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of forward operations. Node ids are assigned in creation order,
/// which is a topological order of the computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Tensor>>>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass w.r.t. `v`; `None` before backward
    /// or when `v` does not depend on any gradient-requiring leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        #[cfg(debug_assertions)]
        {
            let inputs_finite = op.inputs().iter().all(|v| self.nodes[v.0].value.is_finite());
            if inputs_finite && !matches!(op, Op::Leaf) {
                debug_assert!(value.is_finite(), "non-finite output from finite inputs in {op:?}");
            }
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, requires_grad))
    }

    fn check_axis(&self, v: Var, axis: usize, what: &str) -> Result<()> {
        let rank = self.shape(v).len();
        if axis >= rank {
            return Err(Error::shape(format!(
                "{what}: axis {axis} out of range for shape {:?}",
                self.shape(v)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb)?;
        let ma = broadcast_map(&out, &sa);
        let mb = broadcast_map(&out, &sb);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let n: usize = out.iter().product();
        let data = (0..n)
            .map(|i| {
                let ia = ma.as_ref().map_or(i, |m| m[i]);
                let ib = mb.as_ref().map_or(i, |m| m[i]);
                f(xa[ia], xb[ib])
            })
            .collect();
        self.derived(out, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let requires_grad = self.requires_grad(a);
        self.push(t, Op::Scale(a, c), requires_grad)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let requires_grad = self.requires_grad(a);
        self.push(t, Op::AddScalar(a), requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = kernels::matmul_forward(self.value(a), self.value(b))?;
        self.derived(shape, data, Op::MatMul(a, b))
    }

    /// `x · w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sw = self.shape(w);
        let sb = self.shape(b);
        if sw.len() != 2 || sb != [sw[1]] {
            return Err(Error::shape(format!(
                "linear: weight {:?} and bias {:?} do not agree",
                sw, sb
            )));
        }
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.shape(a).len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::shape(format!(
                "invalid permutation {axes:?} for shape {:?}",
                self.shape(a)
            )));
        }
        let t = kernels::permute(self.value(a), axes);
        let requires_grad = self.requires_grad(a);
        Ok(self.push(t, Op::Permute(a, axes.to_vec()), requires_grad))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::shape(format!(
                "transpose needs rank >= 2, got {:?}",
                self.shape(a)
            )));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let requires_grad = self.requires_grad(a);
        Ok(self.push(t, Op::Reshape(a), requires_grad))
    }

    /// Broadcasts `a` to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if broadcast_shape(&sa, shape)? != shape {
            return Err(Error::shape(format!("cannot expand {sa:?} to {shape:?}")));
        }
        let map = broadcast_map(shape, &sa);
        let x = self.value(a).data();
        let data = match map {
            Some(m) => m.iter().map(|&i| x[i]).collect(),
            None => x.to_vec(),
        };
        self.derived(shape.to_vec(), data, Op::Expand(a))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(a, axis, "narrow")?;
        let shape = self.shape(a).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "narrow {start}..{} out of range on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let indices: Vec<usize> = (start..start + len).collect();
        let (shape, data) = self.gather(a, axis, &indices);
        self.derived(shape, data, Op::Narrow { input: a, axis, start })
    }

    /// Gathers the given positions along `axis` (repeats allowed).
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        self.check_axis(a, axis, "index_select")?;
        let len = self.shape(a)[axis];
        if indices.is_empty() || indices.iter().any(|&i| i >= len) {
            return Err(Error::shape(format!(
                "index_select indices {indices:?} invalid for axis {axis} of {:?}",
                self.shape(a)
            )));
        }
        let (shape, data) = self.gather(a, axis, indices);
        self.derived(
            shape,
            data,
            Op::IndexSelect {
                input: a,
                axis,
                indices: indices.to_vec(),
            },
        )
    }

    fn gather(&self, a: Var, axis: usize, indices: &[usize]) -> (Vec<usize>, Vec<f64>) {
        let x = self.value(a);
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &k in indices {
                let base = (o * len + k) * inner;
                data.extend_from_slice(&x.data()[base..base + inner]);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = indices.len();
        (shape, data)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        self.check_axis(first, axis, "concat")?;
        let base_shape = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat along axis {axis}: {:?} vs {base_shape:?}",
                    s
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        self.derived(
            shape,
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let requires_grad = self.requires_grad(a);
        self.push(t, op, requires_grad)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Softplus `log(1 + e^x)`, evaluated without overflow.
    pub fn log1pexp(&mut self, a: Var) -> Var {
        self.unary(a, kernels::log1pexp, Op::Log1pExp(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "softmax")?;
        let data = kernels::softmax(self.value(a), axis);
        let shape = self.shape(a).to_vec();
        self.derived(shape, data, Op::Softmax { input: a, axis })
    }

    fn reduce(
        &mut self,
        a: Var,
        axis: usize,
        keepdim: bool,
        what: &str,
        f: impl Fn(&mut dyn Iterator<Item = f64>, usize) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        self.check_axis(a, axis, what)?;
        let x = self.value(a);
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut lane = (0..len).map(|k| x.data()[base + k * inner]);
                data.push(f(&mut lane, len));
            }
        }
        let mut shape = x.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok((shape, data))
    }

    pub fn sum(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let (shape, data) = self.reduce(a, axis, keepdim, "sum", |it, _| it.sum())?;
        self.derived(shape, data, Op::Sum { input: a, axis })
    }

    pub fn mean(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let (shape, data) =
            self.reduce(a, axis, keepdim, "mean", |it, n| it.sum::<f64>() / n as f64)?;
        self.derived(shape, data, Op::Mean { input: a, axis })
    }

    /// Population variance (divides by the lane length).
    pub fn variance(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let (shape, data) = self.reduce(a, axis, keepdim, "variance", |it, n| {
            let lane: Vec<f64> = it.collect();
            population_variance(&lane, n)
        })?;
        self.derived(shape, data, Op::Variance { input: a, axis })
    }

    /// Maximum along `axis`; the gradient goes to the first maximal entry.
    pub fn max(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.check_axis(a, axis, "max")?;
        let x = self.value(a);
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = 0;
                for k in 1..len {
                    if x.data()[base + k * inner] > x.data()[base + best * inner] {
                        best = k;
                    }
                }
                data.push(x.data()[base + best * inner]);
                argmax.push(best);
            }
        }
        let mut shape = x.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        self.derived(shape, data, Op::Max { input: a, axis, argmax })
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let requires_grad = self.requires_grad(a);
        self.push(Tensor::scalar(total), Op::SumAll(a), requires_grad)
    }

    /// Populates gradients of the scalar `loss` w.r.t. every node that
    /// depends on a gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Graph(
                "backward already ran on this graph; record a new forward first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("grad shape")))
            .collect();
        self.grads = Some(grads);
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out_shape = node.value.shape();
        let mut acc = |v: Var, d: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&d).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, reduce_to(g, out_shape, self.shape(*a)));
                acc(*b, reduce_to(g, out_shape, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                acc(*a, reduce_to(g, out_shape, self.shape(*a)));
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                acc(*b, reduce_to(&neg, out_shape, self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let xa = broadcast_values(self.value(*a), out_shape);
                let xb = broadcast_values(self.value(*b), out_shape);
                let ga: Vec<f64> = g.iter().zip(&xb).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = g.iter().zip(&xa).map(|(g, x)| g * x).collect();
                acc(*a, reduce_to(&ga, out_shape, self.shape(*a)));
                acc(*b, reduce_to(&gb, out_shape, self.shape(*b)));
            }
            Op::Div(a, b) => {
                let xa = broadcast_values(self.value(*a), out_shape);
                let xb = broadcast_values(self.value(*b), out_shape);
                let ga: Vec<f64> = g.iter().zip(&xb).map(|(g, y)| g / y).collect();
                let gb: Vec<f64> = g
                    .iter()
                    .zip(xa.iter().zip(&xb))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                acc(*a, reduce_to(&ga, out_shape, self.shape(*a)));
                acc(*b, reduce_to(&gb, out_shape, self.shape(*b)));
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::MatMul(a, b) => {
                let (ga, gb) = kernels::matmul_backward(self.value(*a), self.value(*b), g);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Permute(a, axes) => {
                let gt = Tensor::new(out_shape.to_vec(), g.to_vec()).expect("grad shape");
                let inv = kernels::inverse_permutation(axes);
                acc(*a, kernels::permute(&gt, &inv).into_data());
            }
            Op::Expand(a) => acc(*a, reduce_to(g, out_shape, self.shape(*a))),
            Op::Narrow { input, axis, start } => {
                let len = out_shape[*axis];
                let indices: Vec<usize> = (*start..*start + len).collect();
                acc(*input, scatter(g, self.shape(*input), *axis, &indices));
            }
            Op::IndexSelect { input, axis, indices } => {
                acc(*input, scatter(g, self.shape(*input), *axis, indices));
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(out_shape, *axis);
                let total = out_shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let base = o * total + offset;
                        d.extend_from_slice(&g[base..base + chunk]);
                    }
                    acc(v, d);
                    offset += chunk;
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                acc(*a, g.iter().zip(y).map(|(g, y)| 0.5 * g / y).collect());
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                acc(*a, g.iter().zip(x).map(|(g, &x)| g * sign(x)).collect());
            }
            Op::Log1pExp(a) => {
                let x = self.value(*a).data();
                acc(*a, g.iter().zip(x).map(|(g, &x)| g * kernels::sigmoid(x)).collect());
            }
            Op::Softmax { input, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(out_shape, *axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len)
                            .map(|k| g[base + k * inner] * y[base + k * inner])
                            .sum();
                        for k in 0..len {
                            let j = base + k * inner;
                            d[j] = y[j] * (g[j] - dot);
                        }
                    }
                }
                acc(*input, d);
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let in_shape = self.shape(*input);
                let (outer, len, inner) = axis_split(in_shape, *axis);
                let factor = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            d[(o * len + k) * inner + i] = g[o * inner + i] * factor;
                        }
                    }
                }
                acc(*input, d);
            }
            Op::Variance { input, axis } => {
                let x = self.value(*input);
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let n = len as f64;
                let mut d = vec![0.0; x.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let shift = x.data()[base];
                        let mean = (0..len).map(|k| x.data()[base + k * inner] - shift).sum::<f64>() / n;
                        let gi = g[o * inner + i];
                        for k in 0..len {
                            let j = base + k * inner;
                            d[j] = gi * 2.0 * (x.data()[j] - shift - mean) / n;
                        }
                    }
                }
                acc(*input, d);
            }
            Op::Max { input, axis, argmax } => {
                let in_shape = self.shape(*input);
                let (outer, len, inner) = axis_split(in_shape, *axis);
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let k = argmax[o * inner + i];
                        d[(o * len + k) * inner + i] = g[o * inner + i];
                    }
                }
                acc(*input, d);
            }
            Op::SumAll(a) => acc(*a, vec![g[0]; self.value(*a).numel()]),
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Computed on values shifted by the first entry, so a constant lane gives
/// exactly zero and large offsets do not cancel.
pub(crate) fn population_variance(lane: &[f64], n: usize) -> f64 {
    let n = n as f64;
    let shift = lane[0];
    let mean = lane.iter().map(|x| x - shift).sum::<f64>() / n;
    lane.iter().map(|x| (x - shift - mean) * (x - shift - mean)).sum::<f64>() / n
}

/// Sums a gradient over the axes that were broadcast to reach `out`.
fn reduce_to(g: &[f64], out: &[usize], input: &[usize]) -> Vec<f64> {
    match broadcast_map(out, input) {
        None => g.to_vec(),
        Some(map) => {
            let mut d = vec![0.0; input.iter().product()];
            for (i, &m) in map.iter().enumerate() {
                d[m] += g[i];
            }
            d
        }
    }
}

fn broadcast_values(t: &Tensor, out: &[usize]) -> Vec<f64> {
    match broadcast_map(out, t.shape()) {
        None => t.data().to_vec(),
        Some(map) => map.iter().map(|&i| t.data()[i]).collect(),
    }
}

fn scatter(g: &[f64], in_shape: &[usize], axis: usize, indices: &[usize]) -> Vec<f64> {
    let (outer, len, inner) = axis_split(in_shape, axis);
    let mut d = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for (j, &k) in indices.iter().enumerate() {
            let src = (o * indices.len() + j) * inner;
            let dst = (o * len + k) * inner;
            for i in 0..inner {
                d[dst + i] += g[src + i];
            }
        }
    }
    d
}
