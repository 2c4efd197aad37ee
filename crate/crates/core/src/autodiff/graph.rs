use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::{axis_split, broadcast_index_map, broadcast_shape, strides, Tensor};
use super::{AutodiffError, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul { a: usize, b: usize, trans_b: bool },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    SumAxis { x: usize, axis: usize },
    BroadcastTo(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Gelu(usize),
    Relu(usize),
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, axis: usize, inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of a single forward pass. Nodes are appended in evaluation order,
/// so the node list is already a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, usize>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, usize>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of every parameter loaded into the graph. Parameters that
    /// did not influence the output get an all-zero gradient.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &id)| {
                let g = self.grads[id]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(&self.shapes[id]));
                (name.clone(), g)
            })
            .collect()
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(AutodiffError::Shape(msg))
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf that is not tied to a parameter store.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a named parameter. Repeated loads of the same name return the
    /// same node so its gradient accumulates in one place.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&id) = self.params.get(name) {
            return Ok(Var(id));
        }
        let value = store
            .get(name)
            .ok_or_else(|| AutodiffError::MissingParam(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(name.to_string(), v.0);
        Ok(v)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if let Some(period) = trailing_period(vb.shape(), va.shape()) {
            let (x, y) = (va.data(), vb.data());
            let data = (0..x.len()).map(|i| f(x[i], y[i % period])).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else {
            let out = broadcast_shape(va.shape(), vb.shape())?;
            let ma = broadcast_index_map(va.shape(), &out);
            let mb = broadcast_index_map(vb.shape(), &out);
            let data = ma
                .iter()
                .zip(&mb)
                .map(|(&i, &j)| f(va.data()[i], vb.data()[j]))
                .collect();
            Tensor::new(out, data)?
        };
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, op, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x.0))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x.0, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x.0))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x.0))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x.0))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x.0))
    }

    /// `a @ b` (or `a @ bᵀ` when `trans_b`). `a` is `[.., m, k]`; `b` is
    /// either a shared matrix or carries the same leading batch dimensions.
    pub fn matmul_opt(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err(format!("matmul needs rank ≥ 2, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return shape_err(format!(
                "matmul inner dimensions differ: {sa:?} x {sb:?} (trans_b={trans_b})"
            ));
        }
        let batch_dims = &sa[..sa.len() - 2];
        let shared = sb.len() == 2;
        if !shared && sb[..sb.len() - 2] != *batch_dims {
            return shape_err(format!("matmul batch dimensions differ: {sa:?} x {sb:?}"));
        }
        let batch: usize = batch_dims.iter().product();
        let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        // a shared right operand lets the batch fold into the row dimension
        let (blocks, rows) = if shared { (1, batch * m) } else { (batch, m) };
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..blocks {
            let ab = &va[bi * rows * k..(bi + 1) * rows * k];
            let bb = if shared { vb } else { &vb[bi * k * n..(bi + 1) * k * n] };
            let ob = &mut out[bi * rows * n..(bi + 1) * rows * n];
            if trans_b {
                mm_nt(ab, bb, ob, rows, k, n);
            } else {
                mm_nn(ab, bb, ob, rows, k, n);
            }
        }
        let mut shape = batch_dims.to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_opt(a, b, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::Reshape(x.0), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err(format!("invalid permutation {perm:?} for shape {shape:?}"));
        }
        let value = permute_tensor(&self.nodes[x.0].value, perm);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::Permute(x.0, perm.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return shape_err(format!("transpose needs rank ≥ 2, got {r}"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| {
            AutodiffError::Shape("concat of zero tensors".into())
        })?)
        .to_vec();
        if axis >= first.len() {
            return shape_err(format!("concat axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let same_rest = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same_rest {
                return shape_err(format!("concat shape mismatch: {s:?} vs {first:?}"));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let len = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let value = Tensor::new(shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(value, Op::Concat { parts: ids, axis }, rg))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return shape_err(format!("bad slice {start}..{end} on axis {axis} of {shape:?}"));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.nodes[x.0].value.data();
        let w = end - start;
        let mut data = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = w;
        let value = Tensor::new(out_shape, data)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::Slice { x: x.0, axis, start }, rg))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("sum axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.nodes[x.0].value.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, data)?;
        let rg = self.nodes[x.0].requires_grad;
        let v = self.push(value, Op::SumAxis { x: x.0, axis }, rg);
        if keepdim {
            let mut kept = shape;
            kept[axis] = 1;
            self.reshape(v, &kept)
        } else {
            Ok(v)
        }
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| AutodiffError::Shape(format!("mean axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis, keepdim)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Sum of every element, as a scalar node.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.numel();
        let flat = self.reshape(x, &[n])?;
        self.sum_axis(flat, 0, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.numel();
        let s = self.sum_all(x)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.nodes[x.0].value.shape().to_vec();
        if broadcast_shape(&src, shape)? != shape {
            return shape_err(format!("cannot broadcast {src:?} to {shape:?}"));
        }
        let map = broadcast_index_map(&src, shape);
        let d = self.nodes[x.0].value.data();
        let data = map.iter().map(|&i| d[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::BroadcastTo(x.0), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("softmax axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.nodes[x.0].value.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::Softmax { x: x.0, axis }, rg))
    }

    /// Normalizes to zero mean and unit variance along `axis` (no affine part).
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("layer_norm axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.nodes[x.0].value.data();
        let mut out = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mean = (0..len).map(|l| src[at(l)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|l| (src[at(l)] - mean).powi(2)).sum::<f64>() / len as f64;
                let r = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = r;
                for l in 0..len {
                    out[at(l)] = (src[at(l)] - mean) * r;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::LayerNorm { x: x.0, axis, inv_std }, rg))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.numel() != 1 {
            return Err(AutodiffError::NonScalarOutput(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums a broadcast gradient back down to the shape of node `id`.
    fn reduce_to(&self, id: usize, g: &Tensor) -> Tensor {
        let shape = self.nodes[id].value.shape();
        if shape == g.shape() {
            return g.clone();
        }
        if let Some(period) = trailing_period(shape, g.shape()) {
            let mut out = Tensor::zeros(shape);
            let d = out.data_mut();
            for chunk in g.data().chunks(period) {
                for (o, v) in d.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            return out;
        }
        let map = broadcast_index_map(shape, g.shape());
        let mut out = Tensor::zeros(shape);
        let d = out.data_mut();
        for (&j, &gv) in map.iter().zip(g.data()) {
            d[j] += gv;
        }
        out
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &p in [a, b] {
                    if self.needs(p) {
                        let r = self.reduce_to(p, g);
                        self.accumulate(grads, p, r);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    let r = self.reduce_to(*a, g);
                    self.accumulate(grads, *a, r);
                }
                if self.needs(*b) {
                    let r = self.reduce_to(*b, &g.map(|v| -v));
                    self.accumulate(grads, *b, r);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let shape = g.shape().to_vec();
                let (va, vb) = (val(*a), val(*b));
                let ma = broadcast_index_map(va.shape(), &shape);
                let mb = broadcast_index_map(vb.shape(), &shape);
                if self.needs(*a) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| {
                            let y = vb.data()[mb[i]];
                            if is_div { gv / y } else { gv * y }
                        })
                        .collect();
                    let full = Tensor::new(shape.clone(), data).expect("shape");
                    let r = self.reduce_to(*a, &full);
                    self.accumulate(grads, *a, r);
                }
                if self.needs(*b) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| {
                            let x = va.data()[ma[i]];
                            let y = vb.data()[mb[i]];
                            if is_div { -gv * x / (y * y) } else { gv * x }
                        })
                        .collect();
                    let full = Tensor::new(shape, data).expect("shape");
                    let r = self.reduce_to(*b, &full);
                    self.accumulate(grads, *b, r);
                }
            }
            Op::Neg(x) => self.accumulate(grads, *x, g.map(|v| -v)),
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c))
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Exp(x) => {
                let y = &node.value;
                self.accumulate(grads, *x, zip_map(g, y, |gv, yv| gv * yv));
            }
            Op::Log(x) => self.accumulate(grads, *x, zip_map(g, val(*x), |gv, xv| gv / xv)),
            Op::Sqrt(x) => {
                self.accumulate(grads, *x, zip_map(g, &node.value, |gv, yv| 0.5 * gv / yv))
            }
            Op::Gelu(x) => {
                self.accumulate(grads, *x, zip_map(g, val(*x), |gv, xv| gv * gelu_grad(xv)))
            }
            Op::Relu(x) => self.accumulate(
                grads,
                *x,
                zip_map(g, val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
            ),
            Op::MatMul { a, b, trans_b } => self.backprop_matmul(*a, *b, *trans_b, g, grads),
            Op::Reshape(x) => {
                let r = g.clone().reshaped(val(*x).shape()).expect("shape");
                self.accumulate(grads, *x, r);
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *x, permute_tensor(g, &inv));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ps = val(p).shape();
                    let len = ps[*axis];
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.accumulate(grads, p, Tensor::new(ps.to_vec(), data).expect("shape"));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = val(*x).shape();
                let (outer, len, inner) = axis_split(xs, *axis);
                let w = g.shape()[*axis];
                let mut full = Tensor::zeros(xs);
                let d = full.data_mut();
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    d[dst..dst + w * inner]
                        .copy_from_slice(&g.data()[o * w * inner..(o + 1) * w * inner]);
                }
                self.accumulate(grads, *x, full);
            }
            Op::SumAxis { x, axis } => {
                let xs = val(*x).shape();
                let (outer, len, inner) = axis_split(xs, *axis);
                let mut full = Tensor::zeros(xs);
                let d = full.data_mut();
                for o in 0..outer {
                    for l in 0..len {
                        d[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, full);
            }
            Op::BroadcastTo(x) => {
                let r = self.reduce_to(*x, g);
                self.accumulate(grads, *x, r);
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let mut dx = Tensor::zeros(y.shape());
                let (yd, gd) = (y.data(), g.data());
                let d = dx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| gd[at(l)] * yd[at(l)]).sum();
                        for l in 0..len {
                            d[at(l)] = yd[at(l)] * (gd[at(l)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, axis, inv_std } => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let mut dx = Tensor::zeros(y.shape());
                let (yd, gd) = (y.data(), g.data());
                let d = dx.data_mut();
                let n = len as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let r = inv_std[o * inner + i];
                        let sg: f64 = (0..len).map(|l| gd[at(l)]).sum();
                        let sgy: f64 = (0..len).map(|l| gd[at(l)] * yd[at(l)]).sum();
                        for l in 0..len {
                            d[at(l)] = r / n * (n * gd[at(l)] - sg - yd[at(l)] * sgy);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }

    fn backprop_matmul(
        &self,
        a: usize,
        b: usize,
        trans_b: bool,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (sa, sb) = (va.shape(), vb.shape());
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = g.shape()[g.rank() - 1];
        let shared = sb.len() == 2;
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let (batch, m) = if shared { (1, batch * m) } else { (batch, m) };
        let gd = g.data();
        if self.needs(a) {
            let mut da = vec![0.0; va.numel()];
            for bi in 0..batch {
                let gb = &gd[bi * m * n..(bi + 1) * m * n];
                let bb = if shared { vb.data() } else { &vb.data()[bi * k * n..(bi + 1) * k * n] };
                let out = &mut da[bi * m * k..(bi + 1) * m * k];
                if trans_b {
                    // C = A Bᵀ, B is n×k: dA = dC B
                    mm_nn(gb, bb, out, m, n, k);
                } else {
                    // C = A B, B is k×n: dA = dC Bᵀ
                    mm_nt(gb, bb, out, m, n, k);
                }
            }
            self.accumulate(grads, a, Tensor::new(sa.to_vec(), da).expect("shape"));
        }
        if self.needs(b) {
            let mut db = vec![0.0; vb.numel()];
            for bi in 0..batch {
                let gb = &gd[bi * m * n..(bi + 1) * m * n];
                let ab = &va.data()[bi * m * k..(bi + 1) * m * k];
                let out = if shared { &mut db[..] } else { &mut db[bi * k * n..(bi + 1) * k * n] };
                if trans_b {
                    // dB = dCᵀ A  (n×k)
                    mm_tn(gb, ab, out, m, n, k);
                } else {
                    // dB = Aᵀ dC  (k×n)
                    mm_tn(ab, gb, out, m, k, n);
                }
            }
            self.accumulate(grads, b, Tensor::new(sb.to_vec(), db).expect("shape"));
        }
    }
}

/// If `small` (ignoring leading unit axes) equals the trailing axes of
/// `big`, broadcasting is a plain repeat with this period.
fn trailing_period(small: &[usize], big: &[usize]) -> Option<usize> {
    let lead = small.iter().take_while(|&&d| d == 1).count();
    let core = &small[lead..];
    if core.len() > big.len() || small.len() > big.len() || big[big.len() - core.len()..] != *core {
        return None;
    }
    let period: usize = core.iter().product();
    (period > 0).then_some(period)
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(g.shape().to_vec(), data).expect("shape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let numel = t.numel();
    let mut data = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    let src = t.data();
    for _ in 0..numel {
        data.push(src[cur]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            cur -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("shape")
}

/// out[m×n] += a[m×k] · b[k×n]
fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, a, (k, 1), b, (n, 1), out);
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, a, (k, 1), b, (1, k), out);
}

/// out[p×q] += a[m×p]ᵀ · b[m×q]
fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, q: usize) {
    gemm(p, m, q, a, (1, p), b, (q, 1), out);
}

/// `out += A·B` for row-major `out` and arbitrary (row, column) strides of
/// `A` (`m×k`) and `B` (`k×n`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    out: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    // SAFETY: the bounds above keep every strided access inside the slices
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
