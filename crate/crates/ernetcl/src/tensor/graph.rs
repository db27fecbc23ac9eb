//! Operation tape: forward kernels plus their backward rules.

use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a node inside one [`Graph`]. Only meaningful for the graph
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Concat(TensorId, TensorId, usize),
    Slice {
        input: TensorId,
        start: usize,
        end: usize,
        axis: usize,
    },
    Transpose(TensorId),
    Sum(TensorId, Option<usize>),
    Mean(TensorId, Option<usize>),
    /// Elementwise `mul * x + add`.
    Affine(TensorId, f64),
    Sigmoid(TensorId),
    Tanh(TensorId),
    LogClamped(TensorId),
    /// Softmax along the trailing axis.
    Softmax(TensorId),
    LayerNorm {
        input: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    },
    StackRows(Vec<TensorId>),
    Reshape(TensorId),
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Topologically ordered record of executed operations. Built per forward
/// pass and dropped after backward.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Numerically stable logistic function, exact for |x| up to ~700.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aik = a[i * k + p];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
    c
}

/// outer, axis extent, inner strides for iteration along `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
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

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Gradient of the last `backward` root w.r.t. this node, if computed.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    /// Non-differentiable leaf from raw values.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<TensorId> {
        Ok(self.leaf(Tensor::new(shape.to_vec(), values)?))
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.leaf(Tensor::scalar(v))
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { tensor, op });
        TensorId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, requires_grad: bool) -> TensorId {
        let mut t = Tensor::new(shape, values).expect("kernel produced inconsistent shape");
        t.requires_grad = requires_grad;
        self.push(t, op)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let values = matmul_raw(self.value(a).values(), self.value(b).values(), m, k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push_op(vec![m, n], values, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_broadcast(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_broadcast(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise with `b` broadcast over the leading axes of `a` when its
    /// shape equals a trailing suffix of `a`'s shape.
    fn binary_broadcast(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let suffix_ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == sb[..];
        if !suffix_ok {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: sa,
                rhs: sb,
            });
        }
        let bn = self.value(b).numel();
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let values: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % bn]))
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push_op(sa, values, op, rg))
    }

    pub fn concat(&mut self, a: TensorId, b: TensorId, axis: usize) -> Result<TensorId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let conformable = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !conformable {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: sa,
                rhs: sb,
            });
        }
        let (outer, la, inner) = split_axis(&sa, axis);
        let lb = sb[axis];
        let mut shape = sa.clone();
        shape[axis] = la + lb;
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut values = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            values.extend_from_slice(&av[o * la * inner..(o + 1) * la * inner]);
            values.extend_from_slice(&bv[o * lb * inner..(o + 1) * lb * inner]);
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push_op(shape, values, Op::Concat(a, b, axis), rg))
    }

    pub fn slice(&mut self, a: TensorId, range: std::ops::Range<usize>, axis: usize) -> Result<TensorId> {
        let sa = self.value(a).shape().to_vec();
        if axis >= sa.len() {
            return Err(Error::Rank(format!("slice axis {axis} out of rank {}", sa.len())));
        }
        if range.start >= range.end || range.end > sa[axis] {
            return Err(Error::Range(format!(
                "slice {}..{} invalid for extent {}",
                range.start, range.end, sa[axis]
            )));
        }
        let (outer, mid, inner) = split_axis(&sa, axis);
        let len = range.end - range.start;
        let mut shape = sa.clone();
        shape[axis] = len;
        let av = self.value(a).values();
        let mut values = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + range.start) * inner;
            values.extend_from_slice(&av[base..base + len * inner]);
        }
        let rg = self.requires(a);
        Ok(self.push_op(
            shape,
            values,
            Op::Slice {
                input: a,
                start: range.start,
                end: range.end,
                axis,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.value(a).shape().to_vec();
        if sa.len() != 2 {
            return Err(Error::Rank(format!("transpose needs rank 2, got {:?}", sa)));
        }
        let (m, n) = (sa[0], sa[1]);
        let av = self.value(a).values();
        let mut values = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                values[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.requires(a);
        Ok(self.push_op(vec![n, m], values, Op::Transpose(a), rg))
    }

    pub fn sum(&mut self, a: TensorId, axis: Option<usize>) -> Result<TensorId> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&mut self, a: TensorId, axis: Option<usize>) -> Result<TensorId> {
        self.reduce(a, axis, true)
    }

    fn reduce(&mut self, a: TensorId, axis: Option<usize>, mean: bool) -> Result<TensorId> {
        let sa = self.value(a).shape().to_vec();
        let av = self.value(a).values();
        let rg = self.requires(a);
        match axis {
            None => {
                let mut s: f64 = av.iter().sum();
                if mean {
                    s /= av.len() as f64;
                }
                let op = if mean { Op::Mean(a, None) } else { Op::Sum(a, None) };
                Ok(self.push_op(vec![1], vec![s], op, rg))
            }
            Some(ax) => {
                if ax >= sa.len() {
                    return Err(Error::Rank(format!("reduce axis {ax} out of rank {}", sa.len())));
                }
                let (outer, mid, inner) = split_axis(&sa, ax);
                let mut values = vec![0.0; outer * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        for i in 0..inner {
                            values[o * inner + i] += av[(o * mid + m) * inner + i];
                        }
                    }
                }
                if mean {
                    for v in &mut values {
                        *v /= mid as f64;
                    }
                }
                let mut shape: Vec<usize> = sa.clone();
                shape.remove(ax);
                if shape.is_empty() {
                    shape.push(1);
                }
                let op = if mean { Op::Mean(a, Some(ax)) } else { Op::Sum(a, Some(ax)) };
                Ok(self.push_op(shape, values, op, rg))
            }
        }
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, a: TensorId, mul: f64, add: f64) -> TensorId {
        let sa = self.value(a).shape().to_vec();
        let values = self.value(a).values().iter().map(|&x| mul * x + add).collect();
        let rg = self.requires(a);
        self.push_op(sa, values, Op::Affine(a, mul), rg)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        self.affine(a, c, 0.0)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let sa = self.value(a).shape().to_vec();
        let values = self.value(a).values().iter().map(|&x| stable_sigmoid(x)).collect();
        let rg = self.requires(a);
        self.push_op(sa, values, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let sa = self.value(a).shape().to_vec();
        let values = self.value(a).values().iter().map(|&x| x.tanh()).collect();
        let rg = self.requires(a);
        self.push_op(sa, values, Op::Tanh(a), rg)
    }

    /// Natural log with the argument clamped at 1e-12.
    pub fn log_clamped(&mut self, a: TensorId) -> TensorId {
        let sa = self.value(a).shape().to_vec();
        let values = self
            .value(a)
            .values()
            .iter()
            .map(|&x| x.max(LOG_CLAMP).ln())
            .collect();
        let rg = self.requires(a);
        self.push_op(sa, values, Op::LogClamped(a), rg)
    }

    /// Softmax along the trailing axis, computed with max subtraction.
    pub fn softmax(&mut self, a: TensorId) -> TensorId {
        let sa = self.value(a).shape().to_vec();
        let d = *sa.last().expect("non-empty shape");
        let av = self.value(a).values();
        let mut values = vec![0.0; av.len()];
        for (row_in, row_out) in av.chunks(d).zip(values.chunks_mut(d)) {
            let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        let rg = self.requires(a);
        self.push_op(sa, values, Op::Softmax(a), rg)
    }

    /// Per-vector standardization along the trailing axis (population
    /// variance), then `gain (*) x + bias`.
    pub fn layer_norm(&mut self, a: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> Result<TensorId> {
        let sa = self.value(a).shape().to_vec();
        let d = *sa.last().expect("non-empty shape");
        for (id, name) in [(gain, "gain"), (bias, "bias")] {
            if self.value(id).shape() != [d] {
                return Err(Error::ShapeMismatch {
                    op: if name == "gain" { "layer_norm gain" } else { "layer_norm bias" },
                    lhs: sa.clone(),
                    rhs: self.value(id).shape().to_vec(),
                });
            }
        }
        let av = self.value(a).values();
        let gv = self.value(gain).values().to_vec();
        let bv = self.value(bias).values().to_vec();
        let mut values = vec![0.0; av.len()];
        for (row_in, row_out) in av.chunks(d).zip(values.chunks_mut(d)) {
            let mu = row_in.iter().sum::<f64>() / d as f64;
            let var = row_in.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            let s = (var + eps).sqrt();
            for j in 0..d {
                row_out[j] = gv[j] * (row_in[j] - mu) / s + bv[j];
            }
        }
        let rg = self.requires(a) || self.requires(gain) || self.requires(bias);
        Ok(self.push_op(
            sa,
            values,
            Op::LayerNorm {
                input: a,
                gain,
                bias,
                eps,
            },
            rg,
        ))
    }

    /// Stack k row vectors of shape [1, n] into [k, n].
    pub fn stack_rows(&mut self, rows: &[TensorId]) -> Result<TensorId> {
        let first = *rows.first().ok_or_else(|| Error::Empty("stack_rows of zero rows".into()))?;
        let s0 = self.value(first).shape().to_vec();
        if s0.len() != 2 || s0[0] != 1 {
            return Err(Error::Rank(format!("stack_rows expects [1, n] rows, got {s0:?}")));
        }
        let n = s0[1];
        let mut values = Vec::with_capacity(rows.len() * n);
        let mut rg = false;
        for &r in rows {
            let t = self.value(r);
            if t.shape() != s0 {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: s0,
                    rhs: t.shape().to_vec(),
                });
            }
            values.extend_from_slice(t.values());
            rg |= t.requires_grad;
        }
        Ok(self.push_op(vec![rows.len(), n], values, Op::StackRows(rows.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != self.value(a).numel() {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {:?} into {:?}",
                self.value(a).shape(),
                shape
            )));
        }
        let values = self.value(a).values().to_vec();
        let rg = self.requires(a);
        Ok(self.push_op(shape.to_vec(), values, Op::Reshape(a), rg))
    }

    /// Reverse-mode sweep from a scalar root. Fills `grad` on every node;
    /// leaves that do not feed the root end up with zero gradients.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Rank(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|node| vec![0.0; node.tensor.numel()])
            .collect();
        grads[root.0][0] = 1.0;

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].tensor.requires_grad && !matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let dy = std::mem::take(&mut grads[idx]);
            self.backprop_one(idx, &op, &dy, &mut grads);
            grads[idx] = dy;
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.tensor.grad = Some(g);
        }
        Ok(())
    }

    fn backprop_one(&self, idx: usize, op: &Op, dy: &[f64], grads: &mut [Vec<f64>]) {
        let val = |id: TensorId| self.nodes[id.0].tensor.values();
        let shp = |id: TensorId| self.nodes[id.0].tensor.shape();
        let out = &self.nodes[idx].tensor;
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shp(a)[0], shp(a)[1]);
                let n = shp(b)[1];
                if self.requires(a) {
                    // dA = dC . B^T
                    let bv = val(b);
                    let ga = &mut grads[a.0];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += dy[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                if self.requires(b) {
                    // dB = A^T . dC
                    let av = val(a);
                    let gb = &mut grads[b.0];
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += av[i * k + p] * dy[i * n + j];
                            }
                            gb[p * n + j] += s;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if self.requires(a) {
                    for (g, &d) in grads[a.0].iter_mut().zip(dy) {
                        *g += d;
                    }
                }
                if self.requires(b) {
                    let bn = self.nodes[b.0].tensor.numel();
                    let gb = &mut grads[b.0];
                    for (i, &d) in dy.iter().enumerate() {
                        gb[i % bn] += d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let bn = self.nodes[b.0].tensor.numel();
                if self.requires(a) {
                    let bv = val(b);
                    let ga = &mut grads[a.0];
                    for (i, &d) in dy.iter().enumerate() {
                        ga[i] += d * bv[i % bn];
                    }
                }
                if self.requires(b) {
                    let av = val(a);
                    let gb = &mut grads[b.0];
                    for (i, &d) in dy.iter().enumerate() {
                        gb[i % bn] += d * av[i];
                    }
                }
            }
            Op::Concat(a, b, axis) => {
                let (outer, la, inner) = split_axis(shp(a), axis);
                let lb = shp(b)[axis];
                let stride = (la + lb) * inner;
                if self.requires(a) {
                    let ga = &mut grads[a.0];
                    for o in 0..outer {
                        for t in 0..la * inner {
                            ga[o * la * inner + t] += dy[o * stride + t];
                        }
                    }
                }
                if self.requires(b) {
                    let gb = &mut grads[b.0];
                    for o in 0..outer {
                        for t in 0..lb * inner {
                            gb[o * lb * inner + t] += dy[o * stride + la * inner + t];
                        }
                    }
                }
            }
            Op::Slice {
                input,
                start,
                end,
                axis,
            } => {
                if self.requires(input) {
                    let (outer, mid, inner) = split_axis(shp(input), axis);
                    let len = end - start;
                    let gi = &mut grads[input.0];
                    for o in 0..outer {
                        let base = (o * mid + start) * inner;
                        for t in 0..len * inner {
                            gi[base + t] += dy[o * len * inner + t];
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if self.requires(a) {
                    let (m, n) = (shp(a)[0], shp(a)[1]);
                    let ga = &mut grads[a.0];
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += dy[j * m + i];
                        }
                    }
                }
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                if self.requires(a) {
                    let mean = matches!(op, Op::Mean(..));
                    let ga = &mut grads[a.0];
                    match axis {
                        None => {
                            let f = if mean { dy[0] / ga.len() as f64 } else { dy[0] };
                            for g in ga.iter_mut() {
                                *g += f;
                            }
                        }
                        Some(ax) => {
                            let (outer, mid, inner) = split_axis(shp(a), ax);
                            let scale = if mean { 1.0 / mid as f64 } else { 1.0 };
                            for o in 0..outer {
                                for m in 0..mid {
                                    for i in 0..inner {
                                        ga[(o * mid + m) * inner + i] += dy[o * inner + i] * scale;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Affine(a, mul) => {
                if self.requires(a) {
                    for (g, &d) in grads[a.0].iter_mut().zip(dy) {
                        *g += mul * d;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.requires(a) {
                    for ((g, &d), &y) in grads[a.0].iter_mut().zip(dy).zip(out.values()) {
                        *g += d * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if self.requires(a) {
                    for ((g, &d), &y) in grads[a.0].iter_mut().zip(dy).zip(out.values()) {
                        *g += d * (1.0 - y * y);
                    }
                }
            }
            Op::LogClamped(a) => {
                if self.requires(a) {
                    for ((g, &d), &x) in grads[a.0].iter_mut().zip(dy).zip(val(a)) {
                        if x > LOG_CLAMP {
                            *g += d / x;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if self.requires(a) {
                    let d = *out.shape().last().unwrap();
                    let ga = &mut grads[a.0];
                    for (r, (yrow, dyrow)) in out.values().chunks(d).zip(dy.chunks(d)).enumerate() {
                        let dot: f64 = yrow.iter().zip(dyrow).map(|(&y, &g)| y * g).sum();
                        for j in 0..d {
                            ga[r * d + j] += yrow[j] * (dyrow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                eps,
            } => {
                let d = *out.shape().last().unwrap();
                let xv = val(input);
                let gv = val(gain);
                for (r, (xrow, dyrow)) in xv.chunks(d).zip(dy.chunks(d)).enumerate() {
                    let mu = xrow.iter().sum::<f64>() / d as f64;
                    let var = xrow.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
                    let s = (var + eps).sqrt();
                    let xhat: Vec<f64> = xrow.iter().map(|&x| (x - mu) / s).collect();
                    if self.requires(gain) {
                        let gg = &mut grads[gain.0];
                        for j in 0..d {
                            gg[j] += dyrow[j] * xhat[j];
                        }
                    }
                    if self.requires(bias) {
                        let gb = &mut grads[bias.0];
                        for j in 0..d {
                            gb[j] += dyrow[j];
                        }
                    }
                    if self.requires(input) {
                        let dh: Vec<f64> = (0..d).map(|j| dyrow[j] * gv[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhx = dh.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / d as f64;
                        let gi = &mut grads[input.0];
                        for j in 0..d {
                            gi[r * d + j] += (dh[j] - mean_dh - xhat[j] * mean_dhx) / s;
                        }
                    }
                }
            }
            Op::StackRows(ref rows) => {
                let n = out.shape()[1];
                for (r, &row) in rows.iter().enumerate() {
                    if self.requires(row) {
                        let gr = &mut grads[row.0];
                        for j in 0..n {
                            gr[j] += dy[r * n + j];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.requires(a) {
                    for (g, &d) in grads[a.0].iter_mut().zip(dy) {
                        *g += d;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{alloc, Init};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf_grad(g: &mut Graph, shape: &[usize], values: &[f64]) -> TensorId {
        g.leaf(Tensor::new(shape.to_vec(), values.to_vec()).unwrap().with_grad())
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g
            .constant(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let a = g
            .constant(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let y = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(y).values(), g.value(a).values());
    }

    #[test]
    fn add_vectors() {
        let mut g = Graph::new();
        let a = g.constant(&[2], vec![1.0, 2.0]).unwrap();
        let b = g.constant(&[2], vec![3.0, 4.0]).unwrap();
        let y = g.add(a, b).unwrap();
        assert_eq!(g.value(y).values(), &[4.0, 6.0]);
    }

    #[test]
    fn concat_shape_arithmetic() {
        let mut g = Graph::new();
        let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(&[2, 5], vec![1.0; 10]).unwrap();
        let y = g.concat(a, b, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 8]);
    }

    #[test]
    fn mismatched_shapes_name_both() {
        let mut g = Graph::new();
        let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(&[4, 5], vec![0.0; 20]).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn backward_product_rule() {
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, &[1], &[2.0]);
        let y = leaf_grad(&mut g, &[1], &[3.0]);
        let root = g.mul(x, y).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0]);
        assert_eq!(g.grad(y).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_chain_rule_by_hand() {
        // root = (x + y) * x at x=2, y=1 -> dx = 2x + y = 5, dy = x = 2
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, &[1], &[2.0]);
        let y = leaf_grad(&mut g, &[1], &[1.0]);
        let s = g.add(x, y).unwrap();
        let root = g.mul(s, x).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0]);
        assert_eq!(g.grad(y).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, &[2], &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::Rank(_))));
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, &[1], &[2.0]);
        let y = leaf_grad(&mut g, &[1], &[3.0]);
        let root = g.mul(x, x).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(y).unwrap(), &[0.0]);
    }

    #[test]
    fn softmax_shift_invariance_and_analytic() {
        let mut g = Graph::new();
        let a = g.constant(&[3], vec![0.3, 0.3, 0.3]).unwrap();
        let y = g.softmax(a);
        for &v in g.value(y).values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = g.constant(&[2], vec![0.0, 2f64.ln()]).unwrap();
        let yb = g.softmax(b);
        assert!((g.value(yb).values()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((g.value(yb).values()[1] - 2.0 / 3.0).abs() < 1e-15);
        let c = g.constant(&[2], vec![100.0, 100.0 + 2f64.ln()]).unwrap();
        let yc = g.softmax(c);
        assert!((g.value(yc).values()[0] - g.value(yb).values()[0]).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_tanh_values_and_stability() {
        let mut g = Graph::new();
        let x = g.constant(&[4], vec![0.0, 2.0, 700.0, -700.0]).unwrap();
        let s = g.sigmoid(x);
        let sv = g.value(s).values();
        assert_eq!(sv[0], 0.5);
        assert!((sv[1] - 0.880797).abs() < 1e-6);
        assert!(sv[2].is_finite() && sv[3].is_finite());
        let t = g.tanh(x);
        assert_eq!(g.value(t).values()[0], 0.0);
    }

    #[test]
    fn forward_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let t = alloc(&[4, 4], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut rng).unwrap();
            let mut g = Graph::new();
            let a = g.leaf(t.clone());
            let b = g.leaf(t);
            let m = g.matmul(a, b).unwrap();
            let s = g.sigmoid(m);
            g.value(s).values().to_vec()
        };
        let (x, y) = (run(), run());
        assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn random_three_layer_composition_matches_finite_differences() {
        use crate::tensor::finite_diff_check;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let w1 = alloc(&[3, 3], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut rng).unwrap().with_grad();
        let w2 = alloc(&[3, 3], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut rng).unwrap().with_grad();
        let x = alloc(&[2, 3], Init::Uniform { lo: -1.0, hi: 1.0 }, &mut rng).unwrap().with_grad();
        let err = finite_diff_check(
            |g, ids| {
                let h1 = g.matmul(ids[2], ids[0])?;
                let h1 = g.tanh(h1);
                let h2 = g.matmul(h1, ids[1])?;
                let h2 = g.sigmoid(h2);
                g.mean(h2, None)
            },
            &[w1, w2, x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
