use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::{col2im, gemm, im2col, ConvGeometry, MatRef, Tensor, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{conv2d_output_extent, conv_transpose2d_output_extent};

type Result<T> = core::result::Result<T, TensorError>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    Max(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    Narrow { src: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    BiasFirst(Var, Var),
    BiasLast(Var, Var),
    MulFirst(Var, Var),
    MulLast(Var, Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, stride: usize, pad: usize },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Tape of forward operations. Values are computed eagerly; [`Graph::backward`] replays the
/// tape in reverse.
///
/// A graph is built and differentiated on one thread. Parameters are copied in on first use
/// and their gradients are accumulated back into the owning [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params_frozen: bool,
    params: BTreeMap<ParamId, Var>,
    frozen: BTreeMap<ParamId, Var>,
    leaf_grads: BTreeMap<usize, Tensor>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            params_frozen: false,
            params: BTreeMap::new(),
            frozen: BTreeMap::new(),
            leaf_grads: BTreeMap::new(),
        }
    }

    /// Graph in which parameters are registered as constants; nothing is recorded for backward.
    pub fn inference() -> Self {
        Graph { grad_enabled: false, ..Self::new() }
    }

    /// Graph that records gradients for inputs only; parameters enter as constants.
    pub fn frozen_params() -> Self {
        Graph { params_frozen: true, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient of a tracked input leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(&v.0)
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn t(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is recorded by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        let tracked = self.grad_enabled;
        self.push(value, Op::Leaf, tracked)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if !self.grad_enabled || self.params_frozen {
            return self.frozen_param(store, id);
        }
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    /// Parameter copy that never receives gradient.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.frozen.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, false);
        self.frozen.insert(id, v);
        v
    }

    /// Constant copy of `v`'s value; gradient stops here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(op_name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        let tracked = self.t(a) || self.t(b);
        Ok(self.push(value, op, tracked))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let value = Tensor::from_fn(ta.shape(), |i| f(ta.data()[i]));
        let tracked = self.t(a);
        self.push(value, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("minimum", a, b, f64::min, Op::Min(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("maximum", a, b, f64::max, Op::Max(a, b))
    }

    /// Sum of several same-shape tensors.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms.split_first().ok_or_else(|| TensorError::dim("add_all", "no terms"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, crate::math::sigmoid, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let tracked = self.t(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = if t.is_empty() { 0.0 } else { t.sum() / t.len() as f64 };
        let tracked = self.t(a);
        self.push(Tensor::scalar(m), Op::Mean(a), tracked)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let tracked = self.t(a);
        Ok(self.push(value, Op::Reshape(a), tracked))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(TensorError::dim("transpose", "expects rank 2"));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let src = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        let tracked = self.t(a);
        Ok(self.push(value, Op::Transpose(a), tracked))
    }

    /// Copy of `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return Err(TensorError::dim(
                "narrow",
                alloc::format!("range {start}+{len} on axis {axis} of {:?}", t.shape()),
            ));
        }
        let (outer, dim, inner) = axis_split(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, out)?;
        let tracked = self.t(a);
        Ok(self.push(value, Op::Narrow { src: a, axis, start }, tracked))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::dim("concat", "no parts"))?;
        let base_shape = self.value(*first).shape().to_vec();
        if axis >= base_shape.len() {
            return Err(TensorError::dim("concat", "axis out of range"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::mismatch("concat", &base_shape, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let d = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        let tracked = parts.iter().any(|&p| self.t(p));
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, tracked))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a)·op(b)` where `op` optionally transposes a rank-2 operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 {
            return Err(TensorError::mismatch("matmul", va.shape(), vb.shape()));
        }
        let ma = MatRef::row_major(va.data(), va.shape()[0], va.shape()[1]).t_if(ta);
        let mb = MatRef::row_major(vb.data(), vb.shape()[0], vb.shape()[1]).t_if(tb);
        if ma.cols != mb.rows {
            return Err(TensorError::mismatch("matmul", va.shape(), vb.shape()));
        }
        let mut out = vec![0.0; ma.rows * mb.cols];
        gemm(ma, mb, &mut out, 0.0);
        let value = Tensor::new(&[ma.rows, mb.cols], out)?;
        let tracked = self.t(a) || self.t(b);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, tracked))
    }

    /// `x[C×…] + b[C]`, broadcasting over the trailing extents.
    pub fn bias_first(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let c = vx.shape().first().copied().unwrap_or(0);
        if vb.len() != c {
            return Err(TensorError::mismatch("bias_first", vx.shape(), vb.shape()));
        }
        let inner = vx.len() / c.max(1);
        let mut out = vx.data().to_vec();
        for (ch, chunk) in out.chunks_mut(inner.max(1)).enumerate().take(c) {
            let bv = vb.data()[ch];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let value = Tensor::new(vx.shape(), out)?;
        let tracked = self.t(x) || self.t(b);
        Ok(self.push(value, Op::BiasFirst(x, b), tracked))
    }

    /// `x[…×m] + b[m]`, broadcasting over the leading extents.
    pub fn bias_last(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let m = vx.shape().last().copied().unwrap_or(0);
        if vb.len() != m || m == 0 {
            return Err(TensorError::mismatch("bias_last", vx.shape(), vb.shape()));
        }
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(m) {
            add_into(row, vb.data());
        }
        let value = Tensor::new(vx.shape(), out)?;
        let tracked = self.t(x) || self.t(b);
        Ok(self.push(value, Op::BiasLast(x, b), tracked))
    }

    /// `x[…×m] * g[m]`, broadcasting over the leading extents.
    pub fn mul_last(&mut self, x: Var, g: Var) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(g));
        let m = vx.shape().last().copied().unwrap_or(0);
        if vg.len() != m || m == 0 {
            return Err(TensorError::mismatch("mul_last", vx.shape(), vg.shape()));
        }
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(m) {
            row.iter_mut().zip(vg.data()).for_each(|(v, s)| *v *= s);
        }
        let value = Tensor::new(vx.shape(), out)?;
        let tracked = self.t(x) || self.t(g);
        Ok(self.push(value, Op::MulLast(x, g), tracked))
    }

    /// `x[C×…] * g[C]`, broadcasting over the trailing extents.
    pub fn mul_first(&mut self, x: Var, g: Var) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(g));
        let c = vx.shape().first().copied().unwrap_or(0);
        if vg.len() != c || c == 0 {
            return Err(TensorError::mismatch("mul_first", vx.shape(), vg.shape()));
        }
        let inner = vx.len() / c;
        let mut out = vx.data().to_vec();
        for (ch, chunk) in out.chunks_mut(inner.max(1)).enumerate().take(c) {
            let s = vg.data()[ch];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        let value = Tensor::new(vx.shape(), out)?;
        let tracked = self.t(x) || self.t(g);
        Ok(self.push(value, Op::MulFirst(x, g), tracked))
    }

    /// Softmax along the last axis, stabilised by subtracting the row maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.shape().last().copied().ok_or_else(|| TensorError::dim("softmax", "rank 0 input"))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = crate::math::exp(*v - mx);
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::new(t.shape(), out)?;
        let tracked = self.t(a);
        Ok(self.push(value, Op::Softmax(a), tracked))
    }

    /// Normalise each vector along the last axis to zero mean and unit variance.
    pub fn normalize_last(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let m = t
            .shape()
            .last()
            .copied()
            .filter(|&m| m > 0)
            .ok_or_else(|| TensorError::dim("layer_norm", "empty last axis"))?;
        let mut out = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / m);
        for row in out.chunks_mut(m) {
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / crate::math::sqrt(var + eps);
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            inv_std.push(r);
        }
        let value = Tensor::new(t.shape(), out)?;
        let tracked = self.t(a);
        Ok(self.push(value, Op::LayerNorm { x: a, inv_std }, tracked))
    }

    /// Layer normalisation along the last axis with elementwise gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.normalize_last(x, eps)?;
        let scaled = self.mul_last(n, gain)?;
        self.bias_last(scaled, bias)
    }

    /// Cross-correlation of `x[C×H×W]` with `w[O×C×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let g = conv_geometry(vx.shape(), vw.shape(), stride, pad)?;
        let o = vw.shape()[0];
        let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
        im2col(vx.data(), &g, &mut cols);
        let mut out = vec![0.0; o * g.col_cols()];
        gemm(
            MatRef::row_major(vw.data(), o, g.col_rows()),
            MatRef::row_major(&cols, g.col_rows(), g.col_cols()),
            &mut out,
            0.0,
        );
        let value = Tensor::new(&[o, g.out_h, g.out_w], out)?;
        let tracked = self.t(x) || self.t(w);
        Ok(self.push(value, Op::Conv2d { x, w, stride, pad }, tracked))
    }

    /// Transposed convolution of `x[Cin×H×W]` with `w[Cin×Cout×kh×kw]`; the adjoint of
    /// [`Graph::conv2d`] with the same weights.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let g = conv_transpose_geometry(vx.shape(), vw.shape(), stride, pad)?;
        let cin = vx.shape()[0];
        let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
        gemm(
            MatRef::row_major(vw.data(), cin, g.col_rows()).t(),
            MatRef::row_major(vx.data(), cin, g.col_cols()),
            &mut cols,
            0.0,
        );
        let mut out = vec![0.0; g.channels * g.in_h * g.in_w];
        col2im(&cols, &g, &mut out);
        let value = Tensor::new(&[g.channels, g.in_h, g.in_w], out)?;
        let tracked = self.t(x) || self.t(w);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, stride, pad }, tracked))
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients are added into `store`;
    /// gradients of tracked inputs accumulate across calls and are read with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.t(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if node.tracked {
                        match self.leaf_grads.get_mut(&i) {
                            Some(t) => add_into(t.data_mut(), &g),
                            None => {
                                let t = Tensor::new(node.value.shape(), g)?;
                                self.leaf_grads.insert(i, t);
                            }
                        }
                    }
                }
                Op::Param(id) => add_into(store.grad_mut(*id).data_mut(), &g),
                op => self.backward_op(op, &node.value, &g, &mut grads)?,
            }
        }
        Ok(())
    }

    fn backward_op(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        // Runs `f` on the gradient buffer of `v` when `v` is tracked.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64], &Tensor)| {
            let n = &nodes[v.0];
            if n.tracked {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
                f(buf, &n.value);
            }
        };
        let val = |v: Var| &nodes[v.0].value;
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Add(a, b) => {
                acc(*a, &mut |d, _| add_into(d, g));
                acc(*b, &mut |d, _| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d, _| add_into(d, g));
                acc(*b, &mut |d, _| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d, _| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |d, _| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d, _| {
                    for i in 0..d.len() {
                        d[i] += g[i] / vb[i];
                    }
                });
                acc(*b, &mut |d, _| {
                    for i in 0..d.len() {
                        d[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                });
            }
            Op::Min(a, b) | Op::Max(a, b) => {
                let is_min = matches!(op, Op::Min(..));
                let (va, vb) = (val(*a).data(), val(*b).data());
                // ties route to the first operand
                let pick_a = |i: usize| if is_min { va[i] <= vb[i] } else { va[i] >= vb[i] };
                acc(*a, &mut |d, _| {
                    for i in 0..d.len() {
                        if pick_a(i) {
                            d[i] += g[i];
                        }
                    }
                });
                acc(*b, &mut |d, _| {
                    for i in 0..d.len() {
                        if !pick_a(i) {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d, _| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |d, _| add_into(d, g)),
            Op::Relu(a) => {
                let o = out.data();
                acc(*a, &mut |d, _| {
                    for i in 0..d.len() {
                        if o[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                })
            }
            Op::Sigmoid(a) => {
                let o = out.data();
                acc(*a, &mut |d, _| {
                    for i in 0..d.len() {
                        d[i] += g[i] * o[i] * (1.0 - o[i]);
                    }
                })
            }
            Op::Square(a) => acc(*a, &mut |d, x| {
                let x = x.data();
                for i in 0..d.len() {
                    d[i] += 2.0 * x[i] * g[i];
                }
            }),
            Op::Sum(a) => acc(*a, &mut |d, _| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => acc(*a, &mut |d, _| {
                let s = g[0] / d.len().max(1) as f64;
                d.iter_mut().for_each(|d| *d += s)
            }),
            Op::Transpose(a) => acc(*a, &mut |d, x| {
                let (r, c) = (x.shape()[0], x.shape()[1]);
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            }),
            Op::Narrow { src, axis, start } => {
                let len = out.shape()[*axis];
                acc(*src, &mut |d, x| {
                    let (outer, dim, inner) = axis_split(x.shape(), *axis);
                    for o in 0..outer {
                        let base = (o * dim + start) * inner;
                        let gbase = o * len * inner;
                        add_into(&mut d[base..base + len * inner], &g[gbase..gbase + len * inner]);
                    }
                })
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let dim = val(p).shape()[*axis];
                    acc(p, &mut |d, _| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(&mut d[o * dim * inner..(o + 1) * dim * inner], &g[src..src + dim * inner]);
                        }
                    });
                    offset += dim;
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (val(*a), val(*b));
                let ma = MatRef::row_major(va.data(), va.shape()[0], va.shape()[1]).t_if(*ta);
                let mb = MatRef::row_major(vb.data(), vb.shape()[0], vb.shape()[1]).t_if(*tb);
                let mg = MatRef::row_major(g, ma.rows, mb.cols);
                acc(*a, &mut |d, _| {
                    if *ta {
                        // dA[k×m] = op(B)·gᵀ
                        gemm(mb, mg.t(), d, 1.0)
                    } else {
                        gemm(mg, mb.t(), d, 1.0)
                    }
                });
                acc(*b, &mut |d, _| {
                    if *tb {
                        // dB[n×k] = gᵀ·op(A)
                        gemm(mg.t(), ma, d, 1.0)
                    } else {
                        gemm(ma.t(), mg, d, 1.0)
                    }
                });
            }
            Op::BiasFirst(x, b) => {
                acc(*x, &mut |d, _| add_into(d, g));
                let c = val(*b).len();
                let inner = out.len() / c.max(1);
                acc(*b, &mut |d, _| {
                    for (ch, chunk) in g.chunks(inner.max(1)).enumerate().take(c) {
                        d[ch] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::BiasLast(x, b) => {
                acc(*x, &mut |d, _| add_into(d, g));
                let m = val(*b).len();
                acc(*b, &mut |d, _| {
                    for row in g.chunks(m) {
                        add_into(d, row);
                    }
                });
            }
            Op::MulFirst(x, s) => {
                let (vx, vs) = (val(*x).data(), val(*s).data());
                let c = vs.len();
                let inner = vx.len() / c;
                acc(*x, &mut |d, _| {
                    for ch in 0..c {
                        for i in ch * inner..(ch + 1) * inner {
                            d[i] += g[i] * vs[ch];
                        }
                    }
                });
                acc(*s, &mut |d, _| {
                    for ch in 0..c {
                        let r = ch * inner..(ch + 1) * inner;
                        d[ch] += g[r.clone()].iter().zip(&vx[r]).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::MulLast(x, s) => {
                let (vx, vs) = (val(*x).data(), val(*s).data());
                let m = vs.len();
                acc(*x, &mut |d, _| {
                    for (dr, gr) in d.chunks_mut(m).zip(g.chunks(m)) {
                        for j in 0..m {
                            dr[j] += gr[j] * vs[j];
                        }
                    }
                });
                acc(*s, &mut |d, _| {
                    for (xr, gr) in vx.chunks(m).zip(g.chunks(m)) {
                        for j in 0..m {
                            d[j] += gr[j] * xr[j];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let m = *out.shape().last().unwrap_or(&1);
                let y = out.data();
                acc(*a, &mut |d, _| {
                    for ((dr, yr), gr) in d.chunks_mut(m).zip(y.chunks(m)).zip(g.chunks(m)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for i in 0..m {
                            dr[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                })
            }
            Op::LayerNorm { x, inv_std } => {
                let m = *out.shape().last().unwrap_or(&1);
                let y = out.data();
                acc(*x, &mut |d, _| {
                    for (r, ((dr, yr), gr)) in d.chunks_mut(m).zip(y.chunks(m)).zip(g.chunks(m)).enumerate() {
                        let mg = gr.iter().sum::<f64>() / m as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                        for i in 0..m {
                            dr[i] += inv_std[r] * (gr[i] - mg - yr[i] * mgy);
                        }
                    }
                })
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (vx, vw) = (val(*x), val(*w));
                let geo = conv_geometry(vx.shape(), vw.shape(), *stride, *pad)?;
                let o = vw.shape()[0];
                let mg = MatRef::row_major(g, o, geo.col_cols());
                let wm = MatRef::row_major(vw.data(), o, geo.col_rows());
                if nodes[w.0].tracked {
                    let mut cols = vec![0.0; geo.col_rows() * geo.col_cols()];
                    im2col(vx.data(), &geo, &mut cols);
                    acc(*w, &mut |d, _| gemm(mg, MatRef::row_major(&cols, geo.col_rows(), geo.col_cols()).t(), d, 1.0));
                }
                acc(*x, &mut |d, _| {
                    let mut dcols = vec![0.0; geo.col_rows() * geo.col_cols()];
                    gemm(wm.t(), mg, &mut dcols, 0.0);
                    col2im(&dcols, &geo, d);
                });
            }
            Op::ConvTranspose2d { x, w, stride, pad } => {
                let (vx, vw) = (val(*x), val(*w));
                let geo = conv_transpose_geometry(vx.shape(), vw.shape(), *stride, *pad)?;
                let cin = vx.shape()[0];
                let mut gcols = vec![0.0; geo.col_rows() * geo.col_cols()];
                im2col(g, &geo, &mut gcols);
                let mgc = MatRef::row_major(&gcols, geo.col_rows(), geo.col_cols());
                acc(*x, &mut |d, _| gemm(MatRef::row_major(vw.data(), cin, geo.col_rows()), mgc, d, 1.0));
                acc(*w, &mut |d, _| gemm(MatRef::row_major(vx.data(), cin, geo.col_cols()), mgc.t(), d, 1.0));
            }
        }
        Ok(())
    }
}

fn conv_geometry(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<ConvGeometry> {
    if x.len() != 3 || w.len() != 4 || w[1] != x[0] {
        return Err(TensorError::mismatch("conv2d", x, w));
    }
    let out_h = conv2d_output_extent(x[1], w[2], stride, pad)?;
    let out_w = conv2d_output_extent(x[2], w[3], stride, pad)?;
    Ok(ConvGeometry { channels: x[0], in_h: x[1], in_w: x[2], kh: w[2], kw: w[3], stride, pad, out_h, out_w })
}

/// Geometry of the forward convolution whose adjoint the transposed convolution computes:
/// "input" is the transposed-conv output and "output" is its input grid.
fn conv_transpose_geometry(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<ConvGeometry> {
    if x.len() != 3 || w.len() != 4 || w[0] != x[0] {
        return Err(TensorError::mismatch("conv_transpose2d", x, w));
    }
    let big_h = conv_transpose2d_output_extent(x[1], w[2], stride, pad)?;
    let big_w = conv_transpose2d_output_extent(x[2], w[3], stride, pad)?;
    Ok(ConvGeometry {
        channels: w[1],
        in_h: big_h,
        in_w: big_w,
        kh: w[2],
        kw: w[3],
        stride,
        pad,
        out_h: x[1],
        out_w: x[2],
    })
}
