use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::{axis_split, invalid, shape_err, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Tanh(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Dropout { x: Var, mask: Vec<F> },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        n: usize,
    },
    MaxPool { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    MeanAxis { x: Var, axis: usize },
    Sum(Var),
    DotConst { x: Var, weights: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records forward ops in creation order so gradients can be replayed.
///
/// A tape is single-owner: build it, run one forward pass, call
/// [`Tape::backward`], drop it.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Accumulated gradients keyed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![F::zero(); m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let t = Tensor::new(&[m, n], out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = transpose2(self.value(a))?;
        self.push("transpose", t, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    /// Adds a `[D]` vector to every row of a `[..., D]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = *tx.shape().last().unwrap_or(&1);
        if tb.len() != d || tb.rank() != 1 {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", tx.shape(), tb.shape())));
        }
        let data = tx
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(&v, &b)| v + b))
            .collect();
        let t = Tensor::new(tx.shape(), data)?;
        self.push("add_bias", t, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", format!("{:?} * {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push("scale", t, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        self.push("relu", t, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(F::tanh);
        self.push("tanh", t, Op::Tanh(x), &[x])
    }

    /// Softmax along `axis`, stabilised by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(invalid("softmax", format!("axis {axis} for rank {}", tx.rank())));
        }
        let (outer, len, inner) = axis_split(tx.shape(), axis);
        let src = tx.data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        self.push("softmax", t, Op::Softmax { x, axis }, &[x])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap_or(&1);
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(d) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let t = Tensor::new(tx.shape(), out)?;
        self.push("log_softmax", t, Op::LogSoftmax(x), &[x])
    }

    /// Normalises each last-axis vector to zero mean and unit variance,
    /// then applies `gain` and `shift`.
    pub fn layernorm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = *tx.shape().last().unwrap_or(&1);
        if self.value(gain).len() != d || self.value(shift).len() != d {
            return Err(shape_err(
                "layernorm",
                format!("width {d} vs gain {:?}", self.value(gain).shape()),
            ));
        }
        let eps = F::lit(eps);
        let dn = F::from_usize(d).unwrap();
        let (g, s) = (self.value(gain).data(), self.value(shift).data());
        let rows = tx.len() / d;
        let mut xhat = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(d) {
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + s[j]);
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        self.push(
            "layernorm",
            t,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
            &[x, gain, shift],
        )
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = F::lit(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let mask: Vec<F> = (0..n)
            .map(|_| {
                if rng.random::<f64>() >= rate {
                    keep_scale
                } else {
                    F::zero()
                }
            })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(tx.shape(), data)?;
        self.push("dropout", t, Op::Dropout { x, mask }, &[x])
    }

    /// Same-padded stride-1 convolution: `[N,C,H,W]` with `[O,C,kh,kw]` and `[O]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (tx, tk, tb) = (self.value(x), self.value(kernel), self.value(bias));
        let (n, c_in, h, w) = match tx.shape()[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(shape_err("conv2d", format!("input must be [N,C,H,W], got {:?}", tx.shape()))),
        };
        let (c_out, kc, kh, kw) = match tk.shape()[..] {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => return Err(shape_err("conv2d", format!("kernel must be [O,C,kh,kw], got {:?}", tk.shape()))),
        };
        if kc != c_in {
            return Err(shape_err(
                "conv2d",
                format!("input has {c_in} channels, kernel expects {kc}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(invalid("conv2d", format!("same padding needs odd kernel, got {kh}x{kw}")));
        }
        if tb.shape() != [c_out] {
            return Err(shape_err("conv2d", format!("bias {:?} for {c_out} outputs", tb.shape())));
        }
        let geom = ConvGeom {
            c_in,
            c_out,
            h,
            w,
            kh,
            kw,
        };
        let out = kernels::conv2d_with(&geom, tx.data(), tk.data(), tb.data(), n);
        let t = Tensor::new(&[n, c_out, h, w], out)?;
        self.push(
            "conv2d",
            t,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                n,
            },
            &[x, kernel, bias],
        )
    }

    /// Max-pools the last two axes; an axis shorter than `window` passes through.
    pub fn maxpool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        if window == 0 {
            return Err(invalid("maxpool2d", "window must be positive"));
        }
        let tx = self.value(x);
        let r = tx.rank();
        if r < 2 {
            return Err(shape_err("maxpool2d", format!("need rank >= 2, got {:?}", tx.shape())));
        }
        let (h, w) = (tx.shape()[r - 2], tx.shape()[r - 1]);
        let planes = tx.len() / (h * w);
        let (out, argmax, oh, ow) = kernels::maxpool2d_forward(tx.data(), planes, h, w, window);
        let mut shape = tx.shape().to_vec();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let t = Tensor::new(&shape, out)?;
        self.push("maxpool2d", t, Op::MaxPool { x, argmax }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = permute_tensor(self.value(x), perm)?;
        self.push("permute", t, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.value(v).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        self.push("concat", t, Op::Concat { xs: xs.to_vec(), axis }, xs)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() || len == 0 || start + len > tx.shape()[axis] {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, tx.shape()),
            ));
        }
        let (outer, full, inner) = axis_split(tx.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&tx.data()[from..from + len * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        self.push("slice", t, Op::Slice { x, axis, start }, &[x])
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(invalid("mean_axis", format!("axis {axis} for rank {}", tx.rank())));
        }
        let (outer, len, inner) = axis_split(tx.shape(), axis);
        let scale = F::one() / F::from_usize(len).unwrap();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &tx.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s * scale;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(&shape, out)?;
        self.push("mean_axis", t, Op::MeanAxis { x, axis }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push("sum", t, Op::Sum(x), &[x])
    }

    /// `Σ x_i · w_i` against constant weights.
    pub fn dot_const(&mut self, x: Var, weights: &[F]) -> Result<Var> {
        let tx = self.value(x);
        if weights.len() != tx.len() {
            return Err(shape_err(
                "dot_const",
                format!("{} weights for {} values", weights.len(), tx.len()),
            ));
        }
        let v = tx.data().iter().zip(weights).map(|(&a, &b)| a * b).sum();
        let t = Tensor::scalar(v);
        self.push("dot_const", t, Op::DotConst { x, weights: weights.to_vec() }, &[x])
    }

    /// Affine map over the last axis: `x[..., D_in] · W[D_in, D_out] + b[D_out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let in_shape = self.value(x).shape().to_vec();
        let (d_in, d_out) = self.value(weight).dims2()?;
        if in_shape.last() != Some(&d_in) {
            return Err(shape_err(
                "linear",
                format!("input {in_shape:?} against weight [{d_in},{d_out}]"),
            ));
        }
        let rows = self.value(x).len() / d_in;
        let flat = if in_shape.len() == 2 {
            x
        } else {
            self.reshape(x, &[rows, d_in])?
        };
        let mut y = self.matmul(flat, weight)?;
        if let Some(b) = bias {
            y = self.add_bias(y, b)?;
        }
        if in_shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = in_shape;
        *out_shape.last_mut().unwrap() = d_out;
        self.reshape(y, &out_shape)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Nodes are visited in strict reverse creation order, so every
    /// gradient is complete before it is propagated further.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), F::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].as_ref() else {
                continue;
            };
            let contributions = self.local_grads(node, g)?;
            for (v, c) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(c.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of one node with respect to its inputs.
    fn local_grads(&self, node: &Node<F>, g: &Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2()?;
                let (_, n) = tb.dims2()?;
                if want(*a) {
                    let mut da = vec![F::zero(); m * k];
                    kernels::matmul_a_bt_acc(gd, tb.data(), m, n, k, &mut da);
                    out.push((*a, Tensor::new(&[m, k], da)?));
                }
                if want(*b) {
                    let mut db = vec![F::zero(); k * n];
                    kernels::matmul_at_b_acc(ta.data(), gd, m, k, n, &mut db);
                    out.push((*b, Tensor::new(&[k, n], db)?));
                }
            }
            Op::Transpose(a) => out.push((*a, transpose2(g)?)),
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::AddBias(x, b) => {
                out.push((*x, g.clone()));
                if want(*b) {
                    let d = self.value(*b).len();
                    let mut db = vec![F::zero(); d];
                    for row in gd.chunks(d) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((*b, Tensor::new(&[d], db)?));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let zip = |t: &Tensor<F>| -> Vec<F> {
                    gd.iter().zip(t.data()).map(|(&x, &y)| x * y).collect()
                };
                out.push((*a, Tensor::new(ta.shape(), zip(tb))?));
                out.push((*b, Tensor::new(tb.shape(), zip(ta))?));
            }
            Op::Scale(x, c) => out.push((*x, g.map(|v| v * *c))),
            Op::Relu(x) => {
                let tx = self.value(*x);
                let d = gd
                    .iter()
                    .zip(tx.data())
                    .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                    .collect();
                out.push((*x, Tensor::new(tx.shape(), d)?));
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let d = gd
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * (F::one() - yv * yv))
                    .collect();
                out.push((*x, Tensor::new(g.shape(), d)?));
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(g.shape(), *axis);
                let mut d = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: F = (0..len).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                out.push((*x, Tensor::new(g.shape(), d)?));
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let width = *g.shape().last().unwrap_or(&1);
                let mut d = Vec::with_capacity(y.len());
                for (grow, yrow) in gd.chunks(width).zip(y.chunks(width)) {
                    let total: F = grow.iter().copied().sum();
                    d.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| gv - yv.exp() * total));
                }
                out.push((*x, Tensor::new(g.shape(), d)?));
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let gamma = self.value(*gain).data();
                let width = gamma.len();
                let dn = F::from_usize(width).unwrap();
                let mut dx = Vec::with_capacity(gd.len());
                let mut dgain = vec![F::zero(); width];
                let mut dshift = vec![F::zero(); width];
                for (r, (grow, hrow)) in gd.chunks(width).zip(xhat.chunks(width)).enumerate() {
                    let mut sum_dh = F::zero();
                    let mut sum_dh_h = F::zero();
                    for j in 0..width {
                        let dh = grow[j] * gamma[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hrow[j];
                        dgain[j] += grow[j] * hrow[j];
                        dshift[j] += grow[j];
                    }
                    let (mean_dh, mean_dh_h) = (sum_dh / dn, sum_dh_h / dn);
                    for j in 0..width {
                        let dh = grow[j] * gamma[j];
                        dx.push(inv_std[r] * (dh - mean_dh - hrow[j] * mean_dh_h));
                    }
                }
                out.push((*x, Tensor::new(g.shape(), dx)?));
                out.push((*gain, Tensor::new(&[width], dgain)?));
                out.push((*shift, Tensor::new(&[width], dshift)?));
            }
            Op::Dropout { x, mask } => {
                let d = gd.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                out.push((*x, Tensor::new(g.shape(), d)?));
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
                n,
            } => {
                let (tx, tk) = (self.value(*x), self.value(*kernel));
                let hw = geom.pixels();
                let patch = geom.patch();
                let mut cols = vec![F::zero(); patch * hw];
                let mut dk = vec![F::zero(); tk.len()];
                let mut dx = vec![F::zero(); tx.len()];
                let mut dcols = vec![F::zero(); patch * hw];
                let mut db = vec![F::zero(); geom.c_out];
                for b in 0..*n {
                    let img = &tx.data()[b * geom.c_in * hw..(b + 1) * geom.c_in * hw];
                    let gimg = &gd[b * geom.c_out * hw..(b + 1) * geom.c_out * hw];
                    if want(*kernel) {
                        geom.im2col(img, &mut cols);
                        kernels::matmul_a_bt_acc(gimg, &cols, geom.c_out, hw, patch, &mut dk);
                    }
                    if want(*x) {
                        dcols.iter_mut().for_each(|v| *v = F::zero());
                        kernels::matmul_at_b_acc(tk.data(), gimg, geom.c_out, patch, hw, &mut dcols);
                        geom.col2im_acc(&dcols, &mut dx[b * geom.c_in * hw..(b + 1) * geom.c_in * hw]);
                    }
                    for (o, plane) in gimg.chunks(hw).enumerate() {
                        db[o] += plane.iter().copied().sum::<F>();
                    }
                }
                if want(*x) {
                    out.push((*x, Tensor::new(tx.shape(), dx)?));
                }
                if want(*kernel) {
                    out.push((*kernel, Tensor::new(tk.shape(), dk)?));
                }
                out.push((*bias, Tensor::new(&[geom.c_out], db)?));
            }
            Op::MaxPool { x, argmax } => {
                let tx = self.value(*x);
                let mut d = vec![F::zero(); tx.len()];
                for (&src, &gv) in argmax.iter().zip(gd) {
                    d[src] += gv;
                }
                out.push((*x, Tensor::new(tx.shape(), d)?));
            }
            Op::Reshape(x) => {
                out.push((*x, g.clone().reshape(self.value(*x).shape())?));
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                out.push((*x, permute_tensor(g, &inverse)?));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let shape = self.value(v).shape();
                    let len = shape[*axis];
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let from = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[from..from + len * inner]);
                    }
                    out.push((v, Tensor::new(shape, d)?));
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let tx = self.value(*x);
                let (outer, full, inner) = axis_split(tx.shape(), *axis);
                let len = g.shape()[*axis];
                let mut d = vec![F::zero(); tx.len()];
                for o in 0..outer {
                    let to = (o * full + start) * inner;
                    d[to..to + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, Tensor::new(tx.shape(), d)?));
            }
            Op::MeanAxis { x, axis } => {
                let tx = self.value(*x);
                let (outer, len, inner) = axis_split(tx.shape(), *axis);
                let scale = F::one() / F::from_usize(len).unwrap();
                let mut d = Vec::with_capacity(tx.len());
                for o in 0..outer {
                    for _ in 0..len {
                        d.extend(gd[o * inner..(o + 1) * inner].iter().map(|&v| v * scale));
                    }
                }
                out.push((*x, Tensor::new(tx.shape(), d)?));
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(self.value(*x).shape(), gd[0])));
            }
            Op::DotConst { x, weights } => {
                let d = weights.iter().map(|&w| w * gd[0]).collect();
                out.push((*x, Tensor::new(self.value(*x).shape(), d)?));
            }
        }
        Ok(out)
    }
}

fn transpose2<F: Real>(t: &Tensor<F>) -> Result<Tensor<F>> {
    let (r, c) = t.dims2()?;
    let src = t.data();
    let mut out = vec![F::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::new(&[c, r], out)
}

fn permute_tensor<F: Real>(t: &Tensor<F>, perm: &[usize]) -> Result<Tensor<F>> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(invalid("permute", format!("{perm:?} is not a permutation of rank {rank}")));
    }
    let in_shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(t.len());
    let mut idx = vec![0usize; rank];
    let src = t.data();
    for _ in 0..t.len() {
        let flat: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[flat]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}
