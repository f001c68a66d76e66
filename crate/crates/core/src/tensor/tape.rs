use super::{numel, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Neg(Var),
    Pow(Var, T),
    Sin(Var),
    Cos(Var),
    Sum { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    Max { x: Var, axis: usize, argmax: Vec<usize> },
    Reshape(Var),
    Transpose { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Gather { x: Var, indices: Vec<usize> },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
///
/// Nodes are appended in evaluation order, so the node vector is already a
/// topological order and backward is a single reverse sweep.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    strict: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub(crate) const LN_EPS: f64 = 1e-6;

/// Output shape of a broadcasting binary op. Output element `i` reads element
/// `i % numel` of each operand.
fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (na, nb) = (numel(a), numel(b));
    let mismatch = || TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    let shape = if a == b {
        a.to_vec()
    } else if nb == 1 && na >= 1 && a.len() >= b.len() {
        a.to_vec()
    } else if na == 1 && b.len() >= a.len() {
        b.to_vec()
    } else if a.len() > b.len() && a.ends_with(b) {
        a.to_vec()
    } else if b.len() > a.len() && b.ends_with(a) {
        b.to_vec()
    } else {
        return Err(mismatch());
    };
    Ok(shape)
}

fn binary_map<T: Scalar>(
    a: &[T],
    b: &[T],
    n: usize,
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let (pa, pb) = (a.len(), b.len());
    let mut out = vec![T::zero(); n];
    if n == 0 {
        return out;
    }
    if pa == n && pb == n {
        for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
            *o = f(x, y);
        }
    } else if pa == n {
        for (oc, ac) in out.chunks_mut(pb).zip(a.chunks(pb)) {
            for ((o, &x), &y) in oc.iter_mut().zip(ac).zip(b) {
                *o = f(x, y);
            }
        }
    } else if pb == n {
        for (oc, bc) in out.chunks_mut(pa).zip(b.chunks(pa)) {
            for ((o, &x), &y) in oc.iter_mut().zip(a).zip(bc) {
                *o = f(x, y);
            }
        }
    } else {
        for (i, o) in out.iter_mut().enumerate() {
            *o = f(a[i % pa], b[i % pb]);
        }
    }
    out
}

/// Sums `g` down to `period` elements (inverse of leading-dim broadcast).
fn reduce_to<T: Scalar>(g: Vec<T>, period: usize) -> Vec<T> {
    if g.len() == period {
        return g;
    }
    let mut acc = vec![T::zero(); period];
    for chunk in g.chunks(period) {
        for (a, &v) in acc.iter_mut().zip(chunk) {
            *a = *a + v;
        }
    }
    acc
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

fn permute<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n = data.len();
    if nd <= 1 || n == 0 {
        return (data.to_vec(), out_shape);
    }
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let last = out_shape[nd - 1];
    let last_stride = strides[nd - 1];
    loop {
        if last_stride == 1 {
            out.extend_from_slice(&data[off..off + last]);
        } else {
            for j in 0..last {
                out.push(data[off + j * last_stride]);
            }
        }
        // carry into higher dimensions
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return (out, out_shape);
            }
            d -= 1;
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let x3 = x * x * x;
    let inner = c * (x + a * x3);
    let th = inner.tanh();
    let value = half * x * (one + th);
    let dinner = c * (one + T::lit(3.0) * a * x * x);
    let deriv = half * (one + th) + half * x * (one - th * th) * dinner;
    (value, deriv)
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            strict: true,
        }
    }

    /// Strict mode rejects out-of-domain arguments and non-finite outputs.
    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.strict && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast(name, ta.shape(), tb.shape())?;
        let data = binary_map(ta.data(), tb.data(), numel(&shape), f);
        let value = Tensor::new(shape, data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let t = self.value(x);
        let data: Vec<T> = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.push(name, value, op, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.strict && self.value(x).data().iter().any(|&v| v < T::zero()) {
            return Err(TensorError::Domain { op: "log" });
        }
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.strict && self.value(x).data().iter().any(|&v| v < T::zero()) {
            return Err(TensorError::Domain { op: "sqrt" });
        }
        self.unary("sqrt", x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary("neg", x, |v| -v, Op::Neg(x))
    }

    pub fn powf(&mut self, x: Var, p: T) -> Result<Var> {
        if self.strict
            && p.fract() != T::zero()
            && self.value(x).data().iter().any(|&v| v < T::zero())
        {
            return Err(TensorError::Domain { op: "power" });
        }
        self.unary("power", x, |v| v.powf(p), Op::Pow(x, p))
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary("sin", x, |v| v.sin(), Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary("cos", x, |v| v.cos(), Op::Cos(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    /// Batched matrix product.
    ///
    /// `a: [..., m, k]` times either `b: [k, n]` (shared across the batch) or
    /// `b: [..., k, n]` with identical leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let batch = numel(&sa[..sa.len() - 2]);
        let mut out = vec![T::zero(); batch * m * n];
        if sb.len() == 2 {
            T::gemm(
                batch * m,
                k,
                n,
                T::one(),
                ta.data(),
                (k as isize, 1),
                tb.data(),
                (n as isize, 1),
                T::zero(),
                &mut out,
                (n as isize, 1),
            );
        } else {
            if sb[..sb.len() - 2] != sa[..sa.len() - 2] {
                return Err(mismatch());
            }
            for bi in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &ta.data()[bi * m * k..(bi + 1) * m * k],
                    (k as isize, 1),
                    &tb.data()[bi * k * n..(bi + 1) * k * n],
                    (n as isize, 1),
                    T::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    (n as isize, 1),
                );
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let nd = self.shape(x).len();
        if axis >= nd {
            return Err(TensorError::InvalidArgument {
                op,
                msg: format!("axis {axis} out of range for rank {nd}"),
            });
        }
        Ok(())
    }

    /// Sum over one axis, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum", x, axis)?;
        let value = self.reduce_sum(x, axis, T::one());
        self.push("sum", value, Op::Sum { x, axis }, &[x])
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean", x, axis)?;
        let len = self.shape(x)[axis];
        if len == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean",
                msg: "empty axis".into(),
            });
        }
        let value = self.reduce_sum(x, axis, T::one() / T::lit(len as f64));
        self.push("mean", value, Op::Mean { x, axis }, &[x])
    }

    fn reduce_sum(&self, x: Var, axis: usize, scale: T) -> Tensor<T> {
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let src = t.data();
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(row) {
                    *d = *d + s;
                }
            }
            if scale != T::one() {
                for d in dst.iter_mut() {
                    *d = *d * scale;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Tensor { shape, data: out }
    }

    /// Maximum over one axis, removing it. Ties route the gradient to the
    /// first maximal element.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("max", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        if len == 0 {
            return Err(TensorError::InvalidArgument {
                op: "max",
                msg: "empty axis".into(),
            });
        }
        let src = t.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = src[o * len * inner + i];
                let mut bi = 0;
                for l in 1..len {
                    let v = src[(o * len + l) * inner + i];
                    if v > best {
                        best = v;
                        bi = l;
                    }
                }
                out[o * inner + i] = best;
                argmax[o * inner + i] = bi;
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        self.push("max", value, Op::Max { x, axis, argmax }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let nd = t.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                msg: format!("{perm:?} is not a permutation of rank {nd}"),
            });
        }
        let (data, shape) = permute(t.data(), t.shape(), perm);
        let value = Tensor::new(shape, data)?;
        self.push(
            "transpose",
            value,
            Op::Transpose {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", x, axis)?;
        let t = self.value(x);
        let (outer, full, inner) = split_axis(t.shape(), axis);
        if start + len > full {
            return Err(TensorError::InvalidArgument {
                op: "narrow",
                msg: format!("range {start}..{} exceeds axis length {full}", start + len),
            });
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        self.push("narrow", value, Op::Narrow { x, axis, start }, &[x])
    }

    /// Split along `axis` into pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        self.check_axis("split", x, axis)?;
        let full = self.shape(x)[axis];
        if sizes.iter().sum::<usize>() != full {
            return Err(TensorError::InvalidArgument {
                op: "split",
                msg: format!("sizes {sizes:?} do not cover axis length {full}"),
            });
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &s in sizes {
            parts.push(self.narrow(x, axis, start, s)?);
            start += s;
        }
        Ok(parts)
    }

    /// Select rows of `x` (viewed as `[shape[0], rest...]`) by index.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() == 0 {
            return Err(TensorError::InvalidArgument {
                op: "gather",
                msg: "cannot gather from a scalar".into(),
            });
        }
        let rows = t.shape()[0];
        let inner = t.numel() / rows.max(1);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidArgument {
                op: "gather",
                msg: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&t.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let value = Tensor::new(shape, out)?;
        self.push(
            "gather",
            value,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        )
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = *t.shape().last().ok_or(TensorError::InvalidArgument {
            op: "softmax",
            msg: "scalar input".into(),
        })?;
        let mut out = t.data().to_vec();
        if c > 0 {
            for row in out.chunks_mut(c) {
                let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s = s + *v;
                }
                let inv = T::one() / s;
                for v in row.iter_mut() {
                    *v = *v * inv;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.value(x);
        let c = *t.shape().last().unwrap_or(&0);
        if c == 0 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: t.shape().to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let eps = T::lit(LN_EPS);
        let inv_c = T::one() / T::lit(c as f64);
        let rows = t.numel() / c;
        let mut xhat = vec![T::zero(); t.numel()];
        let mut rstd = vec![T::zero(); rows];
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * c..(r + 1) * c];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_c;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lt.shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(data) {
                    *e = *e + d;
                }
            }
            slot @ None => {
                let shape = self.shape(v).to_vec();
                *slot = Some(Tensor { shape, data });
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (pa, pb) = (self.value(*a).numel(), self.value(*b).numel());
                self.accumulate(grads, *a, reduce_to(gd.to_vec(), pa));
                self.accumulate(grads, *b, reduce_to(gd.to_vec(), pb));
            }
            Op::Sub(a, b) => {
                let (pa, pb) = (self.value(*a).numel(), self.value(*b).numel());
                self.accumulate(grads, *a, reduce_to(gd.to_vec(), pa));
                let neg = gd.iter().map(|&v| -v).collect();
                self.accumulate(grads, *b, reduce_to(neg, pb));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let da = binary_map(gd, vb, gd.len(), |x, y| x * y);
                    self.accumulate(grads, *a, reduce_to(da, va.len()));
                }
                if self.requires_grad(*b) {
                    let db = binary_map(gd, va, gd.len(), |x, y| x * y);
                    self.accumulate(grads, *b, reduce_to(db, vb.len()));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let da = binary_map(gd, vb, gd.len(), |x, y| x / y);
                    self.accumulate(grads, *a, reduce_to(da, va.len()));
                }
                if self.requires_grad(*b) {
                    // d(a/b)/db = -out / b
                    let t = binary_map(gd, out, gd.len(), |x, y| -x * y);
                    let db = binary_map(&t, vb, gd.len(), |x, y| x / y);
                    self.accumulate(grads, *b, reduce_to(db, vb.len()));
                }
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, gd, grads),
            Op::Exp(x) => {
                let d = gd.iter().zip(out).map(|(&g, &y)| g * y).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(&g, &v)| g / v).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Sqrt(x) => {
                // subgradient 0 at the origin
                let two = T::lit(2.0);
                let d = gd
                    .iter()
                    .zip(out)
                    .map(|(&g, &y)| if y > T::zero() { g / (two * y) } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Neg(x) => {
                self.accumulate(grads, *x, gd.iter().map(|&v| -v).collect());
            }
            Op::Pow(x, p) => {
                let xv = self.value(*x).data();
                let pm1 = *p - T::one();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| g * *p * v.powf(pm1))
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Sin(x) => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(&g, &v)| g * v.cos()).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Cos(x) => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(&g, &v)| -g * v.sin()).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| g * gelu_parts(v).1)
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = split_axis(shape, *axis);
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    T::one() / T::lit(len as f64)
                } else {
                    T::one()
                };
                let mut d = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let src = &gd[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let dst = &mut d[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (dv, &sv) in dst.iter_mut().zip(src) {
                            *dv = sv * scale;
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Max { x, axis, argmax } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = split_axis(shape, *axis);
                let mut d = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let l = argmax[o * inner + i];
                        d[(o * len + l) * inner + i] = gd[o * inner + i];
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, gd.to_vec());
            }
            Op::Transpose { x, perm } => {
                let (d, _) = permute(gd, g.shape(), &inverse_perm(perm));
                self.accumulate(grads, *x, d);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.requires_grad(x) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        self.accumulate(grads, x, d);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, full, inner) = split_axis(shape, *axis);
                let len = g.shape()[*axis];
                let mut d = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Gather { x, indices } => {
                let t = self.value(*x);
                let rows = t.shape()[0];
                let inner = t.numel() / rows.max(1);
                let mut d = vec![T::zero(); t.numel()];
                for (k, &i) in indices.iter().enumerate() {
                    let dst = &mut d[i * inner..(i + 1) * inner];
                    for (dv, &sv) in dst.iter_mut().zip(&gd[k * inner..(k + 1) * inner]) {
                        *dv = *dv + sv;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Softmax(x) => {
                let c = *g.shape().last().unwrap_or(&1);
                let mut d = vec![T::zero(); gd.len()];
                if c > 0 {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(gd.chunks(c)).zip(out.chunks(c)) {
                        let dot = grow.iter().zip(yrow).fold(T::zero(), |a, (&g, &y)| a + g * y);
                        for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv = yv * (gv - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.shape(*gamma)[0];
                let gm = self.value(*gamma).data();
                let inv_c = T::one() / T::lit(c as f64);
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for (grow, hrow) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] = dg[j] + grow[j] * hrow[j];
                            db[j] = db[j] + grow[j];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                    self.accumulate(grads, *beta, db);
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); gd.len()];
                    let mut dh = vec![T::zero(); c];
                    for (r, (grow, hrow)) in gd.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..c {
                            dh[j] = grow[j] * gm[j];
                            mean_dh = mean_dh + dh[j];
                            mean_dh_h = mean_dh_h + dh[j] * hrow[j];
                        }
                        mean_dh = mean_dh * inv_c;
                        mean_dh_h = mean_dh_h * inv_c;
                        let rs = rstd[r];
                        for j in 0..c {
                            dx[r * c + j] = rs * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, gd: &[T], grads: &mut [Option<Tensor<T>>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let batch = numel(&sa[..sa.len() - 2]);
        let (ki, ni) = (k as isize, n as isize);
        if sb.len() == 2 {
            let rows = batch * m;
            if self.requires_grad(a) {
                let mut da = vec![T::zero(); rows * k];
                T::gemm(rows, n, k, T::one(), gd, (ni, 1), tb.data(), (1, ni), T::zero(), &mut da, (ki, 1));
                self.accumulate(grads, a, da);
            }
            if self.requires_grad(b) {
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, rows, n, T::one(), ta.data(), (1, ki), gd, (ni, 1), T::zero(), &mut db, (ni, 1));
                self.accumulate(grads, b, db);
            }
            return;
        }
        if self.requires_grad(a) {
            let mut da = vec![T::zero(); batch * m * k];
            for bi in 0..batch {
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    &gd[bi * m * n..(bi + 1) * m * n],
                    (ni, 1),
                    &tb.data()[bi * k * n..(bi + 1) * k * n],
                    (1, ni),
                    T::zero(),
                    &mut da[bi * m * k..(bi + 1) * m * k],
                    (ki, 1),
                );
            }
            self.accumulate(grads, a, da);
        }
        if self.requires_grad(b) {
            let mut db = vec![T::zero(); batch * k * n];
            for bi in 0..batch {
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    &ta.data()[bi * m * k..(bi + 1) * m * k],
                    (1, ki),
                    &gd[bi * m * n..(bi + 1) * m * n],
                    (ni, 1),
                    T::zero(),
                    &mut db[bi * k * n..(bi + 1) * k * n],
                    (ni, 1),
                );
            }
            self.accumulate(grads, b, db);
        }
    }
}
