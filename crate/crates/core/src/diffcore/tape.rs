//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] is an arena of value buffers plus an ordered record of executed
//! operations. Forward methods validate shapes, compute the result eagerly,
//! and (when any input needs a gradient) push an adjoint record. [`backward`]
//! replays the record in reverse, accumulating additively into per-node
//! gradient buffers. Gradients survive the backward sweep; the op record is
//! consumed unless [`backward_retain`] is used.
//!
//! [`backward`]: Tape::backward
//! [`backward_retain`]: Tape::backward_retain

use super::pool::vec_with_capacity;
use super::real::Real;
use crate::error::{Error, Result};

/// Handle to a tensor living on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(pub(crate) usize);

struct Node<T> {
    data: Vec<T>,
    shape: Vec<usize>,
    requires_grad: bool,
    /// Set when this node is a grad leaf or transitively consumes one; the
    /// backward sweep only propagates into flagged nodes.
    needs_grad: bool,
    /// True for op outputs, false for leaves/constants.
    produced: bool,
}

enum Op<T> {
    Matmul { a: Tensor, b: Tensor, out: Tensor },
    Add { a: Tensor, b: Tensor, out: Tensor },
    Sub { a: Tensor, b: Tensor, out: Tensor },
    Mul { a: Tensor, b: Tensor, out: Tensor },
    /// out = m*x + c
    Affine { x: Tensor, out: Tensor, m: T },
    Relu { x: Tensor, out: Tensor },
    Exp { x: Tensor, out: Tensor },
    Sigmoid { x: Tensor, out: Tensor },
    Softmax { x: Tensor, out: Tensor, axis: usize },
    Layernorm { x: Tensor, gain: Tensor, bias: Tensor, out: Tensor, mean: Vec<T>, rstd: Vec<T> },
    Concat { parts: Vec<Tensor>, out: Tensor, axis: usize },
    Slice { x: Tensor, out: Tensor, axis: usize, start: usize },
    Sum { x: Tensor, out: Tensor },
    SumAxis { x: Tensor, out: Tensor, axis: usize },
    Reshape { x: Tensor, out: Tensor },
    RepeatRows { x: Tensor, out: Tensor },
    CumsumExclusive { x: Tensor, out: Tensor },
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    ops: Vec<Op<T>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Zeroed buffer via memset (the generic `vec![T::zero(); n]` path writes
/// element-wise; all-zero bytes are +0.0 in IEEE 754 for both precisions).
fn zeros_fast<T: Real>(n: usize) -> Vec<T> {
    let mut v = vec_with_capacity(n);
    unsafe {
        std::ptr::write_bytes(v.as_mut_ptr(), 0u8, n);
        v.set_len(n);
    }
    v
}

/// C = A(m,k) * B(k,n) into a fresh buffer without pre-zeroing: gemm with
/// beta = 0 writes every element before any read.
#[allow(clippy::too_many_arguments)]
fn gemm_fresh<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: *const T,
    rsa: isize,
    csa: isize,
    b: *const T,
    rsb: isize,
    csb: isize,
) -> Vec<T> {
    let mut out: Vec<std::mem::MaybeUninit<T>> =
        unsafe { std::mem::transmute::<Vec<T>, Vec<std::mem::MaybeUninit<T>>>(vec_with_capacity(m * n)) };
    unsafe {
        out.set_len(m * n);
        T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, T::zero(), out.as_mut_ptr() as *mut T, n as isize, 1);
        // every element written; MaybeUninit<T> and T share layout
        std::mem::transmute::<Vec<std::mem::MaybeUninit<T>>, Vec<T>>(out)
    }
}

/// NumPy-style broadcast of two shapes (align trailing axes; extent-1 axes
/// stretch). None when incompatible.
fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ea = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let eb = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if ea == eb {
            out[i] = ea;
        } else if ea == 1 {
            out[i] = eb;
        } else if eb == 1 {
            out[i] = ea;
        } else {
            return None;
        }
    }
    Some(out)
}

/// True when `small` is a row vector relative to `big`: all axes except the
/// last (after left-padding with 1s) have extent 1, and last extents match.
fn is_row_broadcast(small: &[usize], big: &[usize]) -> bool {
    if small.is_empty() || big.is_empty() || small.len() > big.len() {
        return false;
    }
    small.last() == big.last() && small[..small.len() - 1].iter().all(|&e| e == 1)
}

/// True when `small` equals `big` except for a final axis of extent 1
/// (e.g. [R,N,1] against [R,N,3]).
fn is_trailing_one_broadcast(small: &[usize], big: &[usize]) -> bool {
    small.len() == big.len()
        && *small.last().unwrap() == 1
        && small[..small.len() - 1] == big[..big.len() - 1]
}

/// Row-major strides, with 0 on broadcast (extent-1) axes relative to `out`.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        let s = if shape[i] == 1 { 0 } else { acc };
        strides[offset + i] = s;
        acc *= shape[i];
    }
    strides
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), ops: Vec::new() }
    }

    // ── Construction of leaves and constants ────────────────────────────

    fn push_node(&mut self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool, produced: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let needs = requires_grad;
        self.nodes.push(Node { data, shape, requires_grad, needs_grad: needs, produced });
        self.grads.push(None);
        Tensor(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, data: Vec<T>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {:?} implies {} elements, data has {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(self.push_node(data, shape.to_vec(), false, false))
    }

    /// Gradient leaf (requires_grad = true).
    pub fn leaf(&mut self, data: Vec<T>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "leaf",
                format!("shape {:?} implies {} elements, data has {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(self.push_node(data, shape.to_vec(), true, false))
    }

    pub fn scalar(&mut self, v: T) -> Tensor {
        self.push_node(vec![v], vec![1], false, false)
    }

    // ── Accessors ────────────────────────────────────────────────────────

    pub fn data(&self, t: Tensor) -> &[T] {
        &self.nodes[t.0].data
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn numel(&self, t: Tensor) -> usize {
        self.nodes[t.0].data.len()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    pub fn grad(&self, t: Tensor) -> Option<&[T]> {
        self.grads[t.0].as_deref()
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self, t: Tensor) -> T {
        debug_assert_eq!(self.numel(t), 1);
        self.nodes[t.0].data[0]
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }

    /// Number of recorded (not yet consumed) operations.
    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    fn needs(&self, t: Tensor) -> bool {
        self.nodes[t.0].needs_grad
    }

    fn out_node(&mut self, data: Vec<T>, shape: Vec<usize>, needs: bool) -> Tensor {
        self.nodes.push(Node { data, shape, requires_grad: false, needs_grad: needs, produced: true });
        self.grads.push(None);
        Tensor(self.nodes.len() - 1)
    }

    // ── Forward operations ───────────────────────────────────────────────

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {:?} by {:?}", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = gemm_fresh(
            m, k, n,
            self.nodes[a.0].data.as_ptr(), k as isize, 1,
            self.nodes[b.0].data.as_ptr(), n as isize, 1,
        );
        let needs = self.needs(a) || self.needs(b);
        let t = self.out_node(out, vec![m, n], needs);
        if needs {
            self.ops.push(Op::Matmul { a, b, out: t });
        }
        Ok(t)
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: Tensor,
        b: Tensor,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor, Vec<usize>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shapes(&sa, &sb).ok_or_else(|| {
            Error::shape(op_name, format!("cannot broadcast {:?} with {:?}", sa, sb))
        })?;
        let n = numel(&out_shape);
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let mut out: Vec<T>;
        if sa == sb {
            out = da.iter().zip(db.iter()).map(|(&x, &y)| f(x, y)).collect();
        } else if out_shape == sa && !db.is_empty() && n % db.len() == 0 && is_row_broadcast(&sb, &sa) {
            // b is a row vector tiled over a's rows
            let d = db.len();
            out = vec_with_capacity(n);
            for ar in da.chunks_exact(d) {
                out.extend(ar.iter().zip(db.iter()).map(|(&x, &y)| f(x, y)));
            }
        } else if out_shape == sa && is_trailing_one_broadcast(&sb, &sa) {
            // b broadcasts along a's last axis
            let lane = *sa.last().unwrap();
            out = vec_with_capacity(n);
            for (r, ar) in da.chunks_exact(lane).enumerate() {
                let s = db[r];
                out.extend(ar.iter().map(|&x| f(x, s)));
            }
        } else {
            out = zeros_fast(n);
            let stra = broadcast_strides(&sa, &out_shape);
            let strb = broadcast_strides(&sb, &out_shape);
            let rank = out_shape.len();
            let mut idx = vec![0usize; rank];
            let (mut oa, mut ob) = (0usize, 0usize);
            for slot in out.iter_mut() {
                *slot = f(da[oa], db[ob]);
                // odometer increment
                for ax in (0..rank).rev() {
                    idx[ax] += 1;
                    oa += stra[ax];
                    ob += strb[ax];
                    if idx[ax] < out_shape[ax] {
                        break;
                    }
                    idx[ax] = 0;
                    oa -= stra[ax] * out_shape[ax];
                    ob -= strb[ax] * out_shape[ax];
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        let t = self.out_node(out, out_shape.clone(), needs);
        Ok((t, out_shape))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (t, _) = self.binary_elementwise("add", a, b, |x, y| x + y)?;
        if self.needs(t) {
            self.ops.push(Op::Add { a, b, out: t });
        }
        Ok(t)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (t, _) = self.binary_elementwise("sub", a, b, |x, y| x - y)?;
        if self.needs(t) {
            self.ops.push(Op::Sub { a, b, out: t });
        }
        Ok(t)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (t, _) = self.binary_elementwise("mul", a, b, |x, y| x * y)?;
        if self.needs(t) {
            self.ops.push(Op::Mul { a, b, out: t });
        }
        Ok(t)
    }

    /// out = m*x + c, with scalar constants.
    pub fn affine(&mut self, x: Tensor, m: T, c: T) -> Tensor {
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| m * v + c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        let t = self.out_node(data, shape, needs);
        if needs {
            self.ops.push(Op::Affine { x, out: t, m });
        }
        t
    }

    pub fn neg(&mut self, x: Tensor) -> Tensor {
        self.affine(x, -T::one(), T::zero())
    }

    fn unary(&mut self, x: Tensor, f: impl Fn(T) -> T) -> Tensor {
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.out_node(data, shape, needs)
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        let t = self.unary(x, |v| if v > T::zero() { v } else { T::zero() });
        if self.needs(t) {
            self.ops.push(Op::Relu { x, out: t });
        }
        t
    }

    pub fn exp(&mut self, x: Tensor) -> Tensor {
        let t = self.unary(x, |v| v.exp());
        if self.needs(t) {
            self.ops.push(Op::Exp { x, out: t });
        }
        t
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Tensor {
        let t = self.unary(x, |v| {
            // stable in both tails
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        if self.needs(t) {
            self.ops.push(Op::Sigmoid { x, out: t });
        }
        t
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {} out of range for shape {:?}", axis, shape),
            ));
        }
        if shape[axis] == 0 {
            return Err(Error::invalid(
                "softmax",
                format!("empty axis {} in shape {:?}", axis, shape),
            ));
        }
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = &self.nodes[x.0].data;
        let mut out = zeros_fast(src.len());
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..lane {
                    mx = mx.max(src[base + l * inner]);
                }
                let mut sum = T::zero();
                for l in 0..lane {
                    let e = (src[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    sum = sum + e;
                }
                for l in 0..lane {
                    out[base + l * inner] = out[base + l * inner] / sum;
                }
            }
        }
        let needs = self.needs(x);
        let t = self.out_node(out, shape, needs);
        if needs {
            self.ops.push(Op::Softmax { x, out: t, axis });
        }
        Ok(t)
    }

    /// Standardize the last axis then apply elementwise affine gain/bias.
    pub fn layernorm(&mut self, x: Tensor, gain: Tensor, bias: Tensor, eps: T) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layernorm", "rank-0 input".to_string()))?;
        if d < 2 {
            return Err(Error::invalid(
                "layernorm",
                format!("last axis must have extent >= 2, got {:?}", shape),
            ));
        }
        if eps <= T::zero() {
            return Err(Error::invalid("layernorm", "eps must be positive".to_string()));
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layernorm",
                format!(
                    "gain {:?} and bias {:?} must both be [{}] for input {:?}",
                    self.shape(gain),
                    self.shape(bias),
                    d,
                    shape
                ),
            ));
        }
        let rows = numel(&shape) / d;
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = zeros_fast(src.len());
        let mut means = vec![T::zero(); rows];
        let mut rstds = vec![T::zero(); rows];
        let inv_d = T::one() / T::from_usize(d);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_d;
            let mut var = T::zero();
            for &v in row {
                let c = v - mean;
                var = var + c * c;
            }
            var = var * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            let dst = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                dst[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        let t = self.out_node(out, shape, needs);
        if needs {
            self.ops.push(Op::Layernorm { x, gain, bias, out: t, mean: means, rstd: rstds });
        }
        Ok(t)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no tensors given".to_string()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {} out of range for shape {:?}", axis, first),
            ));
        }
        let mut out_shape = first.clone();
        for (i, &p) in parts.iter().enumerate().skip(1) {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(ax, &e)| ax != axis && e != first[ax])
            {
                return Err(Error::shape(
                    "concat",
                    format!("segment {} has shape {:?}, incompatible with {:?} along axis {}", i, s, first, axis),
                ));
            }
            out_shape[axis] += s[axis];
        }
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut out = vec_with_capacity(numel(&out_shape));
        let spans: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * inner).collect();
        for o in 0..outer {
            for (&p, &span) in parts.iter().zip(&spans) {
                let src = &self.nodes[p.0].data;
                out.extend_from_slice(&src[o * span..(o + 1) * span]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let t = self.out_node(out, out_shape, needs);
        if needs {
            self.ops.push(Op::Concat { parts: parts.to_vec(), out: t, axis });
        }
        Ok(t)
    }

    /// Contiguous sub-range `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::shape(
                "slice",
                format!("range {}..{} along axis {} invalid for shape {:?}", start, start + len, axis, shape),
            ));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = &self.nodes[x.0].data;
        let mut out = vec_with_capacity(numel(&out_shape));
        for o in 0..outer {
            let src_base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[src_base..src_base + len * inner]);
        }
        let needs = self.needs(x);
        let t = self.out_node(out, out_shape, needs);
        if needs {
            self.ops.push(Op::Slice { x, out: t, axis, start });
        }
        Ok(t)
    }

    /// Sum of all elements, as a [1] tensor.
    pub fn sum(&mut self, x: Tensor) -> Tensor {
        let mut acc = T::zero();
        for &v in &self.nodes[x.0].data {
            acc = acc + v;
        }
        let needs = self.needs(x);
        let t = self.out_node(vec![acc], vec![1], needs);
        if needs {
            self.ops.push(Op::Sum { x, out: t });
        }
        t
    }

    /// Mean of all elements, as a [1] tensor.
    pub fn mean(&mut self, x: Tensor) -> Tensor {
        let n = self.numel(x);
        let s = self.sum(x);
        self.affine(s, T::one() / T::from_usize(n), T::zero())
    }

    /// Sum along one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "sum_axis",
                format!("axis {} out of range for shape {:?}", axis, shape),
            ));
        }
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let src = &self.nodes[x.0].data;
        let mut out = zeros_fast(outer * inner);
        for o in 0..outer {
            for l in 0..lane {
                let base = (o * lane + l) * inner;
                let dst = o * inner;
                for i in 0..inner {
                    out[dst + i] = out[dst + i] + src[base + i];
                }
            }
        }
        let needs = self.needs(x);
        let t = self.out_node(out, out_shape, needs);
        if needs {
            self.ops.push(Op::SumAxis { x, out: t, axis });
        }
        Ok(t)
    }

    /// Same data, new shape (element count preserved).
    pub fn reshape(&mut self, x: Tensor, new_shape: &[usize]) -> Result<Tensor> {
        if numel(new_shape) != self.numel(x) {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape(x), new_shape),
            ));
        }
        let data = self.nodes[x.0].data.clone();
        let needs = self.needs(x);
        let t = self.out_node(data, new_shape.to_vec(), needs);
        if needs {
            self.ops.push(Op::Reshape { x, out: t });
        }
        Ok(t)
    }

    /// Tile a [1, D] tensor to [reps, D]. Backward sums over rows.
    pub fn repeat_rows(&mut self, x: Tensor, reps: usize) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != 1 {
            return Err(Error::shape(
                "repeat_rows",
                format!("expected [1, D], got {:?}", shape),
            ));
        }
        let d = shape[1];
        let src = &self.nodes[x.0].data;
        let mut out = zeros_fast(reps * d);
        for r in 0..reps {
            out[r * d..(r + 1) * d].copy_from_slice(src);
        }
        let needs = self.needs(x);
        let t = self.out_node(out, vec![reps, d], needs);
        if needs {
            self.ops.push(Op::RepeatRows { x, out: t });
        }
        Ok(t)
    }

    /// Exclusive prefix sums along the last axis of a rank-2 tensor:
    /// out[r,0] = 0, out[r,c] = sum(x[r,..c]).
    pub fn cumsum_exclusive(&mut self, x: Tensor) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(
                "cumsum_exclusive",
                format!("expected rank-2 input, got {:?}", shape),
            ));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let src = &self.nodes[x.0].data;
        let mut out = zeros_fast(rows * cols);
        for r in 0..rows {
            let mut acc = T::zero();
            for c in 0..cols {
                out[r * cols + c] = acc;
                acc = acc + src[r * cols + c];
            }
        }
        let needs = self.needs(x);
        let t = self.out_node(out, shape, needs);
        if needs {
            self.ops.push(Op::CumsumExclusive { x, out: t });
        }
        Ok(t)
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; consumes the op record.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        self.backward_impl(loss, false)
    }

    /// Reverse sweep that keeps the op record, so a second call accumulates
    /// another full gradient on top.
    pub fn backward_retain(&mut self, loss: Tensor) -> Result<()> {
        self.backward_impl(loss, true)
    }

    fn backward_impl(&mut self, loss: Tensor, retain: bool) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.data.len() != 1 {
            return Err(Error::NonScalarLoss { shape: node.shape.clone() });
        }
        if !node.produced && !node.requires_grad {
            return Err(Error::DetachedLoss);
        }
        match &mut self.grads[loss.0] {
            Some(g) => g[0] = g[0] + T::one(),
            slot => *slot = Some(vec![T::one()]),
        }
        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            Self::backward_op(&self.nodes, &mut self.grads, op);
        }
        if retain {
            self.ops = ops;
        }
        Ok(())
    }

    fn backward_op(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], op: &Op<T>) {
        // Upstream gradient of the op output; absent means no gradient
        // flowed. Ops create fresh output nodes, so each produced node has a
        // single producer and its accumulated gradient is final by the time
        // the reverse sweep reaches that producer — taking it is safe and
        // avoids a copy per op.
        macro_rules! upstream {
            ($out:expr) => {
                match grads[$out.0].take() {
                    Some(g) => g,
                    None => return,
                }
            };
        }
        match op {
            Op::Matmul { a, b, out } => {
                let dy = upstream!(out);
                // An all-zero upstream contributes nothing; skip the gemms
                // but still materialize zero grads so consumers see Some.
                let dead = dy.iter().all(|&v| v == T::zero());
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if dead {
                    if nodes[a.0].needs_grad {
                        Self::grad_buf(grads, a.0, m * k);
                    }
                    if nodes[b.0].needs_grad {
                        Self::grad_buf(grads, b.0, k * n);
                    }
                    return;
                }
                if nodes[a.0].needs_grad {
                    // dA += dY * B^T  (B^T via swapped strides)
                    match &mut grads[a.0] {
                        Some(ga) => unsafe {
                            T::gemm(
                                m, n, k,
                                T::one(),
                                dy.as_ptr(), n as isize, 1,
                                nodes[b.0].data.as_ptr(), 1, n as isize,
                                T::one(),
                                ga.as_mut_ptr(), k as isize, 1,
                            );
                        },
                        slot => {
                            *slot = Some(gemm_fresh(
                                m, n, k,
                                dy.as_ptr(), n as isize, 1,
                                nodes[b.0].data.as_ptr(), 1, n as isize,
                            ));
                        }
                    }
                }
                if nodes[b.0].needs_grad {
                    // dB += A^T * dY
                    match &mut grads[b.0] {
                        Some(gb) => unsafe {
                            T::gemm(
                                k, m, n,
                                T::one(),
                                nodes[a.0].data.as_ptr(), 1, k as isize,
                                dy.as_ptr(), n as isize, 1,
                                T::one(),
                                gb.as_mut_ptr(), n as isize, 1,
                            );
                        },
                        slot => {
                            *slot = Some(gemm_fresh(
                                k, m, n,
                                nodes[a.0].data.as_ptr(), 1, k as isize,
                                dy.as_ptr(), n as isize, 1,
                            ));
                        }
                    }
                }
            }
            Op::Add { a, b, out } => {
                let dy = upstream!(out);
                let os = &nodes[out.0].shape;
                if nodes[a.0].needs_grad && nodes[b.0].needs_grad {
                    Self::accumulate_reduced(grads, a.0, dy.clone(), os, &nodes[a.0].shape);
                    Self::accumulate_reduced(grads, b.0, dy, os, &nodes[b.0].shape);
                } else if nodes[a.0].needs_grad {
                    Self::accumulate_reduced(grads, a.0, dy, os, &nodes[a.0].shape);
                } else if nodes[b.0].needs_grad {
                    Self::accumulate_reduced(grads, b.0, dy, os, &nodes[b.0].shape);
                }
            }
            Op::Sub { a, b, out } => {
                let dy = upstream!(out);
                let os = &nodes[out.0].shape;
                if nodes[b.0].needs_grad {
                    let neg: Vec<T> = dy.iter().map(|&v| -v).collect();
                    Self::accumulate_reduced(grads, b.0, neg, os, &nodes[b.0].shape);
                }
                if nodes[a.0].needs_grad {
                    Self::accumulate_reduced(grads, a.0, dy, os, &nodes[a.0].shape);
                }
            }
            Op::Mul { a, b, out } => {
                let dy = upstream!(out);
                let os = nodes[out.0].shape.clone();
                if nodes[a.0].needs_grad {
                    let term = Self::broadcast_mul(&dy, &nodes[b.0].data, &nodes[b.0].shape, &os);
                    Self::accumulate_reduced(grads, a.0, term, &os, &nodes[a.0].shape);
                }
                if nodes[b.0].needs_grad {
                    let term = Self::broadcast_mul(&dy, &nodes[a.0].data, &nodes[a.0].shape, &os);
                    Self::accumulate_reduced(grads, b.0, term, &os, &nodes[b.0].shape);
                }
            }
            Op::Affine { x, out, m } => {
                let mut dy = upstream!(out);
                for v in dy.iter_mut() {
                    *v = *m * *v;
                }
                Self::add_or_set(grads, x.0, dy);
            }
            Op::Relu { x, out } => {
                let mut dy = upstream!(out);
                let src = &nodes[x.0].data;
                for (v, &s) in dy.iter_mut().zip(src.iter()) {
                    if s <= T::zero() {
                        *v = T::zero();
                    }
                }
                Self::add_or_set(grads, x.0, dy);
            }
            Op::Exp { x, out } => {
                let mut dy = upstream!(out);
                let y = &nodes[out.0].data;
                for (v, &yi) in dy.iter_mut().zip(y.iter()) {
                    *v = *v * yi;
                }
                Self::add_or_set(grads, x.0, dy);
            }
            Op::Sigmoid { x, out } => {
                let mut dy = upstream!(out);
                let y = &nodes[out.0].data;
                for (v, &yi) in dy.iter_mut().zip(y.iter()) {
                    *v = *v * yi * (T::one() - yi);
                }
                Self::add_or_set(grads, x.0, dy);
            }
            Op::Softmax { x, out, axis } => {
                let dy = upstream!(out);
                let y = &nodes[out.0].data;
                let shape = &nodes[out.0].shape;
                let lane = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let g = Self::grad_buf(grads, x.0, dy.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * lane * inner + i;
                        let mut dot = T::zero();
                        for l in 0..lane {
                            let ix = base + l * inner;
                            dot = dot + dy[ix] * y[ix];
                        }
                        for l in 0..lane {
                            let ix = base + l * inner;
                            g[ix] = g[ix] + y[ix] * (dy[ix] - dot);
                        }
                    }
                }
            }
            Op::Layernorm { x, gain, bias, out, mean, rstd } => {
                let dy = upstream!(out);
                let d = *nodes[x.0].shape.last().unwrap();
                let rows = dy.len() / d;
                let src = &nodes[x.0].data;
                let g = &nodes[gain.0].data;
                let inv_d = T::one() / T::from_usize(d);
                if nodes[gain.0].needs_grad {
                    let gg = Self::grad_buf(grads, gain.0, d);
                    for r in 0..rows {
                        for j in 0..d {
                            let xhat = (src[r * d + j] - mean[r]) * rstd[r];
                            gg[j] = gg[j] + dy[r * d + j] * xhat;
                        }
                    }
                }
                if nodes[bias.0].needs_grad {
                    let gb = Self::grad_buf(grads, bias.0, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] = gb[j] + dy[r * d + j];
                        }
                    }
                }
                if nodes[x.0].needs_grad {
                    let gx = Self::grad_buf(grads, x.0, dy.len());
                    for r in 0..rows {
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for j in 0..d {
                            let xhat = (src[r * d + j] - mean[r]) * rstd[r];
                            let dxhat = dy[r * d + j] * g[j];
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        }
                        let m1 = sum_dxhat * inv_d;
                        let m2 = sum_dxhat_xhat * inv_d;
                        for j in 0..d {
                            let xhat = (src[r * d + j] - mean[r]) * rstd[r];
                            let dxhat = dy[r * d + j] * g[j];
                            gx[r * d + j] = gx[r * d + j] + rstd[r] * (dxhat - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::Concat { parts, out, axis } => {
                let dy = upstream!(out);
                let oshape = &nodes[out.0].shape;
                let inner: usize = oshape[*axis + 1..].iter().product();
                let outer: usize = oshape[..*axis].iter().product();
                let total_axis = oshape[*axis];
                let mut offset = 0usize;
                for &p in parts {
                    let e = nodes[p.0].shape[*axis];
                    if nodes[p.0].needs_grad {
                        let n = nodes[p.0].data.len();
                        let mut fresh = vec_with_capacity(n);
                        for o in 0..outer {
                            let src_base = (o * total_axis + offset) * inner;
                            fresh.extend_from_slice(&dy[src_base..src_base + e * inner]);
                        }
                        Self::add_or_set(grads, p.0, fresh);
                    }
                    offset += e;
                }
            }
            Op::Slice { x, out, axis, start } => {
                let dy = upstream!(out);
                let xshape = &nodes[x.0].shape;
                let oshape = &nodes[out.0].shape;
                let inner: usize = xshape[*axis + 1..].iter().product();
                let outer: usize = xshape[..*axis].iter().product();
                let len = oshape[*axis];
                let gx = Self::grad_buf(grads, x.0, nodes[x.0].data.len());
                for o in 0..outer {
                    let dst_base = (o * xshape[*axis] + start) * inner;
                    let src_base = o * len * inner;
                    for i in 0..len * inner {
                        gx[dst_base + i] = gx[dst_base + i] + dy[src_base + i];
                    }
                }
            }
            Op::Sum { x, out } => {
                let dy = upstream!(out);
                let v = dy[0];
                let gx = Self::grad_buf(grads, x.0, nodes[x.0].data.len());
                for g in gx.iter_mut() {
                    *g = *g + v;
                }
            }
            Op::SumAxis { x, out, axis } => {
                let dy = upstream!(out);
                let xshape = &nodes[x.0].shape;
                let lane = xshape[*axis];
                let inner: usize = xshape[*axis + 1..].iter().product();
                let outer: usize = xshape[..*axis].iter().product();
                let gx = Self::grad_buf(grads, x.0, nodes[x.0].data.len());
                for o in 0..outer {
                    for l in 0..lane {
                        let base = (o * lane + l) * inner;
                        let src = o * inner;
                        for i in 0..inner {
                            gx[base + i] = gx[base + i] + dy[src + i];
                        }
                    }
                }
            }
            Op::Reshape { x, out } => {
                let dy = upstream!(out);
                Self::add_or_set(grads, x.0, dy);
            }
            Op::RepeatRows { x, out } => {
                let dy = upstream!(out);
                let d = nodes[x.0].shape[1];
                let reps = nodes[out.0].shape[0];
                let gx = Self::grad_buf(grads, x.0, d);
                for r in 0..reps {
                    for j in 0..d {
                        gx[j] = gx[j] + dy[r * d + j];
                    }
                }
            }
            Op::CumsumExclusive { x, out } => {
                let dy = upstream!(out);
                let (rows, cols) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let gx = Self::grad_buf(grads, x.0, rows * cols);
                // dx[r,c] = sum of dy[r, c+1..]
                for r in 0..rows {
                    let mut acc = T::zero();
                    for c in (0..cols).rev() {
                        gx[r * cols + c] = gx[r * cols + c] + acc;
                        acc = acc + dy[r * cols + c];
                    }
                }
            }
        }
    }

    fn grad_buf(grads: &mut [Option<Vec<T>>], idx: usize, n: usize) -> &mut Vec<T> {
        let slot = &mut grads[idx];
        if slot.is_none() {
            *slot = Some(zeros_fast(n));
        }
        slot.as_mut().unwrap()
    }

    /// Accumulate a fully-formed contribution, taking ownership when the
    /// slot is still empty (the common single-consumer case).
    fn add_or_set(grads: &mut [Option<Vec<T>>], idx: usize, fresh: Vec<T>) {
        match &mut grads[idx] {
            Some(g) => {
                for (gi, fi) in g.iter_mut().zip(fresh.iter()) {
                    *gi = *gi + *fi;
                }
            }
            slot => *slot = Some(fresh),
        }
    }

    /// dy (shaped `out_shape`) times `other` broadcast to `out_shape`.
    fn broadcast_mul(dy: &[T], other: &[T], other_shape: &[usize], out_shape: &[usize]) -> Vec<T> {
        if numel(other_shape) == dy.len() {
            return dy.iter().zip(other.iter()).map(|(&a, &b)| a * b).collect();
        }
        if is_row_broadcast(other_shape, out_shape) && !other.is_empty() && dy.len() % other.len() == 0 {
            let d = other.len();
            let mut out = zeros_fast(dy.len());
            for (r, chunk) in out.chunks_exact_mut(d).enumerate() {
                let dr = &dy[r * d..(r + 1) * d];
                for j in 0..d {
                    chunk[j] = dr[j] * other[j];
                }
            }
            return out;
        }
        if is_trailing_one_broadcast(other_shape, out_shape) {
            let lane = *out_shape.last().unwrap();
            let mut out = zeros_fast(dy.len());
            for (r, chunk) in out.chunks_exact_mut(lane).enumerate() {
                let s = other[r];
                let dr = &dy[r * lane..(r + 1) * lane];
                for j in 0..lane {
                    chunk[j] = dr[j] * s;
                }
            }
            return out;
        }
        let strides = broadcast_strides(other_shape, out_shape);
        let rank = out_shape.len();
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        let mut out = zeros_fast(dy.len());
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = dy[i] * other[off];
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
                off -= strides[ax] * out_shape[ax];
            }
        }
        out
    }

    /// Accumulate `full` (shaped `full_shape`) into the gradient of node
    /// `idx` whose shape is `target_shape`, summing over broadcast axes.
    /// Takes ownership so the unbroadcast case can move the buffer in.
    fn accumulate_reduced(
        grads: &mut [Option<Vec<T>>],
        idx: usize,
        full: Vec<T>,
        full_shape: &[usize],
        target_shape: &[usize],
    ) {
        let tn = numel(target_shape);
        if tn == full.len() {
            Self::add_or_set(grads, idx, full);
            return;
        }
        let g = Self::grad_buf(grads, idx, tn);
        if is_row_broadcast(target_shape, full_shape) && tn > 0 && full.len() % tn == 0 {
            for chunk in full.chunks_exact(tn) {
                for j in 0..tn {
                    g[j] = g[j] + chunk[j];
                }
            }
            return;
        }
        if is_trailing_one_broadcast(target_shape, full_shape) {
            let lane = *full_shape.last().unwrap();
            for (r, chunk) in full.chunks_exact(lane).enumerate() {
                let mut acc = T::zero();
                for &v in chunk {
                    acc = acc + v;
                }
                g[r] = g[r] + acc;
            }
            return;
        }
        let strides = broadcast_strides(target_shape, full_shape);
        let rank = full_shape.len();
        let mut idxs = vec![0usize; rank];
        let mut off = 0usize;
        for &v in &full {
            g[off] = g[off] + v;
            for ax in (0..rank).rev() {
                idxs[ax] += 1;
                off += strides[ax];
                if idxs[ax] < full_shape[ax] {
                    break;
                }
                idxs[ax] = 0;
                off -= strides[ax] * full_shape[ax];
            }
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Drop for Tape<T> {
    fn drop(&mut self) {
        for node in self.nodes.drain(..) {
            T::pool_put(node.data);
        }
        for slot in self.grads.drain(..) {
            if let Some(g) = slot {
                T::pool_put(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::check::{gradient_check, CheckInput};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::<f64>::new();
        let i2 = t.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let m = t.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let out = t.matmul(i2, m).unwrap();
        assert_eq!(t.data(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector() {
        let mut t = Tape::<f64>::new();
        let p = t.constant(vec![1.0, 0.0, 0.0, 0.0], &[2, 2]).unwrap();
        let m = t.constant(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
        let out = t.matmul(p, m).unwrap();
        assert_eq!(t.data(out), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(vec![0.0; 6], &[2, 3]).unwrap();
        let b = t.constant(vec![0.0; 8], &[2, 4]).unwrap();
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 4]"), "{err}");
    }

    #[test]
    fn matmul_grad_matches_fd_and_closed_form() {
        // loss = sum(a.b): d(loss)/da = row-broadcast of column sums of b
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let b_cl = b.clone();
        let err = gradient_check(
            |t, leaves| {
                let bc = t.constant(b_cl.clone(), &[4, 2])?;
                let prod = t.matmul(leaves[0], bc)?;
                Ok(t.sum(prod))
            },
            &[CheckInput::new(a.clone(), &[3, 4])],
            1e-5,
            usize::MAX,
            0,
        )
        .unwrap();
        assert!(err < 1e-9, "fd error {err}");

        // closed form
        let mut t = Tape::<f64>::new();
        let al = t.leaf(a, &[3, 4]).unwrap();
        let bl = t.constant(b.clone(), &[4, 2]).unwrap();
        let prod = t.matmul(al, bl).unwrap();
        let loss = t.sum(prod);
        t.backward(loss).unwrap();
        let ga = t.grad(al).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let colsum: f64 = b[2 * c] + b[2 * c + 1];
                assert!((ga[r * 4 + c] - colsum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relu_sigmoid_softmax_trivial() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![-1.0, 0.0, 2.0], &[3]).unwrap();
        let r = t.relu(x);
        assert_eq!(t.data(r), &[0.0, 0.0, 2.0]);

        let z = t.constant(vec![0.0], &[1]).unwrap();
        let s = t.sigmoid(z);
        assert_eq!(t.data(s), &[0.5]);

        let one = t.constant(vec![3.7], &[1, 1]).unwrap();
        let sm = t.softmax(one, 1).unwrap();
        assert_eq!(t.data(sm), &[1.0]);
    }

    #[test]
    fn softmax_empty_axis_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![], &[2, 0]).unwrap();
        assert!(t.softmax(x, 1).is_err());
    }

    #[test]
    fn layernorm_examples() {
        let mut t = Tape::<f64>::new();
        let gain = t.constant(vec![1.0; 4], &[4]).unwrap();
        let bias = t.constant(vec![0.0; 4], &[4]).unwrap();

        // constant row: zero variance, eps guards
        let x = t.constant(vec![1.0; 4], &[1, 4]).unwrap();
        let y = t.layernorm(x, gain, bias, 1e-5).unwrap();
        assert!(t.data(y).iter().all(|&v| v == 0.0));

        // already standardized, eps -> 0
        let g2 = t.constant(vec![1.0; 2], &[2]).unwrap();
        let b2 = t.constant(vec![0.0; 2], &[2]).unwrap();
        let x2 = t.constant(vec![-1.0, 1.0], &[1, 2]).unwrap();
        let y2 = t.layernorm(x2, g2, b2, 1e-12).unwrap();
        assert!(close(t.data(y2), &[-1.0, 1.0], 1e-6));

        // random R^8: standardized statistics
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xr: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g8 = t.constant(vec![1.0; 8], &[8]).unwrap();
        let b8 = t.constant(vec![0.0; 8], &[8]).unwrap();
        let x8 = t.constant(xr, &[1, 8]).unwrap();
        let y8 = t.layernorm(x8, g8, b8, 1e-5).unwrap();
        let out = t.data(y8);
        let mean: f64 = out.iter().sum::<f64>() / 8.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layernorm_degenerate_width_rejected() {
        let mut t = Tape::<f64>::new();
        let g = t.constant(vec![1.0], &[1]).unwrap();
        let b = t.constant(vec![0.0], &[1]).unwrap();
        let x = t.constant(vec![5.0], &[1, 1]).unwrap();
        assert!(t.layernorm(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn backward_sum_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![4.0, 5.0, 6.0], &[3]).unwrap();
        let loss = t.sum(x);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_errors() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let y = t.mul(x, x).unwrap();
        assert!(matches!(t.backward(y), Err(crate::Error::NonScalarLoss { .. })));

        let c = t.constant(vec![3.0], &[1]).unwrap();
        assert!(matches!(t.backward(c), Err(crate::Error::DetachedLoss)));
    }

    #[test]
    fn grad_accumulates_across_retained_backwards() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward_retain(loss).unwrap();
        let first = t.grad(x).unwrap().to_vec();
        t.backward_retain(loss).unwrap();
        let second = t.grad(x).unwrap().to_vec();
        let doubled: Vec<f64> = first.iter().map(|v| 2.0 * v).collect();
        assert_eq!(second, doubled);
    }

    #[test]
    fn backward_consumes_ops_by_default() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![1.0], &[1]).unwrap();
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.op_count(), 1);
        t.backward(y).unwrap();
        assert_eq!(t.op_count(), 0);
    }

    #[test]
    fn concat_backward_splits_exactly() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = t.leaf(vec![3.0, 4.0, 5.0], &[1, 3]).unwrap();
        let cat = t.concat(&[a, b], 1).unwrap();
        let w = t.constant(vec![10.0, 20.0, 30.0, 40.0, 50.0], &[1, 5]).unwrap();
        let prod = t.mul(cat, w).unwrap();
        let loss = t.sum(prod);
        t.backward(loss).unwrap();
        let mut joined = t.grad(a).unwrap().to_vec();
        joined.extend_from_slice(t.grad(b).unwrap());
        assert_eq!(joined, vec![10.0, 20.0, 30.0, 40.0, 50.0]);
    }

    #[test]
    fn slice_concat_roundtrip_grad() {
        let err = gradient_check(
            |t, l| {
                let left = t.slice(l[0], 1, 0, 2)?;
                let right = t.slice(l[0], 1, 2, 3)?;
                let swapped = t.concat(&[right, left], 1)?;
                let sq = t.mul(swapped, swapped)?;
                Ok(t.sum(sq))
            },
            &[CheckInput::new(vec![0.3, -0.7, 1.2, 0.8, -0.1, 0.5, 0.9, -1.3, 0.2, 0.4], &[2, 5])],
            1e-5,
            usize::MAX,
            0,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn broadcast_add_mul_grads() {
        // [2,3] + [3] bias and [2,3] * [2,1] row scale
        let err = gradient_check(
            |t, l| {
                let s = t.add(l[0], l[1])?;
                let m = t.mul(s, l[2])?;
                let sq = t.mul(m, m)?;
                Ok(t.sum(sq))
            },
            &[
                CheckInput::new(vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6], &[2, 3]),
                CheckInput::new(vec![0.7, -0.8, 0.9], &[3]),
                CheckInput::new(vec![1.1, -1.2], &[2, 1]),
            ],
            1e-5,
            usize::MAX,
            0,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn elementwise_chain_grads() {
        let err = gradient_check(
            |t, l| {
                let e = t.exp(l[0]);
                let s = t.sigmoid(e);
                let sm = t.softmax(s, 1)?;
                let sq = t.mul(sm, sm)?;
                Ok(t.sum(sq))
            },
            &[CheckInput::new(vec![0.2, -0.4, 0.6, 0.1, -0.9, 0.5], &[2, 3])],
            1e-5,
            usize::MAX,
            0,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn cumsum_exclusive_forward_and_grad() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![1.0, 2.0, 3.0, 4.0], &[1, 4]).unwrap();
        let y = t.cumsum_exclusive(x).unwrap();
        assert_eq!(t.data(y), &[0.0, 1.0, 3.0, 6.0]);

        let err = gradient_check(
            |t, l| {
                let c = t.cumsum_exclusive(l[0])?;
                let sq = t.mul(c, c)?;
                Ok(t.sum(sq))
            },
            &[CheckInput::new(vec![0.5, -1.0, 2.0, 0.25, 0.75, -0.5], &[2, 3])],
            1e-5,
            usize::MAX,
            0,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sum_axis_and_repeat_rows_grads() {
        let err = gradient_check(
            |t, l| {
                let rep = t.repeat_rows(l[0], 3)?;
                let prod = t.mul(rep, rep)?;
                let per_col = t.sum_axis(prod, 0)?;
                let sq = t.mul(per_col, per_col)?;
                Ok(t.sum(sq))
            },
            &[CheckInput::new(vec![0.4, -0.3, 0.8, 1.5], &[1, 4])],
            1e-5,
            usize::MAX,
            0,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn layernorm_composition_grad() {
        let err = gradient_check(
            |t, l| {
                let y = t.layernorm(l[0], l[1], l[2], 1e-5)?;
                let z = t.layernorm(y, l[1], l[2], 1e-5)?;
                let sq = t.mul(z, z)?;
                Ok(t.sum(sq))
            },
            &[
                CheckInput::new(vec![0.3, -1.1, 0.7, 2.0, 0.2, -0.6, 1.4, -0.8], &[2, 4]),
                CheckInput::new(vec![1.2, 0.9, 1.1, 0.8], &[4]),
                CheckInput::new(vec![0.1, -0.2, 0.0, 0.3], &[4]),
            ],
            1e-5,
            usize::MAX,
            0,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn relu_grad_away_from_kink() {
        // f = sum(relu(W x)); inputs bounded away from 0 by construction
        let err = gradient_check(
            |t, l| {
                let prod = t.matmul(l[0], l[1])?;
                let r = t.relu(prod);
                Ok(t.sum(r))
            },
            &[
                CheckInput::new(vec![0.8, -0.6, 0.4, 0.9, -0.7, 0.5], &[2, 3]),
                CheckInput::new(vec![0.3, -0.9, 0.6, 0.2, -0.4, 0.7], &[3, 2]),
            ],
            1e-5,
            usize::MAX,
            1,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_zero_grad() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let c = t.constant(vec![5.0], &[1]).unwrap();
        let z = t.affine(c, 1.0, 0.0);
        // x never participates
        let _ = x;
        t.backward(z).unwrap();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn deterministic_replay_bit_identical() {
        let run = || -> Vec<u64> {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut t = Tape::<f64>::new();
            let a: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ta = t.constant(a, &[4, 5]).unwrap();
            let tb = t.constant(b, &[5, 4]).unwrap();
            let m = t.matmul(ta, tb).unwrap();
            let s = t.sigmoid(m);
            let sm = t.softmax(s, 1).unwrap();
            t.data(sm).iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn relu_subgradient_zero_at_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![0.0], &[1]).unwrap();
        let r = t.relu(x);
        t.backward(r).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0]);
    }
}
