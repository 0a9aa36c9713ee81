//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value and, when any
//! input needs a gradient, the information its vector-Jacobian product
//! requires. [`Tape::backward`] walks the nodes in reverse once, hands out
//! leaf gradients and clears the tape.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use super::{kernels, Element, Tensor};
use crate::error::{Error, Result};
use crate::ssm::{self, Discretization};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.tape.shape_of(*self))
    }
}

/// How a binary elementwise operand maps onto the output index space.
#[derive(Clone, Debug)]
enum Bcast {
    Same,
    /// Operand repeats every `len` output elements (trailing-suffix broadcast).
    Cycle(usize),
    /// Explicit output-index → operand-index map.
    Map(Vec<usize>),
}

impl Bcast {
    fn plan(out: &[usize], operand: &[usize]) -> Bcast {
        if out == operand {
            return Bcast::Same;
        }
        let pad = out.len() - operand.len();
        let mut padded = vec![1; pad];
        padded.extend_from_slice(operand);
        let first_real = padded.iter().position(|&e| e != 1).unwrap_or(padded.len());
        if padded[first_real..] == out[first_real..] {
            return Bcast::Cycle(padded[first_real..].iter().product());
        }
        // General map via strides with zero stride on broadcast axes.
        let mut strides = vec![0usize; out.len()];
        let mut s = 1;
        for ax in (0..out.len()).rev() {
            strides[ax] = if padded[ax] == 1 { 0 } else { s };
            s *= padded[ax];
        }
        let n: usize = out.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; out.len()];
        let mut off = 0usize;
        for _ in 0..n {
            map.push(off);
            for ax in (0..out.len()).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < out[ax] {
                    break;
                }
                off -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Bcast::Map(map)
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cycle(len) => i % len,
            Bcast::Map(m) => m[i],
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

enum Op<T> {
    Leaf,
    Constant,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Add { a: usize, b: usize, ma: Bcast, mb: Bcast },
    Mul { a: usize, b: usize, ma: Bcast, mb: Bcast },
    Neg { a: usize },
    Scale { a: usize, c: T },
    Exp { a: usize },
    Log { a: usize },
    Silu { a: usize },
    Softplus { a: usize },
    Softmax { a: usize, d: usize },
    LayerNorm { a: usize, d: usize, inv: Vec<T> },
    RmsNorm { a: usize, d: usize, inv: Vec<T> },
    Conv1d { x: usize, w: usize, bias: Option<usize>, batch: usize, time: usize, channels: usize, k: usize },
    Embedding { table: usize, indices: Vec<usize>, d: usize },
    Concat { inputs: Vec<usize>, outer: usize, chunks: Vec<usize> },
    Slice { a: usize, outer: usize, in_chunk: usize, offset: usize, out_chunk: usize },
    Reshape { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    Scan { inputs: ssm::ScanInputs, dims: ssm::ScanDims, mode: Discretization, trace: ssm::ScanTrace<T> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<T>, v: usize },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b, .. } | Op::Mul { a, b, .. } => vec![*a, *b],
            Op::Transpose { a, .. }
            | Op::Neg { a }
            | Op::Scale { a, .. }
            | Op::Exp { a }
            | Op::Log { a }
            | Op::Silu { a }
            | Op::Softplus { a }
            | Op::Softmax { a, .. }
            | Op::LayerNorm { a, .. }
            | Op::RmsNorm { a, .. }
            | Op::Slice { a, .. }
            | Op::Reshape { a }
            | Op::Sum { a }
            | Op::Mean { a } => vec![*a],
            Op::Conv1d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias.iter().copied());
                v
            }
            Op::Embedding { table, .. } => vec![*table],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Scan { inputs, .. } => inputs.ids().to_vec(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Records primitive applications for one backward pass.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when the leaf did not influence the loss.
    pub fn wrt(&self, v: Var<'_, T>) -> Result<Tensor<T>> {
        let shape = self
            .shapes
            .get(v.id)
            .ok_or_else(|| Error::Autodiff(format!("no node {}", v.id)))?
            .clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()),
            None => Ok(Tensor::zeros(shape)),
        }
    }

    /// Adds this leaf's gradient into `t`'s gradient slot.
    pub fn accumulate_into(&self, v: Var<'_, T>, t: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![T::zero(); t.len()]),
        }
    }
}

fn grad_slot<'g, T: Element>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize) -> Option<&'g mut Vec<T>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), consumed: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed.get() {
            return Err(Error::Autodiff("tape already consumed by backward; record a new one".into()));
        }
        Ok(())
    }

    fn push(&self, op_name: &'static str, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Result<Var<'_, T>> {
        self.check_live()?;
        if !kernels::all_finite(&value) {
            return Err(Error::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.inputs().iter().any(|&i| nodes[i].needs_grad);
        let op = if needs_grad { op } else { Op::Constant };
        nodes.push(Node { shape, value: Arc::new(value), needs_grad, op });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    fn leaf_node(&self, t: &Tensor<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared(),
            needs_grad,
            op: if needs_grad { Op::Leaf } else { Op::Constant },
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Registers `t` as a leaf; it receives a gradient iff `t.requires_grad()`.
    /// The buffer is shared, not copied.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.leaf_node(t, t.requires_grad())
    }

    /// Leaf that always receives a gradient.
    pub fn var(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.leaf_node(t, true)
    }

    pub fn constant(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.leaf_node(t, false)
    }

    // Consumed tapes are empty; callers then fail in `push`.
    fn shape_of(&self, v: Var<'_, T>) -> Vec<usize> {
        self.nodes.borrow().get(v.id).map(|n| n.shape.clone()).unwrap_or_default()
    }

    fn value_of(&self, v: Var<'_, T>) -> Arc<Vec<T>> {
        self.nodes.borrow().get(v.id).map(|n| Arc::clone(&n.value)).unwrap_or_default()
    }

    // ---- primitives -------------------------------------------------

    /// `[.., k] × [k, n] → [.., n]`; leading axes of the left operand are rows.
    pub fn matmul<'t>(&'t self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} × {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = sa.iter().product::<usize>() / k;
        let out = kernels::matmul(&self.value_of(a), &self.value_of(b), m, k, n);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        self.push("matmul", shape, out, Op::MatMul { a: a.id, b: b.id, m, k, n })
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = self.shape_of(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{s:?} is not rank 2")));
        }
        let (rows, cols) = (s[0], s[1]);
        let x = self.value_of(a);
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        self.push("transpose", vec![cols, rows], out, Op::Transpose { a: a.id, rows, cols })
    }

    fn binary<'t>(
        &'t self,
        name: &'static str,
        a: Var<'t, T>,
        b: Var<'t, T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<usize>, Vec<T>, Bcast, Bcast)> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        let out_shape =
            broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(name, format!("{sa:?} vs {sb:?}")))?;
        let (ma, mb) = (Bcast::plan(&out_shape, &sa), Bcast::plan(&out_shape, &sb));
        let (xa, xb) = (self.value_of(a), self.value_of(b));
        let n: usize = out_shape.iter().product();
        let out = match (&ma, &mb) {
            (Bcast::Same, Bcast::Same) => xa.iter().zip(xb.iter()).map(|(&p, &q)| f(p, q)).collect(),
            _ => (0..n).map(|i| f(xa[ma.index(i)], xb[mb.index(i)])).collect(),
        };
        Ok((out_shape, out, ma, mb))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add<'t>(&'t self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let (shape, out, ma, mb) = self.binary("add", a, b, |p, q| p + q)?;
        self.push("add", shape, out, Op::Add { a: a.id, b: b.id, ma, mb })
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul<'t>(&'t self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let (shape, out, ma, mb) = self.binary("mul", a, b, |p, q| p * q)?;
        self.push("mul", shape, out, Op::Mul { a: a.id, b: b.id, ma, mb })
    }

    fn unary<'t>(&'t self, name: &'static str, a: Var<'t, T>, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        let out = self.value_of(a).iter().map(|&v| f(v)).collect();
        self.push(name, self.shape_of(a), out, op)
    }

    pub fn neg<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        self.unary("neg", a, |v| -v, Op::Neg { a: a.id })
    }

    pub fn scale<'t>(&'t self, a: Var<'t, T>, c: T) -> Result<Var<'t, T>> {
        self.unary("scale", a, |v| v * c, Op::Scale { a: a.id, c })
    }

    pub fn exp<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        self.unary("exp", a, |v| v.exp(), Op::Exp { a: a.id })
    }

    pub fn log<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        self.unary("log", a, |v| v.ln(), Op::Log { a: a.id })
    }

    pub fn silu<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        self.unary("silu", a, kernels::silu, Op::Silu { a: a.id })
    }

    /// Swish with unit slope; identical to [`Tape::silu`].
    pub fn swish<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        self.silu(a)
    }

    pub fn softplus<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        self.unary("softplus", a, kernels::softplus, Op::Softplus { a: a.id })
    }

    fn last_axis<'t>(&'t self, name: &'static str, a: Var<'t, T>) -> Result<usize> {
        self.shape_of(a).last().copied().ok_or_else(|| Error::shape(name, "rank 0"))
    }

    pub fn softmax<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        let d = self.last_axis("softmax", a)?;
        let x = self.value_of(a);
        let mut out = vec![T::zero(); x.len()];
        kernels::softmax_rows(&x, d, &mut out);
        self.push("softmax", self.shape_of(a), out, Op::Softmax { a: a.id, d })
    }

    /// Normalizes the last axis to zero mean / unit variance (eps 1e-5), no affine.
    pub fn layer_norm<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        let d = self.last_axis("layer_norm", a)?;
        let x = self.value_of(a);
        let mut out = vec![T::zero(); x.len()];
        let inv = kernels::layer_norm_rows(&x, d, &mut out);
        self.push("layer_norm", self.shape_of(a), out, Op::LayerNorm { a: a.id, d, inv })
    }

    /// Scales the last axis to unit root-mean-square (eps 1e-5), no affine.
    pub fn rms_norm<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        let d = self.last_axis("rms_norm", a)?;
        let x = self.value_of(a);
        let mut out = vec![T::zero(); x.len()];
        let inv = kernels::rms_norm_rows(&x, d, &mut out);
        self.push("rms_norm", self.shape_of(a), out, Op::RmsNorm { a: a.id, d, inv })
    }

    /// Causal depthwise convolution of `x: [batch?, time, channels]` with
    /// `w: [channels, k]` and optional `bias: [channels]`.
    pub fn conv1d_causal<'t>(&'t self, x: Var<'t, T>, w: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let sx = self.shape_of(x);
        let sw = self.shape_of(w);
        let (batch, time, channels) = match sx.as_slice() {
            [t, c] => (1, *t, *c),
            [b, t, c] => (*b, *t, *c),
            _ => return Err(Error::shape("conv1d_causal", format!("input {sx:?}"))),
        };
        if sw.len() != 2 || sw[0] != channels {
            return Err(Error::shape("conv1d_causal", format!("input {sx:?} kernel {sw:?}")));
        }
        if let Some(b) = bias {
            if self.shape_of(b) != [channels] {
                return Err(Error::shape("conv1d_causal", format!("bias {:?}", self.shape_of(b))));
            }
        }
        let k = sw[1];
        let bias_v = bias.map(|b| self.value_of(b));
        let out = kernels::conv1d_causal(
            &self.value_of(x),
            batch,
            time,
            channels,
            &self.value_of(w),
            k,
            bias_v.as_deref().map(|v| v.as_slice()),
        );
        self.push(
            "conv1d_causal",
            sx,
            out,
            Op::Conv1d { x: x.id, w: w.id, bias: bias.map(|b| b.id), batch, time, channels, k },
        )
    }

    /// Gathers rows of `table: [V, d]`; output `[indices.len(), d]`.
    pub fn embedding<'t>(&'t self, table: Var<'t, T>, indices: &[usize]) -> Result<Var<'t, T>> {
        let s = self.shape_of(table);
        if s.len() != 2 || indices.is_empty() {
            return Err(Error::shape("embedding", format!("table {s:?}, {} indices", indices.len())));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("embedding index {bad} out of range for {v} rows")));
        }
        let t = self.value_of(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        self.push(
            "embedding",
            vec![indices.len(), d],
            out,
            Op::Embedding { table: table.id, indices: indices.to_vec(), d },
        )
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let s0 = self.shape_of(*first);
        if axis >= s0.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {s0:?}")));
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut shape = s0.clone();
        shape[axis] = 0;
        let mut chunks = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape_of(*p);
            if s.len() != s0.len() || s[..axis] != s0[..axis] || s[axis + 1..] != s0[axis + 1..] {
                return Err(Error::shape("concat", format!("{s0:?} vs {s:?} on axis {axis}")));
            }
            shape[axis] += s[axis];
            chunks.push(s[axis] * inner);
        }
        let values: Vec<_> = parts.iter().map(|p| self.value_of(*p)).collect();
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for (v, &c) in values.iter().zip(&chunks) {
                out.extend_from_slice(&v[o * c..(o + 1) * c]);
            }
        }
        self.push(
            "concat",
            shape,
            out,
            Op::Concat { inputs: parts.iter().map(|p| p.id).collect(), outer, chunks },
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice<'t>(&'t self, a: Var<'t, T>, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let s = self.shape_of(a);
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("slice", format!("{s:?} axis {axis} [{start}, {})", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let (in_chunk, offset, out_chunk) = (s[axis] * inner, start * inner, len * inner);
        let x = self.value_of(a);
        let mut out = Vec::with_capacity(outer * out_chunk);
        for o in 0..outer {
            out.extend_from_slice(&x[o * in_chunk + offset..o * in_chunk + offset + out_chunk]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push("slice", shape, out, Op::Slice { a: a.id, outer, in_chunk, offset, out_chunk })
    }

    pub fn reshape<'t>(&'t self, a: Var<'t, T>, shape: &[usize]) -> Result<Var<'t, T>> {
        let s = self.shape_of(a);
        if shape.iter().product::<usize>() != s.iter().product::<usize>() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{s:?} -> {shape:?}")));
        }
        let v = (*self.value_of(a)).clone();
        self.push("reshape", shape.to_vec(), v, Op::Reshape { a: a.id })
    }

    pub fn sum<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = self.value_of(a).iter().copied().sum();
        self.push("sum", vec![1], vec![s], Op::Sum { a: a.id })
    }

    pub fn mean<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value_of(a);
        let m = x.iter().copied().sum::<T>() / T::of(x.len() as f64);
        self.push("mean", vec![1], vec![m], Op::Mean { a: a.id })
    }

    /// Selective scan over `u: [B, T, C]` with step sizes `delta: [B, T, C]`,
    /// diagonal `a: [C, N]` and per-step `b, c: [B, T, N]`; zero initial
    /// state. Returns `y: [B, T, C]` with `y_t = ⟨c_t, h_t⟩` per channel.
    pub fn selective_scan<'t>(
        &'t self,
        u: Var<'t, T>,
        delta: Var<'t, T>,
        a: Var<'t, T>,
        b: Var<'t, T>,
        c: Var<'t, T>,
        mode: Discretization,
    ) -> Result<Var<'t, T>> {
        let su = self.shape_of(u);
        let (batch, time, channels) = match su.as_slice() {
            [bb, t, ch] => (*bb, *t, *ch),
            _ => return Err(Error::shape("selective_scan", format!("u {su:?}"))),
        };
        let sa = self.shape_of(a);
        if sa.len() != 2 || sa[0] != channels {
            return Err(Error::shape("selective_scan", format!("u {su:?} a {sa:?}")));
        }
        let state = sa[1];
        if self.shape_of(delta) != su
            || self.shape_of(b) != [batch, time, state]
            || self.shape_of(c) != [batch, time, state]
        {
            return Err(Error::shape(
                "selective_scan",
                format!(
                    "u {su:?} delta {:?} b {:?} c {:?} (state {state})",
                    self.shape_of(delta),
                    self.shape_of(b),
                    self.shape_of(c)
                ),
            ));
        }
        let dims = ssm::ScanDims { batch, time, channels, state };
        let inputs = ssm::ScanInputs::new(u.id, delta.id, a.id, b.id, c.id);
        let keep = {
            let nodes = self.nodes.borrow();
            inputs.ids().iter().any(|&i| nodes[i].needs_grad)
        };
        let (y, trace) = ssm::batched_scan_forward(
            &dims,
            &self.value_of(u),
            &self.value_of(delta),
            &self.value_of(a),
            &self.value_of(b),
            &self.value_of(c),
            mode,
            keep,
        )?;
        self.push("selective_scan", su, y, Op::Scan { inputs, dims, mode, trace })
    }

    /// Mean over rows of `-log softmax(logits)[target]`; logits `[.., V]`.
    pub fn cross_entropy<'t>(&'t self, logits: Var<'t, T>, targets: &[usize]) -> Result<Var<'t, T>> {
        let s = self.shape_of(logits);
        let v = *s.last().ok_or_else(|| Error::shape("cross_entropy", "rank 0"))?;
        let rows = s.iter().product::<usize>() / v;
        if rows != targets.len() {
            return Err(Error::shape("cross_entropy", format!("logits {s:?}, {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::invalid(format!("target {bad} out of range for vocabulary {v}")));
        }
        let x = self.value_of(logits);
        let mut probs = vec![T::zero(); x.len()];
        kernels::softmax_rows(&x, v, &mut probs);
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &x[r * v..(r + 1) * v];
            total += kernels::logsumexp(row) - row[t];
        }
        let loss = total / T::of(rows as f64);
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits: logits.id, targets: targets.to_vec(), probs, v },
        )
    }

    // ---- reverse pass -------------------------------------------------

    /// Back-propagates from the scalar `loss`, returns leaf gradients and
    /// clears the tape.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        self.check_live()?;
        let mut nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        self.consumed.set(true);
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Autodiff(format!("loss must be scalar, got shape {:?}", root.shape)));
        }
        if !root.needs_grad {
            return Err(Error::Autodiff("loss is detached: no input requires a gradient".into()));
        }
        let count = loss.id + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..count).rev() {
            if matches!(nodes[id].op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let op = std::mem::replace(&mut nodes[id].op, Op::Constant);
            backprop(&op, &g, &nodes, &mut grads)?;
            nodes[id].op = op;
            grads[id] = Some(g);
        }
        let mut out = Gradients { grads: Vec::with_capacity(nodes.len()), shapes: Vec::with_capacity(nodes.len()) };
        for (id, node) in nodes.into_iter().enumerate() {
            let is_leaf = matches!(node.op, Op::Leaf);
            out.grads.push(if is_leaf { grads[id].take() } else { None });
            out.shapes.push(node.shape);
        }
        Ok(out)
    }
}

fn backprop<T: Element>(op: &Op<T>, g: &[T], nodes: &[Node<T>], grads: &mut [Option<Vec<T>>]) -> Result<()> {
    let val = |id: usize| -> &[T] { &nodes[id].value };
    match op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul { a, b, m, k, n } => {
            let (va, vb) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            if let Some(ga) = grad_slot(grads, nodes, *a) {
                kernels::gemm(g, false, &vb, true, ga, *m, *n, *k, true);
            }
            if let Some(gb) = grad_slot(grads, nodes, *b) {
                kernels::gemm(&va, true, g, false, gb, *k, *m, *n, true);
            }
        }
        Op::Transpose { a, rows, cols } => {
            if let Some(ga) = grad_slot(grads, nodes, *a) {
                for r in 0..*rows {
                    for c in 0..*cols {
                        ga[r * cols + c] += g[c * rows + r];
                    }
                }
            }
        }
        Op::Add { a, b, ma, mb } => {
            for (id, m) in [(*a, ma), (*b, mb)] {
                if let Some(gx) = grad_slot(grads, nodes, id) {
                    for (i, &gi) in g.iter().enumerate() {
                        gx[m.index(i)] += gi;
                    }
                }
            }
        }
        Op::Mul { a, b, ma, mb } => {
            let (va, vb) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            if let Some(ga) = grad_slot(grads, nodes, *a) {
                for (i, &gi) in g.iter().enumerate() {
                    ga[ma.index(i)] += gi * vb[mb.index(i)];
                }
            }
            if let Some(gb) = grad_slot(grads, nodes, *b) {
                for (i, &gi) in g.iter().enumerate() {
                    gb[mb.index(i)] += gi * va[ma.index(i)];
                }
            }
        }
        Op::Neg { a } => {
            if let Some(ga) = grad_slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &gi)| *x -= gi);
            }
        }
        Op::Scale { a, c } => {
            if let Some(ga) = grad_slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &gi)| *x += gi * *c);
            }
        }
        Op::Exp { a } => {
            let x = nodes[*a].value.clone();
            if let Some(ga) = grad_slot(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * x[i].exp();
                }
            }
        }
        Op::Log { a } => {
            let x = nodes[*a].value.clone();
            if let Some(ga) = grad_slot(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / x[i];
                }
            }
        }
        Op::Silu { a } => {
            let x = nodes[*a].value.clone();
            if let Some(ga) = grad_slot(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * kernels::silu_grad(x[i]);
                }
            }
        }
        Op::Softplus { a } => {
            let x = nodes[*a].value.clone();
            if let Some(ga) = grad_slot(grads, nodes, *a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * kernels::sigmoid(x[i]);
                }
            }
        }
        Op::Softmax { a, d } => {
            // recompute output
            let x = nodes[*a].value.clone();
            let mut y = vec![T::zero(); x.len()];
            kernels::softmax_rows(&x, *d, &mut y);
            if let Some(ga) = grad_slot(grads, nodes, *a) {
                for ((yr, gr), gar) in y.chunks_exact(*d).zip(g.chunks_exact(*d)).zip(ga.chunks_exact_mut(*d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..*d {
                        gar[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { a, d, inv } => {
            let x = nodes[*a].value.clone();
            let dn = T::of(*d as f64);
            if let Some(ga) = grad_slot(grads, nodes, *a) {
                for (r, ((xr, gr), gar)) in
                    x.chunks_exact(*d).zip(g.chunks_exact(*d)).zip(ga.chunks_exact_mut(*d)).enumerate()
                {
                    let mean = xr.iter().copied().sum::<T>() / dn;
                    let s = inv[r];
                    let xhat: Vec<T> = xr.iter().map(|&v| (v - mean) * s).collect();
                    let gsum: T = gr.iter().copied().sum();
                    let gx: T = gr.iter().zip(&xhat).map(|(&p, &q)| p * q).sum();
                    for j in 0..*d {
                        gar[j] += s * (gr[j] - gsum / dn - xhat[j] * gx / dn);
                    }
                }
            }
        }
        Op::RmsNorm { a, d, inv } => {
            let x = nodes[*a].value.clone();
            let dn = T::of(*d as f64);
            if let Some(ga) = grad_slot(grads, nodes, *a) {
                for (r, ((xr, gr), gar)) in
                    x.chunks_exact(*d).zip(g.chunks_exact(*d)).zip(ga.chunks_exact_mut(*d)).enumerate()
                {
                    let s = inv[r];
                    let gx: T = gr.iter().zip(xr).map(|(&p, &q)| p * q).sum();
                    for j in 0..*d {
                        gar[j] += s * gr[j] - s * s * s * xr[j] * gx / dn;
                    }
                }
            }
        }
        Op::Conv1d { x, w, bias, batch, time, channels, k } => {
            let (vx, vw) = (nodes[*x].value.clone(), nodes[*w].value.clone());
            let (ch, kk) = (*channels, *k);
            if let Some(gx) = grad_slot(grads, nodes, *x) {
                for bb in 0..*batch {
                    let base = bb * time * ch;
                    for t in 0..*time {
                        for j in 0..kk {
                            let src = t as isize - (kk as isize - 1) + j as isize;
                            if src < 0 {
                                continue;
                            }
                            let (so, go) = (base + src as usize * ch, base + t * ch);
                            for c in 0..ch {
                                gx[so + c] += vw[c * kk + j] * g[go + c];
                            }
                        }
                    }
                }
            }
            if let Some(gw) = grad_slot(grads, nodes, *w) {
                for bb in 0..*batch {
                    let base = bb * time * ch;
                    for t in 0..*time {
                        for j in 0..kk {
                            let src = t as isize - (kk as isize - 1) + j as isize;
                            if src < 0 {
                                continue;
                            }
                            let (so, go) = (base + src as usize * ch, base + t * ch);
                            for c in 0..ch {
                                gw[c * kk + j] += vx[so + c] * g[go + c];
                            }
                        }
                    }
                }
            }
            if let Some(b) = bias {
                if let Some(gb) = grad_slot(grads, nodes, *b) {
                    for row in g.chunks_exact(ch) {
                        gb.iter_mut().zip(row).for_each(|(p, &q)| *p += q);
                    }
                }
            }
        }
        Op::Embedding { table, indices, d } => {
            if let Some(gt) = grad_slot(grads, nodes, *table) {
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..*d {
                        gt[i * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::Concat { inputs, outer, chunks } => {
            let total: usize = chunks.iter().sum();
            let mut off = 0;
            for (&id, &c) in inputs.iter().zip(chunks) {
                if let Some(gx) = grad_slot(grads, nodes, id) {
                    for o in 0..*outer {
                        let src = &g[o * total + off..o * total + off + c];
                        gx[o * c..(o + 1) * c].iter_mut().zip(src).for_each(|(p, &q)| *p += q);
                    }
                }
                off += c;
            }
        }
        Op::Slice { a, outer, in_chunk, offset, out_chunk } => {
            if let Some(ga) = grad_slot(grads, nodes, *a) {
                for o in 0..*outer {
                    let dst = &mut ga[o * in_chunk + offset..o * in_chunk + offset + out_chunk];
                    dst.iter_mut().zip(&g[o * out_chunk..(o + 1) * out_chunk]).for_each(|(p, &q)| *p += q);
                }
            }
        }
        Op::Reshape { a } => {
            if let Some(ga) = grad_slot(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(p, &q)| *p += q);
            }
        }
        Op::Sum { a } => {
            if let Some(ga) = grad_slot(grads, nodes, *a) {
                ga.iter_mut().for_each(|p| *p += g[0]);
            }
        }
        Op::Mean { a } => {
            let n = T::of(nodes[*a].value.len() as f64);
            if let Some(ga) = grad_slot(grads, nodes, *a) {
                ga.iter_mut().for_each(|p| *p += g[0] / n);
            }
        }
        Op::Scan { inputs, dims, mode, trace } => {
            let [u, delta, a, b, c] = *inputs.ids();
            let gs = ssm::batched_scan_backward(
                dims,
                val(u),
                val(delta),
                val(a),
                val(b),
                val(c),
                trace,
                g,
                *mode,
            );
            for (id, gv) in [(u, gs.u), (delta, gs.delta), (a, gs.a), (b, gs.b), (c, gs.c)] {
                if let Some(slot) = grad_slot(grads, nodes, id) {
                    slot.iter_mut().zip(&gv).for_each(|(p, &q)| *p += q);
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs, v } => {
            let scale = g[0] / T::of(targets.len() as f64);
            if let Some(gl) = grad_slot(grads, nodes, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..*v {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        gl[r * v + j] += scale * (probs[r * v + j] - onehot);
                    }
                }
            }
        }
    }
    Ok(())
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(*self)
    }

    /// Current value as a tensor (shares the buffer).
    pub fn value(&self) -> Tensor<T> {
        Tensor::from_parts(self.shape(), self.tape.value_of(*self))
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Self> {
        self.tape.matmul(self, rhs)
    }
    #[allow(clippy::should_implement_trait)]
    pub fn add(self, rhs: Var<'t, T>) -> Result<Self> {
        self.tape.add(self, rhs)
    }
    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, rhs: Var<'t, T>) -> Result<Self> {
        self.tape.mul(self, rhs)
    }
    #[allow(clippy::should_implement_trait)]
    pub fn neg(self) -> Result<Self> {
        self.tape.neg(self)
    }
    pub fn scale(self, c: T) -> Result<Self> {
        self.tape.scale(self, c)
    }
    pub fn exp(self) -> Result<Self> {
        self.tape.exp(self)
    }
    pub fn log(self) -> Result<Self> {
        self.tape.log(self)
    }
    pub fn silu(self) -> Result<Self> {
        self.tape.silu(self)
    }
    pub fn softplus(self) -> Result<Self> {
        self.tape.softplus(self)
    }
    pub fn softmax(self) -> Result<Self> {
        self.tape.softmax(self)
    }
    pub fn layer_norm(self) -> Result<Self> {
        self.tape.layer_norm(self)
    }
    pub fn rms_norm(self) -> Result<Self> {
        self.tape.rms_norm(self)
    }
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Self> {
        self.tape.slice(self, axis, start, len)
    }
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        self.tape.reshape(self, shape)
    }
    pub fn sum(self) -> Result<Self> {
        self.tape.sum(self)
    }
    pub fn mean(self) -> Result<Self> {
        self.tape.mean(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let x = t(&[3, 2], &[1.0, -2.0, 3.5, 0.25, 7.0, 8.0]);
        let y = tape.matmul(tape.constant(&Tensor::eye(3)), tape.constant(&x)).unwrap();
        assert_eq!(y.value(), x);
    }

    #[test]
    fn uniform_softmax() {
        let tape = Tape::new();
        let y = tape.constant(&Tensor::<f64>::zeros(vec![4])).softmax().unwrap();
        assert_eq!(y.value().data(), &[0.25; 4]);
    }

    #[test]
    fn swish_at_one() {
        let tape = Tape::new();
        let y = tape.swish(tape.constant(&t(&[2], &[0.0, 1.0]))).unwrap();
        assert_eq!(y.value().data()[0], 0.0);
        assert!((y.value().data()[1] - 0.731_059).abs() < 1e-6);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.var(&t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let loss = x.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_square() {
        let tape = Tape::new();
        let x = tape.var(&t(&[1], &[3.0]));
        let loss = x.mul(x).unwrap().sum().unwrap();
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_twice_errors_and_clears() {
        let tape = Tape::new();
        let x = tape.var(&t(&[1], &[3.0]));
        let loss = x.sum().unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.is_empty());
        assert!(tape.backward(loss).is_err());
        assert!(tape.neg(x).is_err());
    }

    #[test]
    fn non_scalar_and_detached_losses_error() {
        let tape = Tape::new();
        let x = tape.var(&t(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
        let tape = Tape::new();
        let c = tape.constant(&t(&[1], &[1.0]));
        assert!(matches!(tape.backward(c), Err(Error::Autodiff(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let tape = Tape::new();
        let a = tape.constant(&Tensor::<f64>::zeros(vec![2, 3]));
        let b = tape.constant(&Tensor::<f64>::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.constant(&Tensor::<f64>::zeros(vec![4]));
        assert!(tape.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn log_of_zero_is_fatal() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::<f64>::zeros(vec![1]));
        assert!(matches!(tape.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn broadcast_middle_axis() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let s = tape.constant(&t(&[2, 1, 2], &[10.0, 100.0, 1.0, -1.0]));
        let y = tape.mul(x, s).unwrap();
        assert_eq!(y.value().data(), &[10.0, 200.0, 30.0, 400.0, 5.0, -6.0, 7.0, -8.0]);
    }

    #[test]
    fn layer_norm_moments() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[2, 4], &[1.0, 2.0, 3.0, 10.0, -5.0, 0.0, 0.5, 2.0]));
        let y = x.layer_norm().unwrap().value();
        for row in y.data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn cross_entropy_hand_value() {
        // rows [0, ln 3] and [0, 0], targets [1, 0]: (-ln 0.75 - ln 0.5) / 2
        let tape = Tape::new();
        let l = tape.constant(&t(&[2, 2], &[0.0, 3f64.ln(), 0.0, 0.0]));
        let loss = tape.cross_entropy(l, &[1, 0]).unwrap().value().item().unwrap();
        let want = (-(0.75f64).ln() - (0.5f64).ln()) / 2.0;
        assert!((loss - want).abs() < 1e-12);
        assert!((want - 0.49042).abs() < 1e-5);
    }
}
