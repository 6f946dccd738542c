//! Dense row-major tensors and a Wengert tape for reverse-mode autodiff.
//!
//! Values live in a [`Tape`] arena. Recording an operation computes the
//! result immediately and stores the operand ids; [`Tape::backward`] replays
//! the recorded list in reverse, applying each operation's vector-Jacobian
//! rule and accumulating into per-node gradient buffers. Shape violations
//! are programmer errors and panic with both shapes in the message.

use std::fmt;

/// Epsilon added to the variance inside layer normalization.
pub const LN_EPS: f64 = 1e-5;

// ── Scalar ───────────────────────────────────────────────────────────────

/// Storage precision of a tensor or checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Numeric behavior shared by `f32` and `f64`.
///
/// Training may run in single precision; tests and gradient oracles use
/// double. The byte-level methods exist for checkpoint serialization.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::iter::Sum
    + fmt::Display
    + fmt::Debug
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

// ── Tensor ───────────────────────────────────────────────────────────────

/// A dense tensor with row-major flat storage.
///
/// Rank is arbitrary for storage (images are `[W, W, C]`), but the tape
/// operations below treat tensors as matrices: rank 1 is read as a single
/// row, rank 2 as `[rows × cols]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor shape {:?} holds {} elements but {} were provided",
            shape,
            numel,
            data.len()
        );
        Tensor { shape, data, grad: None, requires_grad: false }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); numel], grad: None, requires_grad: false }
    }

    pub fn full(shape: Vec<usize>, v: S) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![v; numel], grad: None, requires_grad: false }
    }

    pub fn scalar(v: S) -> Self {
        Tensor::from_vec(vec![1], vec![v])
    }

    /// Marks the tensor as a trainable leaf.
    pub fn into_param(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, g: Vec<S>) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        self.grad = Some(g);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Rows when read as a matrix; rank 1 counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("matrix op on tensor of shape {:?}", self.shape),
        }
    }

    /// Columns when read as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("matrix op on tensor of shape {:?}", self.shape),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> S {
        let cols = self.cols();
        self.data[r * cols + c]
    }

    /// Converts storage precision elementwise.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|v| T::from_f64(v.as_f64())).collect();
        let mut t = Tensor::from_vec(self.shape.clone(), data);
        t.requires_grad = self.requires_grad;
        t
    }
}

// ── Raw matrix kernels ───────────────────────────────────────────────────
//
// Shared by the forward ops and the matmul backward rules. All accumulate
// into `out` so backward passes can add straight into gradient buffers;
// forward callers pass freshly zeroed buffers.

/// `out += a · b` with `a: [m×k]`, `b: [k×n]`.
pub(crate) fn matmul_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + aik * b_row[j];
            }
        }
    }
}

/// `out += a · bᵀ` with `a: [m×k]`, `b: [n×k]`.
pub(crate) fn matmul_nt_acc<S: Scalar>(
    a: &[S],
    b: &[S],
    out: &mut [S],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for kk in 0..k {
                acc = acc + a_row[kk] * b_row[kk];
            }
            out_row[j] += acc;
        }
    }
}

/// `out += aᵀ · b` with `a: [m×k]`, `b: [m×n]`, `out: [k×n]`.
pub(crate) fn matmul_tn_acc<S: Scalar>(
    a: &[S],
    b: &[S],
    out: &mut [S],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + aik * b_row[j];
            }
        }
    }
}

fn gelu_value<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_derivative<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

// ── Tape ─────────────────────────────────────────────────────────────────

/// Handle to a tensor stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

enum Op<S> {
    Matmul { a: TensorId, b: TensorId, out: TensorId },
    Transpose { a: TensorId, out: TensorId },
    Add { a: TensorId, b: TensorId, out: TensorId },
    AddRowBroadcast { a: TensorId, bias: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    Scale { a: TensorId, out: TensorId, c: S },
    SoftmaxRows { a: TensorId, out: TensorId },
    LayerNorm { a: TensorId, gamma: TensorId, beta: TensorId, out: TensorId },
    Gelu { a: TensorId, out: TensorId },
    ConcatRows { parts: Vec<TensorId>, out: TensorId },
    ConcatCols { parts: Vec<TensorId>, out: TensorId },
    SliceRows { a: TensorId, out: TensorId, start: usize },
    SliceCols { a: TensorId, out: TensorId, start: usize },
    MeanRows { a: TensorId, out: TensorId },
    SumAll { a: TensorId, out: TensorId },
    L2NormalizeRows { a: TensorId, out: TensorId, eps: S },
    SubAtIndex { a: TensorId, out: TensorId },
    CrossEntropy { logits: TensorId, out: TensorId, label: usize },
}

/// Records operations in execution order and replays them in exact reverse
/// for the backward pass.
///
/// Gradients accumulate: calling [`Tape::backward`] twice without a fresh
/// tape adds a second contribution to every buffer.
pub struct Tape<S: Scalar> {
    nodes: Vec<Tensor<S>>,
    grads: Vec<Option<Vec<S>>>,
    ops: Vec<Op<S>>,
    check_finite: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), ops: Vec::new(), check_finite: false }
    }

    /// Debug mode: every recorded op asserts its output is finite.
    pub fn with_finite_checks() -> Self {
        Tape { check_finite: true, ..Tape::new() }
    }

    /// Registers a tensor, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor<S>) -> TensorId {
        self.push_node(t)
    }

    /// Registers a tensor that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor<S>) -> TensorId {
        t.requires_grad = false;
        self.push_node(t)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<S> {
        &self.nodes[id.0]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    fn push_node(&mut self, t: Tensor<S>) -> TensorId {
        if self.check_finite {
            assert!(
                t.data.iter().all(|v| v.is_finite()),
                "non-finite value entered the tape (node {})",
                self.nodes.len()
            );
        }
        self.nodes.push(t);
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, shape: Vec<usize>, data: Vec<S>, from: &[TensorId]) -> TensorId {
        let requires_grad = from.iter().any(|id| self.nodes[id.0].requires_grad);
        let mut t = Tensor::from_vec(shape, data);
        t.requires_grad = requires_grad;
        self.push_node(t)
    }

    fn record(&mut self, op: Op<S>, out: TensorId) {
        if self.nodes[out.0].requires_grad {
            self.ops.push(op);
        }
    }

    // ── Operations ───────────────────────────────────────────────────────

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let (m, k) = (ta.rows(), ta.cols());
        let (kb, n) = (tb.rows(), tb.cols());
        assert_eq!(
            k,
            kb,
            "matmul shape mismatch: {:?} x {:?}",
            ta.shape(),
            tb.shape()
        );
        let mut out = vec![S::zero(); m * n];
        matmul_acc(&ta.data, &tb.data, &mut out, m, k, n);
        let id = self.push_derived(vec![m, n], out, &[a, b]);
        self.record(Op::Matmul { a, b, out: id }, id);
        id
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0];
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ta.data[i * c + j];
            }
        }
        let id = self.push_derived(vec![c, r], out, &[a]);
        self.record(Op::Transpose { a, out: id }, id);
        id
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "add shape mismatch: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let out: Vec<S> = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x + y).collect();
        let shape = ta.shape.clone();
        let id = self.push_derived(shape, out, &[a, b]);
        self.record(Op::Add { a, b, out: id }, id);
        id
    }

    /// Adds a length-`cols` bias vector to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: TensorId, bias: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[bias.0]);
        let (r, c) = (ta.rows(), ta.cols());
        assert_eq!(
            tb.numel(),
            c,
            "bias of shape {:?} does not broadcast over rows of {:?}",
            tb.shape(),
            ta.shape()
        );
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(ta.data[i * c + j] + tb.data[j]);
            }
        }
        let shape = ta.shape.clone();
        let id = self.push_derived(shape, out, &[a, bias]);
        self.record(Op::AddRowBroadcast { a, bias, out: id }, id);
        id
    }

    /// Elementwise product of two tensors of identical shape.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "mul shape mismatch: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let out: Vec<S> = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x * y).collect();
        let shape = ta.shape.clone();
        let id = self.push_derived(shape, out, &[a, b]);
        self.record(Op::Mul { a, b, out: id }, id);
        id
    }

    pub fn scale(&mut self, a: TensorId, c: S) -> TensorId {
        let ta = &self.nodes[a.0];
        let out: Vec<S> = ta.data.iter().map(|&x| x * c).collect();
        let shape = ta.shape.clone();
        let id = self.push_derived(shape, out, &[a]);
        self.record(Op::Scale { a, out: id, c }, id);
        id
    }

    /// Row-wise softmax with max subtraction, so rows drawn from scaled
    /// logits (up to ±1e3 or so) stay finite.
    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0];
        let (r, c) = (ta.rows(), ta.cols());
        assert!(c > 0, "softmax over empty rows, shape {:?}", ta.shape());
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &ta.data[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(row[0], S::max);
            let o = &mut out[i * c..(i + 1) * c];
            let mut sum = S::zero();
            for j in 0..c {
                let e = (row[j] - m).exp();
                o[j] = e;
                sum += e;
            }
            for v in o.iter_mut() {
                *v = *v / sum;
            }
        }
        let shape = ta.shape.clone();
        let id = self.push_derived(shape, out, &[a]);
        self.record(Op::SoftmaxRows { a, out: id }, id);
        id
    }

    /// Row-wise layer normalization with affine parameters.
    ///
    /// Uses the biased variance and adds [`LN_EPS`] inside the square root.
    pub fn layer_norm(&mut self, a: TensorId, gamma: TensorId, beta: TensorId) -> TensorId {
        let (ta, tg, tb) = (&self.nodes[a.0], &self.nodes[gamma.0], &self.nodes[beta.0]);
        let (r, c) = (ta.rows(), ta.cols());
        assert_eq!(
            tg.numel(),
            c,
            "layer_norm gamma shape {:?} does not match row width of {:?}",
            tg.shape(),
            ta.shape()
        );
        assert_eq!(
            tb.numel(),
            c,
            "layer_norm beta shape {:?} does not match row width of {:?}",
            tb.shape(),
            ta.shape()
        );
        let eps = S::from_f64(LN_EPS);
        let inv_c = S::one() / S::from_f64(c as f64);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &ta.data[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<S>() * inv_c;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() * inv_c;
            let inv_sigma = S::one() / (var + eps).sqrt();
            let o = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                o[j] = tg.data[j] * (row[j] - mean) * inv_sigma + tb.data[j];
            }
        }
        let shape = ta.shape.clone();
        let id = self.push_derived(shape, out, &[a, gamma, beta]);
        self.record(Op::LayerNorm { a, gamma, beta, out: id }, id);
        id
    }

    /// Elementwise GELU in its tanh form.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0];
        let out: Vec<S> = ta.data.iter().map(|&x| gelu_value(x)).collect();
        let shape = ta.shape.clone();
        let id = self.push_derived(shape, out, &[a]);
        self.record(Op::Gelu { a, out: id }, id);
        id
    }

    /// Stacks matrices with equal column counts, preserving order.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_rows of zero tensors");
        let c = self.nodes[parts[0].0].cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.0];
            assert_eq!(
                t.cols(),
                c,
                "concat_rows column mismatch: {:?} vs first part with {} cols",
                t.shape(),
                c
            );
            rows += t.rows();
            out.extend_from_slice(&t.data);
        }
        let id = self.push_derived(vec![rows, c], out, parts);
        self.record(Op::ConcatRows { parts: parts.to_vec(), out: id }, id);
        id
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_cols of zero tensors");
        let r = self.nodes[parts[0].0].rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let t = &self.nodes[p.0];
                assert_eq!(
                    t.rows(),
                    r,
                    "concat_cols row mismatch: {:?} vs first part with {} rows",
                    t.shape(),
                    r
                );
                t.cols()
            })
            .collect();
        let c: usize = widths.iter().sum();
        let mut out = vec![S::zero(); r * c];
        let mut offset = 0;
        for (idx, &p) in parts.iter().enumerate() {
            let t = &self.nodes[p.0];
            let w = widths[idx];
            for i in 0..r {
                out[i * c + offset..i * c + offset + w]
                    .copy_from_slice(&t.data[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let id = self.push_derived(vec![r, c], out, parts);
        self.record(Op::ConcatCols { parts: parts.to_vec(), out: id }, id);
        id
    }

    /// Copies `len` rows starting at `start`.
    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let ta = &self.nodes[a.0];
        let (r, c) = (ta.rows(), ta.cols());
        assert!(
            start + len <= r,
            "slice_rows {}..{} out of bounds for {:?}",
            start,
            start + len,
            ta.shape()
        );
        let out = ta.data[start * c..(start + len) * c].to_vec();
        let id = self.push_derived(vec![len, c], out, &[a]);
        self.record(Op::SliceRows { a, out: id, start }, id);
        id
    }

    /// Copies `len` columns starting at `start`.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let ta = &self.nodes[a.0];
        let (r, c) = (ta.rows(), ta.cols());
        assert!(
            start + len <= c,
            "slice_cols {}..{} out of bounds for {:?}",
            start,
            start + len,
            ta.shape()
        );
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&ta.data[i * c + start..i * c + start + len]);
        }
        let id = self.push_derived(vec![r, len], out, &[a]);
        self.record(Op::SliceCols { a, out: id, start }, id);
        id
    }

    /// Column-wise mean over rows: `[m×n] -> [1×n]`.
    pub fn mean_rows(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0];
        let (r, c) = (ta.rows(), ta.cols());
        assert!(r > 0, "mean_rows of empty tensor {:?}", ta.shape());
        let inv_r = S::one() / S::from_f64(r as f64);
        let mut out = vec![S::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] += ta.data[i * c + j];
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv_r;
        }
        let id = self.push_derived(vec![1, c], out, &[a]);
        self.record(Op::MeanRows { a, out: id }, id);
        id
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0];
        let s = ta.data.iter().copied().sum::<S>();
        let id = self.push_derived(vec![1], vec![s], &[a]);
        self.record(Op::SumAll { a, out: id }, id);
        id
    }

    /// Scales each row to unit L2 norm, dividing by `norm + eps`.
    ///
    /// Callers that must reject zero rows check norms before recording;
    /// `eps > 0` keeps the op total for training.
    pub fn l2_normalize_rows(&mut self, a: TensorId, eps: S) -> TensorId {
        let ta = &self.nodes[a.0];
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            let row = &ta.data[i * c..(i + 1) * c];
            let norm = row.iter().map(|&x| x * x).sum::<S>().sqrt();
            let denom = norm + eps;
            for j in 0..c {
                out[i * c + j] = row[j] / denom;
            }
        }
        let shape = ta.shape.clone();
        let id = self.push_derived(shape, out, &[a]);
        self.record(Op::L2NormalizeRows { a, out: id, eps }, id);
        id
    }

    /// Subtracts `amount` from one coordinate of a single-row tensor.
    pub fn sub_at_index(&mut self, a: TensorId, index: usize, amount: S) -> TensorId {
        let ta = &self.nodes[a.0];
        assert_eq!(ta.rows(), 1, "sub_at_index expects a single row, got {:?}", ta.shape());
        assert!(
            index < ta.cols(),
            "sub_at_index {} out of bounds for {:?}",
            index,
            ta.shape()
        );
        let mut out = ta.data.clone();
        out[index] = out[index] - amount;
        let shape = ta.shape.clone();
        let id = self.push_derived(shape, out, &[a]);
        self.record(Op::SubAtIndex { a, out: id }, id);
        id
    }

    /// Cross-entropy of a single-row logit vector against `label`, with
    /// max-subtracted log-sum-exp.
    ///
    /// When the label holds the max the loss is `ln_1p` of the remaining
    /// mass, so heavily saturated predictions keep full relative accuracy
    /// instead of rounding to zero.
    pub fn cross_entropy(&mut self, logits: TensorId, label: usize) -> TensorId {
        let t = &self.nodes[logits.0];
        assert_eq!(t.rows(), 1, "cross_entropy expects a single row, got {:?}", t.shape());
        let k = t.cols();
        assert!(label < k, "label {} out of range for {} classes", label, k);
        let row = &t.data;
        let m = row.iter().copied().fold(row[0], S::max);
        let loss = if row[label] == m {
            let rest: S =
                (0..k).filter(|&j| j != label).map(|j| (row[j] - m).exp()).sum();
            rest.ln_1p()
        } else {
            let total: S = row.iter().map(|&z| (z - m).exp()).sum();
            (m - row[label]) + total.ln()
        };
        let id = self.push_derived(vec![1], vec![loss], &[logits]);
        self.record(Op::CrossEntropy { logits, out: id, label }, id);
        id
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Replays recorded operations in exact reverse order, accumulating
    /// vector-Jacobian products. `loss` must be a scalar.
    ///
    /// Each call runs over a fresh set of buffers and then adds its result
    /// into the persistent gradients, so calling twice doubles every
    /// gradient without cross-contaminating the passes.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(
            self.nodes[loss.0].numel(),
            1,
            "backward target must be a scalar, got shape {:?}",
            self.nodes[loss.0].shape()
        );
        let mut pass: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        self.add_grad(&mut pass, loss, &[S::one()]);
        for i in (0..self.ops.len()).rev() {
            self.backward_op(i, &mut pass);
        }
        for (slot, local) in self.grads.iter_mut().zip(pass) {
            if let Some(local) = local {
                match slot {
                    Some(total) => {
                        for (dst, src) in total.iter_mut().zip(local) {
                            *dst += src;
                        }
                    }
                    None => *slot = Some(local),
                }
            }
        }
    }

    fn wants_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn add_grad(&self, grads: &mut [Option<Vec<S>>], id: TensorId, g: &[S]) {
        let buf =
            grads[id.0].get_or_insert_with(|| vec![S::zero(); self.nodes[id.0].numel()]);
        debug_assert_eq!(buf.len(), g.len());
        for (dst, &src) in buf.iter_mut().zip(g) {
            *dst += src;
        }
    }

    fn backward_op(&self, op_index: usize, grads: &mut [Option<Vec<S>>]) {
        // Ops are matched by index so the arena can be borrowed per-arm.
        macro_rules! need {
            ($out:expr) => {
                match grads[$out.0].clone() {
                    Some(g) => g,
                    None => return,
                }
            };
        }
        match &self.ops[op_index] {
            &Op::Matmul { a, b, out } => {
                let g = need!(out);
                let (m, k) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
                let n = self.nodes[b.0].cols();
                if self.wants_grad(a) {
                    let mut ga = vec![S::zero(); m * k];
                    matmul_nt_acc(&g, &self.nodes[b.0].data, &mut ga, m, n, k);
                    self.add_grad(grads, a, &ga);
                }
                if self.wants_grad(b) {
                    let mut gb = vec![S::zero(); k * n];
                    matmul_tn_acc(&self.nodes[a.0].data, &g, &mut gb, m, k, n);
                    self.add_grad(grads, b, &gb);
                }
            }
            &Op::Transpose { a, out } => {
                let g = need!(out);
                if self.wants_grad(a) {
                    let (r, c) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
                    let mut ga = vec![S::zero(); r * c];
                    for i in 0..c {
                        for j in 0..r {
                            ga[j * c + i] = g[i * r + j];
                        }
                    }
                    self.add_grad(grads, a, &ga);
                }
            }
            &Op::Add { a, b, out } => {
                let g = need!(out);
                if self.wants_grad(a) {
                    self.add_grad(grads, a, &g);
                }
                if self.wants_grad(b) {
                    self.add_grad(grads, b, &g);
                }
            }
            &Op::AddRowBroadcast { a, bias, out } => {
                let g = need!(out);
                let (r, c) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
                if self.wants_grad(a) {
                    self.add_grad(grads, a, &g);
                }
                if self.wants_grad(bias) {
                    let mut gb = vec![S::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                    self.add_grad(grads, bias, &gb);
                }
            }
            &Op::Mul { a, b, out } => {
                let g = need!(out);
                if self.wants_grad(a) {
                    let ga: Vec<S> =
                        g.iter().zip(&self.nodes[b.0].data).map(|(&gv, &bv)| gv * bv).collect();
                    self.add_grad(grads, a, &ga);
                }
                if self.wants_grad(b) {
                    let gb: Vec<S> =
                        g.iter().zip(&self.nodes[a.0].data).map(|(&gv, &av)| gv * av).collect();
                    self.add_grad(grads, b, &gb);
                }
            }
            &Op::Scale { a, out, c } => {
                let g = need!(out);
                if self.wants_grad(a) {
                    let ga: Vec<S> = g.iter().map(|&gv| gv * c).collect();
                    self.add_grad(grads, a, &ga);
                }
            }
            &Op::SoftmaxRows { a, out } => {
                let g = need!(out);
                if self.wants_grad(a) {
                    let (r, c) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
                    let y = &self.nodes[out.0].data;
                    let mut ga = vec![S::zero(); r * c];
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: S = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        let o = &mut ga[i * c..(i + 1) * c];
                        for j in 0..c {
                            o[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.add_grad(grads, a, &ga);
                }
            }
            &Op::LayerNorm { a, gamma, beta, out } => {
                let g = need!(out);
                let (r, c) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
                let eps = S::from_f64(LN_EPS);
                let inv_c = S::one() / S::from_f64(c as f64);
                let x = &self.nodes[a.0].data;
                let gam = &self.nodes[gamma.0].data;
                let mut ga = vec![S::zero(); r * c];
                let mut ggamma = vec![S::zero(); c];
                let mut gbeta = vec![S::zero(); c];
                for i in 0..r {
                    let row = &x[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let mean = row.iter().copied().sum::<S>() * inv_c;
                    let var =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_c;
                    let inv_sigma = S::one() / (var + eps).sqrt();
                    let mut mean_h = S::zero();
                    let mut mean_hx = S::zero();
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv_sigma;
                        let h = gam[j] * gr[j];
                        mean_h += h;
                        mean_hx += h * xhat;
                        ggamma[j] += gr[j] * xhat;
                        gbeta[j] += gr[j];
                    }
                    mean_h = mean_h * inv_c;
                    mean_hx = mean_hx * inv_c;
                    let o = &mut ga[i * c..(i + 1) * c];
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv_sigma;
                        o[j] = (gam[j] * gr[j] - mean_h - xhat * mean_hx) * inv_sigma;
                    }
                }
                if self.wants_grad(a) {
                    self.add_grad(grads, a, &ga);
                }
                if self.wants_grad(gamma) {
                    self.add_grad(grads, gamma, &ggamma);
                }
                if self.wants_grad(beta) {
                    self.add_grad(grads, beta, &gbeta);
                }
            }
            &Op::Gelu { a, out } => {
                let g = need!(out);
                if self.wants_grad(a) {
                    let ga: Vec<S> = self.nodes[a.0]
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gv)| gv * gelu_derivative(x))
                        .collect();
                    self.add_grad(grads, a, &ga);
                }
            }
            Op::ConcatRows { parts, out } => {
                let parts = parts.clone();
                let out = *out;
                let g = need!(out);
                let c = self.nodes[out.0].cols();
                let mut row = 0;
                for p in parts {
                    let r = self.nodes[p.0].rows();
                    if self.wants_grad(p) {
                        self.add_grad(grads, p, &g[row * c..(row + r) * c]);
                    }
                    row += r;
                }
            }
            Op::ConcatCols { parts, out } => {
                let parts = parts.clone();
                let out = *out;
                let g = need!(out);
                let (r, c) = (self.nodes[out.0].rows(), self.nodes[out.0].cols());
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].cols();
                    if self.wants_grad(p) {
                        let mut gp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            gp.extend_from_slice(&g[i * c + offset..i * c + offset + w]);
                        }
                        self.add_grad(grads, p, &gp);
                    }
                    offset += w;
                }
            }
            &Op::SliceRows { a, out, start } => {
                let g = need!(out);
                if self.wants_grad(a) {
                    let (r, c) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
                    let len = self.nodes[out.0].rows();
                    let mut ga = vec![S::zero(); r * c];
                    ga[start * c..(start + len) * c].copy_from_slice(&g);
                    self.add_grad(grads, a, &ga);
                }
            }
            &Op::SliceCols { a, out, start } => {
                let g = need!(out);
                if self.wants_grad(a) {
                    let (r, c) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
                    let len = self.nodes[out.0].cols();
                    let mut ga = vec![S::zero(); r * c];
                    for i in 0..r {
                        ga[i * c + start..i * c + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    self.add_grad(grads, a, &ga);
                }
            }
            &Op::MeanRows { a, out } => {
                let g = need!(out);
                if self.wants_grad(a) {
                    let (r, c) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
                    let inv_r = S::one() / S::from_f64(r as f64);
                    let mut ga = vec![S::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = g[j] * inv_r;
                        }
                    }
                    self.add_grad(grads, a, &ga);
                }
            }
            &Op::SumAll { a, out } => {
                let g = need!(out);
                if self.wants_grad(a) {
                    let ga = vec![g[0]; self.nodes[a.0].numel()];
                    self.add_grad(grads, a, &ga);
                }
            }
            &Op::L2NormalizeRows { a, out, eps } => {
                let g = need!(out);
                if self.wants_grad(a) {
                    let (r, c) = (self.nodes[a.0].rows(), self.nodes[a.0].cols());
                    let x = &self.nodes[a.0].data;
                    let mut ga = vec![S::zero(); r * c];
                    for i in 0..r {
                        let row = &x[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
                        let denom = norm + eps;
                        let inv = S::one() / denom;
                        let dot: S = row.iter().zip(gr).map(|(&xv, &gv)| xv * gv).sum();
                        let o = &mut ga[i * c..(i + 1) * c];
                        if norm > S::zero() {
                            let coef = dot / (norm * denom * denom);
                            for j in 0..c {
                                o[j] = gr[j] * inv - row[j] * coef;
                            }
                        } else {
                            for j in 0..c {
                                o[j] = gr[j] * inv;
                            }
                        }
                    }
                    self.add_grad(grads, a, &ga);
                }
            }
            &Op::SubAtIndex { a, out } => {
                let g = need!(out);
                if self.wants_grad(a) {
                    self.add_grad(grads, a, &g);
                }
            }
            &Op::CrossEntropy { logits, out, label } => {
                let g = need!(out);
                if self.wants_grad(logits) {
                    let t = &self.nodes[logits.0];
                    let k = t.cols();
                    let row = &t.data;
                    let m = row.iter().copied().fold(row[0], S::max);
                    let total: S = row.iter().map(|&z| (z - m).exp()).sum();
                    let mut ga = vec![S::zero(); k];
                    let mut rest = S::zero();
                    for j in 0..k {
                        let p = (row[j] - m).exp() / total;
                        if j != label {
                            ga[j] = g[0] * p;
                            rest += p;
                        }
                    }
                    // The label coordinate is the negative sum of the other
                    // probabilities; p_label - 1 would cancel to zero once
                    // the prediction saturates.
                    ga[label] = -g[0] * rest;
                    self.add_grad(grads, logits, &ga);
                }
            }
        }
    }
}

// ── Tests ────────────────────────────────────────────────────────────────
