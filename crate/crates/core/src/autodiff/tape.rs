use std::cell::Cell;
use std::rc::Rc;

use crate::error::TensorError;
use crate::tensor::{gemm_into, Float, Tensor};

/// Additive bias given to disallowed attention logits before the softmax.
pub const MASK_BIAS: f64 = -1e9;

const ROPE_BASE: f64 = 10_000.0;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiplies performed by forward matrix products on this thread since the last reset.
pub fn mac_count() -> u64 {
    MACS.with(|m| m.get())
}

pub fn reset_mac_count() {
    MACS.with(|m| m.set(0));
}

fn count_macs(n: usize) {
    MACS.with(|m| m.set(m.get() + n as u64));
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    RowScale { x: Var, s: Var },
    Scale(Var, T),
    AddMask(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Rope {
        x: Var,
        positions: Rc<[usize]>,
        n_heads: usize,
    },
    StackRows(Vec<(Var, usize)>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
}

/// Records primitive applications in topological order for reverse-mode
/// differentiation. Nodes are only ever appended, so every input precedes
/// its consumers.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

type OpResult = Result<Var, TensorError>;

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

pub(crate) fn gelu<T: Float>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let u = c * (x + a * x * x * x);
    T::from_f64(0.5) * x * (T::ONE + u.tanh())
}

pub(crate) fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::ONE + th) + half * x * (T::ONE - th * th) * c * (T::ONE + T::from_f64(3.0) * a * x * x)
}

/// Rotation angle for pair `j` of a head of width `head_dim` at `position`.
pub(crate) fn rope_angle(position: usize, j: usize, head_dim: usize) -> f64 {
    let inv_freq = ROPE_BASE.powf(-(2.0 * j as f64) / head_dim as f64);
    position as f64 * inv_freq
}

/// Rotates adjacent pairs of every head of `row` by the angles of `position`.
/// `sign = -1` applies the inverse rotation.
pub(crate) fn rope_row<T: Float>(row: &mut [T], position: usize, n_heads: usize, sign: f64) {
    let head_dim = row.len() / n_heads;
    for h in 0..n_heads {
        for j in 0..head_dim / 2 {
            let theta = sign * rope_angle(position, j, head_dim);
            let (s, c) = theta.sin_cos();
            let (s, c) = (T::from_f64(s), T::from_f64(c));
            let i0 = h * head_dim + 2 * j;
            let (x0, x1) = (row[i0], row[i0 + 1]);
            row[i0] = x0 * c - x1 * s;
            row[i0 + 1] = x0 * s + x1 * c;
        }
    }
}

/// Layer normalisation of one row; returns (xhat, 1/std).
pub(crate) fn normalize_row<T: Float>(x: &[T], eps: T) -> (Vec<T>, T) {
    let n = T::from_f64(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::ONE / (var + eps).sqrt();
    (x.iter().map(|&v| (v - mean) * rstd).collect(), rstd)
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> OpResult {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers an input (trainable parameter or constant).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> OpResult {
        let (av, bv) = (self.value(a), self.value(b));
        let bs = bv.shape();
        if bs.len() != 2 {
            return Err(mismatch("matmul", av.shape(), bs));
        }
        let (m, k) = (av.rows(), av.cols());
        let (kb, n) = if trans_b { (bs[1], bs[0]) } else { (bs[0], bs[1]) };
        if k != kb {
            return Err(mismatch("matmul", av.shape(), bs));
        }
        let mut out = vec![T::ZERO; m * n];
        gemm_into(av.data(), false, bv.data(), trans_b, &mut out, m, k, n, T::ZERO);
        count_macs(m * k * n);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b, trans_b })
    }

    /// `a[…×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> OpResult {
        self.matmul_impl(a, b, false)
    }

    /// `a[…×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> OpResult {
        self.matmul_impl(a, b, true)
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> OpResult {
        let v = self.zip("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> OpResult {
        let v = self.zip("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> OpResult {
        let v = self.zip("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b))
    }

    /// Adds a `d`-vector to every row of `x[…×d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> OpResult {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.numel() != xv.cols() {
            return Err(mismatch("add_row", xv.shape(), rv.shape()));
        }
        let mut out = xv.clone();
        let r = rv.data().to_vec();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow { x, row })
    }

    /// Multiplies row `i` of `x` by `s[i]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> OpResult {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.numel() != xv.rows() {
            return Err(mismatch("row_scale", xv.shape(), sv.shape()));
        }
        let mut out = xv.clone();
        let scales = sv.data().to_vec();
        for (i, &c) in scales.iter().enumerate() {
            for o in out.row_mut(i) {
                *o *= c;
            }
        }
        self.push("row_scale", out, Op::RowScale { x, s })
    }

    pub fn scale(&mut self, x: Var, c: T) -> OpResult {
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, Op::Scale(x, c))
    }

    /// Adds [`MASK_BIAS`] to every logit whose `allowed` flag is false.
    pub fn add_mask(&mut self, x: Var, allowed: &[bool]) -> OpResult {
        let xv = self.value(x);
        if allowed.len() != xv.numel() {
            return Err(TensorError::LengthMismatch {
                shape: xv.shape().to_vec(),
                len: allowed.len(),
            });
        }
        let bias = T::from_f64(MASK_BIAS);
        let mut out = xv.clone();
        for (o, &ok) in out.data_mut().iter_mut().zip(allowed) {
            if !ok {
                *o += bias;
            }
        }
        self.push("add_mask", out, Op::AddMask(x))
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> OpResult {
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let m = row.iter().copied().fold(row[0], T::max);
            let mut z = T::ZERO;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        self.push("softmax", out, Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> OpResult {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.numel() != d || bv.numel() != d {
            return Err(mismatch("layer_norm", xv.shape(), gv.shape()));
        }
        let mut out = xv.clone();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let (h, r) = normalize_row(xv.row(i), eps);
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = h[j] * gv.data()[j] + bv.data()[j];
            }
            xhat.extend(h);
            rstd.push(r);
        }
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> OpResult {
        let out = self.value(x).map(gelu);
        self.push("gelu", out, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> OpResult {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x))
    }

    /// Rotary position encoding; row `i` is rotated by `positions[i]`.
    pub fn rope(&mut self, x: Var, positions: Rc<[usize]>, n_heads: usize) -> OpResult {
        let xv = self.value(x);
        if positions.len() != xv.rows() || !xv.cols().is_multiple_of(2 * n_heads) {
            return Err(TensorError::ShapeMismatch {
                op: "rope",
                lhs: xv.shape().to_vec(),
                rhs: vec![positions.len(), n_heads],
            });
        }
        let mut out = xv.clone();
        for (i, &p) in positions.iter().enumerate() {
            rope_row(out.row_mut(i), p, n_heads, 1.0);
        }
        self.push("rope", out, Op::Rope { x, positions, n_heads })
    }

    /// Builds a matrix whose row `i` is row `sources[i].1` of `sources[i].0`.
    pub fn stack_rows(&mut self, sources: Vec<(Var, usize)>) -> OpResult {
        let Some(&(first, _)) = sources.first() else {
            return Err(TensorError::BadShape(vec![0]));
        };
        let d = self.value(first).cols();
        let mut data = Vec::with_capacity(sources.len() * d);
        for &(v, r) in &sources {
            let t = self.value(v);
            if t.cols() != d {
                return Err(mismatch("stack_rows", self.value(first).shape(), t.shape()));
            }
            if r >= t.rows() {
                return Err(TensorError::IndexOutOfRange {
                    op: "stack_rows",
                    index: r,
                    len: t.rows(),
                });
            }
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::new([sources.len(), d], data)?;
        self.push("stack_rows", out, Op::StackRows(sources))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> OpResult {
        let xv = self.value(x);
        if start + len > xv.cols() || len == 0 {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                len: xv.cols(),
            });
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for i in 0..xv.rows() {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let out = Tensor::new([xv.rows(), len], data)?;
        self.push("slice_cols", out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> OpResult {
        let Some(&first) = parts.first() else {
            return Err(TensorError::BadShape(vec![0]));
        };
        let rows = self.value(first).rows();
        let mut width = 0;
        for &p in &parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(mismatch("concat_cols", self.value(first).shape(), t.shape()));
            }
            width += t.cols();
        }
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            for &p in &parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new([rows, width], data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> OpResult {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> OpResult {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> OpResult {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / T::from_f64(xv.numel() as f64));
        self.push("mean", out, Op::Mean(x))
    }

    /// Mean next-token negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> OpResult {
        let lv = self.value(logits);
        let (n, v) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(TensorError::LengthMismatch {
                shape: lv.shape().to_vec(),
                len: targets.len(),
            });
        }
        let mut probs = Vec::with_capacity(n * v);
        let mut total = T::ZERO;
        for (i, &tgt) in targets.iter().enumerate() {
            if tgt >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: tgt,
                    len: v,
                });
            }
            let row = lv.row(i);
            let m = row.iter().copied().fold(row[0], T::max);
            let z: T = row.iter().map(|&x| (x - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[tgt];
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        let out = Tensor::scalar(total / T::from_f64(n as f64));
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }
}
