//! Reverse-mode automatic differentiation over a dynamically recorded graph.
//!
//! A [`Graph`] records every op as it executes; node creation order is a
//! topological order, so [`Graph::backward`] walks nodes in exact reverse
//! creation order and accumulates gradients additively across fan-out.
//! Every forward op checks its output for NaN/Inf and fails instead of
//! propagating poison. Graphs are single-threaded and rebuilt per step.

pub mod gradcheck;
pub mod kernels;

use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Additive mask value standing in for -inf in attention logits.
pub const NEG_MASK: f64 = -1e9;

/// Ignore sentinel for cross-entropy targets (PAD positions).
pub const IGNORE_INDEX: usize = usize::MAX;

/// Lightweight handle to a graph node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddMask(Var),
    MulMask(Var, Tensor<T>),
    Exp(Var),
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    Transpose(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad_l: usize,
        cin: usize,
        len: usize,
        cout: usize,
        kernel: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    RowGather {
        x: Var,
        ids: Vec<usize>,
    },
    RowSlice {
        x: Var,
        start: usize,
    },
    ColSlice {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    StackScalars(Vec<Var>),
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    SoftmaxRows(Var),
    LseRows(Var),
    LseAll(Var),
    RowNormalize {
        x: Var,
        norms: Vec<T>,
    },
    CosineSim {
        a: Var,
        b: Var,
        na: T,
        nb: T,
        dot: T,
    },
    Dot(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mean: bool,
        count: usize,
    },
    BceLogits {
        logits: Var,
        targets: Tensor<T>,
    },
    Pick {
        x: Var,
        index: usize,
    },
    AddRowBroadcast {
        x: Var,
        row: Var,
    },
    MulScalarVar {
        x: Var,
        s: Var,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddMask(..) => "add_mask",
            Op::MulMask(..) => "mul_mask",
            Op::Exp(..) => "exp",
            Op::Matmul(..) => "matmul",
            Op::MatmulNT(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::Conv1d { .. } => "conv1d",
            Op::GroupNorm { .. } => "group_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::RowGather { .. } => "row_gather",
            Op::RowSlice { .. } => "row_slice",
            Op::ColSlice { .. } => "col_slice",
            Op::ConcatCols(..) => "concat_cols",
            Op::StackRows(..) => "stack_rows",
            Op::StackScalars(..) => "stack_scalars",
            Op::MeanRows(..) => "mean_rows",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::SoftmaxRows(..) => "softmax",
            Op::LseRows(..) => "logsumexp",
            Op::LseAll(..) => "logsumexp",
            Op::RowNormalize { .. } => "row_l2_normalize",
            Op::CosineSim { .. } => "cosine_similarity",
            Op::Dot(..) => "dot",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BceLogits { .. } => "bce_logits",
            Op::Pick { .. } => "pick",
            Op::AddRowBroadcast { .. } => "add_row_broadcast",
            Op::MulScalarVar { .. } => "mul_scalar",
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A dynamically recorded computation graph.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), grads: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if value.numel() == 0 {
            return Err(Error::Empty { op: op.name() });
        }
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Ok(Var(nodes.len() - 1))
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn any_requires(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.requires(*v))
    }

    /// Clone out the value of a node.
    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Read a node value without cloning.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> Result<T> {
        self.nodes.borrow()[v.0].value.item()
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Constant input; gradients do not flow into it.
    pub fn leaf(&self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; `backward` fills its gradient.
    pub fn param(&self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&self, v: T) -> Result<Var> {
        self.leaf(Tensor::scalar(v))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn zip_same_shape(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                op,
                alloc::format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_vec(ta.shape().to_vec(), data)?)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same_shape("add", a, b, |x, y| x + y)?;
        self.push(out, Op::Add(a, b), self.any_requires(&[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same_shape("sub", a, b, |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), self.any_requires(&[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same_shape("mul", a, b, |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), self.any_requires(&[a, b]))
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let out = self.with_value(x, |t| t.map(|v| v * c));
        self.push(out, Op::Scale(x, c), self.requires(x))
    }

    /// Add a constant tensor (e.g. an attention mask) elementwise.
    pub fn add_mask(&self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let out = self.with_value(x, |t| {
            if t.shape() != mask.shape() {
                return Err(Error::shape(
                    "add_mask",
                    alloc::format!("{:?} vs {:?}", t.shape(), mask.shape()),
                ));
            }
            let data = t.data().iter().zip(mask.data()).map(|(&a, &m)| a + m).collect();
            Tensor::from_vec(t.shape().to_vec(), data)
        })?;
        self.push(out, Op::AddMask(x), self.requires(x))
    }

    /// Multiply by a constant tensor (dropout masks); no gradient to the mask.
    pub fn mul_mask(&self, x: Var, mask: Tensor<T>) -> Result<Var> {
        let out = self.with_value(x, |t| {
            if t.shape() != mask.shape() {
                return Err(Error::shape(
                    "mul_mask",
                    alloc::format!("{:?} vs {:?}", t.shape(), mask.shape()),
                ));
            }
            let data = t.data().iter().zip(mask.data()).map(|(&a, &m)| a * m).collect();
            Tensor::from_vec(t.shape().to_vec(), data)
        })?;
        let req = self.requires(x);
        self.push(out, Op::MulMask(x, mask), req)
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        let out = self.with_value(x, |t| t.map(|v| v.exp()));
        self.push(out, Op::Exp(x), self.requires(x))
    }

    pub fn gelu(&self, x: Var) -> Result<Var> {
        let inv_sqrt2 = T::from_f64(core::f64::consts::FRAC_1_SQRT_2);
        let half = T::from_f64(0.5);
        let out = self.with_value(x, |t| {
            t.map(|v| half * v * (T::ONE + (v * inv_sqrt2).erf()))
        });
        self.push(out, Op::Gelu(x), self.requires(x))
    }

    // ── Linear algebra ───────────────────────────────────────────────

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let nodes = self.nodes.borrow();
        let t = &nodes[v.0].value;
        match t.ndim() {
            1 => Ok((1, t.shape()[0])),
            2 => Ok((t.shape()[0], t.shape()[1])),
            _ => Err(Error::shape(op, alloc::format!("expected 1-D/2-D, got {:?}", t.shape()))),
        }
    }

    /// a[m,k] @ b[k,n].
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", alloc::format!("inner dims {k} vs {k2}")));
        }
        let out = {
            let nodes = self.nodes.borrow();
            kernels::matmul(nodes[a.0].value.data(), nodes[b.0].value.data(), m, k, n)
        };
        self.push(Tensor::matrix(m, n, out)?, Op::Matmul(a, b), self.any_requires(&[a, b]))
    }

    /// a[m,k] @ b[n,k]^T — row-against-row products.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", alloc::format!("inner dims {k} vs {k2}")));
        }
        let out = {
            let nodes = self.nodes.borrow();
            kernels::matmul_nt(nodes[a.0].value.data(), nodes[b.0].value.data(), m, k, n)
        };
        self.push(Tensor::matrix(m, n, out)?, Op::MatmulNT(a, b), self.any_requires(&[a, b]))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", x)?;
        let out = self.with_value(x, |t| kernels::transpose(t.data(), r, c));
        self.push(Tensor::matrix(c, r, out)?, Op::Transpose(x), self.requires(x))
    }

    /// x[cin,len] * w[cout,cin,k] + b, with stride and explicit padding.
    pub fn conv1d(&self, x: Var, w: Var, b: Var, stride: usize, pad_l: usize, pad_r: usize) -> Result<Var> {
        let (cin, len, cout, kernel) = {
            let nodes = self.nodes.borrow();
            let xs = nodes[x.0].value.shape();
            let ws = nodes[w.0].value.shape();
            if xs.len() != 2 || ws.len() != 3 {
                return Err(Error::shape(
                    "conv1d",
                    alloc::format!("x {:?} (want 2-D), w {:?} (want 3-D)", xs, ws),
                ));
            }
            if ws[1] != xs[0] {
                return Err(Error::shape(
                    "conv1d",
                    alloc::format!("input channels {} vs weight {}", xs[0], ws[1]),
                ));
            }
            (xs[0], xs[1], ws[0], ws[2])
        };
        let lout = kernels::conv_out_len(len, kernel, stride, pad_l + pad_r)
            .ok_or(Error::TooShort { needed: kernel.saturating_sub(pad_l + pad_r), got: len })?;
        let out = {
            let nodes = self.nodes.borrow();
            kernels::conv1d(
                nodes[x.0].value.data(),
                nodes[w.0].value.data(),
                nodes[b.0].value.data(),
                cin,
                len,
                cout,
                kernel,
                stride,
                pad_l,
                pad_r,
            )
        };
        self.push(
            Tensor::matrix(cout, lout, out)?,
            Op::Conv1d { x, w, b, stride, pad_l, cin, len, cout, kernel },
            self.any_requires(&[x, w, b]),
        )
    }

    /// Group normalization over x[channels, len]; gamma/beta are per-channel.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let eps = T::from_f64(eps);
        let (c, l) = self.dims2("group_norm", x)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape("group_norm", alloc::format!("{c} channels, {groups} groups")));
        }
        let cg = c / groups;
        let (out, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.0].value.data();
            let gm = nodes[gamma.0].value.data();
            let bt = nodes[beta.0].value.data();
            if gm.len() != c || bt.len() != c {
                return Err(Error::shape("group_norm", alloc::format!("gamma/beta len vs {c} channels")));
            }
            let mut out = vec![T::ZERO; c * l];
            let mut xhat = vec![T::ZERO; c * l];
            let mut inv_std = vec![T::ZERO; groups];
            let n = T::from_f64((cg * l) as f64);
            for g in 0..groups {
                let span = g * cg * l..(g + 1) * cg * l;
                let mut mean = T::ZERO;
                for &v in &xd[span.clone()] {
                    mean += v;
                }
                mean = mean / n;
                let mut var = T::ZERO;
                for &v in &xd[span.clone()] {
                    let d = v - mean;
                    var += d * d;
                }
                var = var / n;
                let inv = T::ONE / (var + eps).sqrt();
                inv_std[g] = inv;
                for i in span {
                    let ch = i / l;
                    let h = (xd[i] - mean) * inv;
                    xhat[i] = h;
                    out[i] = gm[ch] * h + bt[ch];
                }
            }
            (out, xhat, inv_std)
        };
        self.push(
            Tensor::matrix(c, l, out)?,
            Op::GroupNorm { x, gamma, beta, groups, xhat: Tensor::matrix(c, l, xhat)?, inv_std },
            self.any_requires(&[x, gamma, beta]),
        )
    }

    /// Layer normalization over the last axis of x[rows, d].
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let eps = T::from_f64(eps);
        let (r, d) = self.dims2("layer_norm", x)?;
        let (out, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.0].value.data();
            let gm = nodes[gamma.0].value.data();
            let bt = nodes[beta.0].value.data();
            if gm.len() != d || bt.len() != d {
                return Err(Error::shape("layer_norm", alloc::format!("gamma/beta len vs {d} features")));
            }
            let mut out = vec![T::ZERO; r * d];
            let mut xhat = vec![T::ZERO; r * d];
            let mut inv_std = vec![T::ZERO; r];
            let n = T::from_f64(d as f64);
            for row in 0..r {
                let span = row * d..(row + 1) * d;
                let mut mean = T::ZERO;
                for &v in &xd[span.clone()] {
                    mean += v;
                }
                mean = mean / n;
                let mut var = T::ZERO;
                for &v in &xd[span.clone()] {
                    let dv = v - mean;
                    var += dv * dv;
                }
                var = var / n;
                let inv = T::ONE / (var + eps).sqrt();
                inv_std[row] = inv;
                for (j, i) in span.enumerate() {
                    let h = (xd[i] - mean) * inv;
                    xhat[i] = h;
                    out[i] = gm[j] * h + bt[j];
                }
            }
            (out, xhat, inv_std)
        };
        let shape = self.shape_of(x);
        self.push(
            Tensor::from_vec(shape, out)?,
            Op::LayerNorm { x, gamma, beta, xhat: Tensor::matrix(r, d, xhat)?, inv_std },
            self.any_requires(&[x, gamma, beta]),
        )
    }

    // ── Indexing / reshaping ─────────────────────────────────────────

    /// Gather rows of a table by index (embedding lookup).
    pub fn row_gather(&self, table: Var, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Empty { op: "row_gather" });
        }
        let (r, c) = self.dims2("row_gather", table)?;
        let out = {
            let nodes = self.nodes.borrow();
            let td = nodes[table.0].value.data();
            let mut out = Vec::with_capacity(ids.len() * c);
            for &id in ids {
                if id >= r {
                    return Err(Error::invalid(alloc::format!("row_gather: index {id} out of {r}")));
                }
                out.extend_from_slice(&td[id * c..(id + 1) * c]);
            }
            out
        };
        self.push(
            Tensor::matrix(ids.len(), c, out)?,
            Op::RowGather { x: table, ids: ids.to_vec() },
            self.requires(table),
        )
    }

    pub fn row_slice(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2("row_slice", x)?;
        if start >= end || end > r {
            return Err(Error::shape("row_slice", alloc::format!("[{start},{end}) of {r} rows")));
        }
        let out = self.with_value(x, |t| t.data()[start * c..end * c].to_vec());
        self.push(Tensor::matrix(end - start, c, out)?, Op::RowSlice { x, start }, self.requires(x))
    }

    pub fn col_slice(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2("col_slice", x)?;
        if start >= end || end > c {
            return Err(Error::shape("col_slice", alloc::format!("[{start},{end}) of {c} cols")));
        }
        let w = end - start;
        let out = self.with_value(x, |t| {
            let mut out = Vec::with_capacity(r * w);
            for row in 0..r {
                out.extend_from_slice(&t.data()[row * c + start..row * c + end]);
            }
            out
        });
        self.push(Tensor::matrix(r, w, out)?, Op::ColSlice { x, start }, self.requires(x))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty { op: "concat_cols" });
        }
        let (r, _) = self.dims2("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (rp, cp) = self.dims2("concat_cols", p)?;
            if rp != r {
                return Err(Error::shape("concat_cols", alloc::format!("rows {rp} vs {r}")));
            }
            widths.push(cp);
            total += cp;
        }
        let out = {
            let nodes = self.nodes.borrow();
            let mut out = Vec::with_capacity(r * total);
            for row in 0..r {
                for (i, &p) in parts.iter().enumerate() {
                    let c = widths[i];
                    out.extend_from_slice(&nodes[p.0].value.data()[row * c..(row + 1) * c]);
                }
            }
            out
        };
        self.push(Tensor::matrix(r, total, out)?, Op::ConcatCols(parts.to_vec()), self.any_requires(parts))
    }

    /// Stack 1-D vectors (or single-row matrices) into a matrix.
    pub fn stack_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty { op: "stack_rows" });
        }
        let (_, d) = self.dims2("stack_rows", parts[0])?;
        let out = {
            let nodes = self.nodes.borrow();
            let mut out = Vec::with_capacity(parts.len() * d);
            for &p in parts {
                let t = &nodes[p.0].value;
                if t.numel() != d {
                    return Err(Error::shape("stack_rows", alloc::format!("{} vs {d}", t.numel())));
                }
                out.extend_from_slice(t.data());
            }
            out
        };
        self.push(Tensor::matrix(parts.len(), d, out)?, Op::StackRows(parts.to_vec()), self.any_requires(parts))
    }

    /// Stack scalar nodes into a vector.
    pub fn stack_scalars(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty { op: "stack_scalars" });
        }
        let out = {
            let nodes = self.nodes.borrow();
            let mut out = Vec::with_capacity(parts.len());
            for &p in parts {
                out.push(nodes[p.0].value.item()?);
            }
            out
        };
        self.push(Tensor::vector(out), Op::StackScalars(parts.to_vec()), self.any_requires(parts))
    }

    // ── Reductions ───────────────────────────────────────────────────

    /// Column means of x[n, d] -> [d]. Rows accumulate in ascending index
    /// order, then one divide; callers relying on bit-equality (the global
    /// ECG embedding) reproduce exactly this order.
    pub fn mean_rows(&self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("mean_rows", x)?;
        let out = self.with_value(x, |t| {
            let mut acc = vec![T::ZERO; c];
            for row in 0..r {
                for (a, &v) in acc.iter_mut().zip(t.row(row)) {
                    *a += v;
                }
            }
            let inv = T::ONE / T::from_f64(r as f64);
            for a in acc.iter_mut() {
                *a *= inv;
            }
            acc
        });
        self.push(Tensor::vector(out), Op::MeanRows(x), self.requires(x))
    }

    pub fn sum_all(&self, x: Var) -> Result<Var> {
        let out = self.with_value(x, |t| {
            let mut acc = T::ZERO;
            for &v in t.data() {
                acc += v;
            }
            acc
        });
        self.push(Tensor::scalar(out), Op::SumAll(x), self.requires(x))
    }

    pub fn mean_all(&self, x: Var) -> Result<Var> {
        let out = self.with_value(x, |t| {
            let mut acc = T::ZERO;
            for &v in t.data() {
                acc += v;
            }
            acc / T::from_f64(t.numel() as f64)
        });
        self.push(Tensor::scalar(out), Op::MeanAll(x), self.requires(x))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("softmax", x)?;
        let out = self.with_value(x, |t| {
            let mut data = t.data().to_vec();
            for row in 0..r {
                kernels::softmax_row(&mut data[row * c..(row + 1) * c]);
            }
            data
        });
        let shape = self.shape_of(x);
        self.push(Tensor::from_vec(shape, out)?, Op::SoftmaxRows(x), self.requires(x))
    }

    /// Softmax along `axis` of a 1-D or 2-D tensor.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let ndim = self.with_value(x, |t| t.ndim());
        match (ndim, axis) {
            (0, _) | (1, 0) => self.softmax_rows(x),
            (2, 1) => self.softmax_rows(x),
            (2, 0) => {
                let t = self.transpose(x)?;
                let s = self.softmax_rows(t)?;
                self.transpose(s)
            }
            _ => Err(Error::invalid(alloc::format!("softmax: axis {axis} invalid for {ndim}-D"))),
        }
    }

    /// Row-wise log(sum(exp)) of x[n, d] -> [n].
    pub fn logsumexp_rows(&self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("logsumexp", x)?;
        let out = self.with_value(x, |t| {
            (0..r).map(|row| kernels::logsumexp_slice(&t.data()[row * c..(row + 1) * c])).collect()
        });
        self.push(Tensor::vector(out), Op::LseRows(x), self.requires(x))
    }

    /// log(sum(exp)) over every element -> scalar.
    pub fn logsumexp_all(&self, x: Var) -> Result<Var> {
        let out = self.with_value(x, |t| kernels::logsumexp_slice(t.data()));
        self.push(Tensor::scalar(out), Op::LseAll(x), self.requires(x))
    }

    /// log(sum(exp)) along `axis` of a 1-D or 2-D tensor.
    pub fn logsumexp(&self, x: Var, axis: usize) -> Result<Var> {
        let ndim = self.with_value(x, |t| t.ndim());
        match (ndim, axis) {
            (0, _) | (1, 0) => self.logsumexp_all(x),
            (2, 1) => self.logsumexp_rows(x),
            (2, 0) => {
                let t = self.transpose(x)?;
                self.logsumexp_rows(t)
            }
            _ => Err(Error::invalid(alloc::format!("logsumexp: axis {axis} invalid for {ndim}-D"))),
        }
    }

    // ── Similarity ───────────────────────────────────────────────────

    /// Normalize each row to unit L2 norm; rows below the 1e-8 floor error.
    pub fn row_l2_normalize(&self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("row_l2_normalize", x)?;
        let floor = T::from_f64(1e-8);
        let (out, norms) = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.0].value.data();
            let mut out = vec![T::ZERO; r * c];
            let mut norms = vec![T::ZERO; r];
            for row in 0..r {
                let xr = &xd[row * c..(row + 1) * c];
                let n = kernels::l2_norm(xr);
                if n < floor {
                    return Err(Error::ZeroNorm { op: "row_l2_normalize" });
                }
                norms[row] = n;
                let inv = T::ONE / n;
                for (o, &v) in out[row * c..(row + 1) * c].iter_mut().zip(xr) {
                    *o = v * inv;
                }
            }
            (out, norms)
        };
        let shape = self.shape_of(x);
        self.push(Tensor::from_vec(shape, out)?, Op::RowNormalize { x, norms }, self.requires(x))
    }

    /// Cosine similarity of two vectors -> scalar in [-1, 1].
    pub fn cosine_sim(&self, a: Var, b: Var) -> Result<Var> {
        let floor = T::from_f64(1e-8);
        let (na, nb, d, c) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.numel() != tb.numel() {
                return Err(Error::shape(
                    "cosine_similarity",
                    alloc::format!("{} vs {}", ta.numel(), tb.numel()),
                ));
            }
            let na = kernels::l2_norm(ta.data());
            let nb = kernels::l2_norm(tb.data());
            if na < floor || nb < floor {
                return Err(Error::ZeroNorm { op: "cosine_similarity" });
            }
            let d = kernels::dot(ta.data(), tb.data());
            (na, nb, d, d / (na * nb))
        };
        self.push(
            Tensor::scalar(c),
            Op::CosineSim { a, b, na, nb, dot: d },
            self.any_requires(&[a, b]),
        )
    }

    pub fn dot(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.numel() != tb.numel() {
                return Err(Error::shape("dot", alloc::format!("{} vs {}", ta.numel(), tb.numel())));
            }
            kernels::dot(ta.data(), tb.data())
        };
        self.push(Tensor::scalar(out), Op::Dot(a, b), self.any_requires(&[a, b]))
    }

    // ── Losses ───────────────────────────────────────────────────────

    /// Cross-entropy over logits[n, vocab] against integer targets; rows with
    /// target == IGNORE_INDEX are excluded. `mean` divides by the number of
    /// counted rows, otherwise the row losses are summed.
    pub fn cross_entropy_logits(&self, logits: Var, targets: &[usize], mean: bool) -> Result<Var> {
        let (r, c) = self.dims2("cross_entropy", logits)?;
        if targets.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                alloc::format!("{} targets vs {r} rows", targets.len()),
            ));
        }
        let mut count = 0usize;
        let mut total = T::ZERO;
        {
            let nodes = self.nodes.borrow();
            let xd = nodes[logits.0].value.data();
            for (row, &t) in targets.iter().enumerate() {
                if t == IGNORE_INDEX {
                    continue;
                }
                if t >= c {
                    return Err(Error::invalid(alloc::format!("cross_entropy: target {t} out of {c}")));
                }
                let xr = &xd[row * c..(row + 1) * c];
                total += kernels::logsumexp_slice(xr) - xr[t];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Empty { op: "cross_entropy" });
        }
        let out = if mean { total / T::from_f64(count as f64) } else { total };
        self.push(
            Tensor::scalar(out),
            Op::CrossEntropy { logits, targets: targets.to_vec(), mean, count },
            self.requires(logits),
        )
    }

    /// Mean binary cross-entropy with logits against multi-hot targets in
    /// [0, 1]; computed in the numerically stable softplus form.
    pub fn bce_logits(&self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let total = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[logits.0].value;
            if xv.shape() != targets.shape() {
                return Err(Error::shape(
                    "bce_logits",
                    alloc::format!("{:?} vs {:?}", xv.shape(), targets.shape()),
                ));
            }
            let mut total = T::ZERO;
            for (&z, &y) in xv.data().iter().zip(targets.data()) {
                // max(z,0) - y*z + ln(1 + exp(-|z|))
                let m = z.maximum(T::ZERO);
                total += m - y * z + (T::ONE + (-z.abs()).exp()).ln();
            }
            total / T::from_f64(xv.numel() as f64)
        };
        let req = self.requires(logits);
        self.push(Tensor::scalar(total), Op::BceLogits { logits, targets }, req)
    }

    /// Extract element `index` of a vector as a scalar node.
    pub fn pick(&self, x: Var, index: usize) -> Result<Var> {
        let out = self.with_value(x, |t| {
            if index >= t.numel() {
                return Err(Error::invalid(alloc::format!("pick: {index} out of {}", t.numel())));
            }
            Ok(t.data()[index])
        })?;
        self.push(Tensor::scalar(out), Op::Pick { x, index }, self.requires(x))
    }

    /// x[n, d] + row[d] broadcast over rows (bias add).
    pub fn add_row_broadcast(&self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims2("add_row_broadcast", x)?;
        let out = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.0].value.data();
            let rd = nodes[row.0].value.data();
            if rd.len() != c {
                return Err(Error::shape("add_row_broadcast", alloc::format!("row {} vs {c} cols", rd.len())));
            }
            let mut out = Vec::with_capacity(r * c);
            for rr in 0..r {
                for (j, &v) in xd[rr * c..(rr + 1) * c].iter().enumerate() {
                    out.push(v + rd[j]);
                }
            }
            out
        };
        let shape = self.shape_of(x);
        self.push(Tensor::from_vec(shape, out)?, Op::AddRowBroadcast { x, row }, self.any_requires(&[x, row]))
    }

    /// Multiply a tensor by a scalar node (learnable temperature paths).
    pub fn mul_scalar_var(&self, x: Var, s: Var) -> Result<Var> {
        let sv = self.item(s)?;
        let out = self.with_value(x, |t| t.map(|v| v * sv));
        self.push(out, Op::MulScalarVar { x, s }, self.any_requires(&[x, s]))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse-mode gradient pass from a scalar loss. Gradients accumulate
    /// additively across fan-out and are retrievable per node afterwards.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::invalid(alloc::format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape().to_vec(), T::ONE));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            backward_op(&nodes, id, &g, &mut grads);
            // leaf gradients are the pass's output; intermediates are freed
            // as soon as they have been propagated
            if matches!(nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last `backward` for a leaf node, if it received one.
    /// Intermediate gradients are dropped during the pass.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads.borrow().get(v.0).and_then(|g| g.clone())
    }

    /// Gradient or zeros: parameters off the loss path get zero gradient.
    pub fn grad_or_zero(&self, v: Var) -> Tensor<T> {
        self.grad(v).unwrap_or_else(|| Tensor::zeros(self.shape_of(v)))
    }
}

fn acc_grad<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    delta: Tensor<T>,
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(t) => {
            for (a, &b) in t.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(delta),
    }
}

fn rows_cols<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

#[allow(clippy::too_many_lines)]
fn backward_op<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let val = |v: Var| -> &Tensor<T> { &nodes[v.id()].value };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_grad(nodes, grads, *a, g.clone());
            acc_grad(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            acc_grad(nodes, grads, *a, g.clone());
            acc_grad(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let ga = Tensor::from_vec(
                g.shape().to_vec(),
                g.data().iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect(),
            )
            .expect("shape");
            let gb = Tensor::from_vec(
                g.shape().to_vec(),
                g.data().iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect(),
            )
            .expect("shape");
            acc_grad(nodes, grads, *a, ga);
            acc_grad(nodes, grads, *b, gb);
        }
        Op::Scale(x, c) => {
            let c = *c;
            acc_grad(nodes, grads, *x, g.map(|v| v * c));
        }
        Op::AddMask(x) => acc_grad(nodes, grads, *x, g.clone()),
        Op::MulMask(x, mask) => {
            let gx = Tensor::from_vec(
                g.shape().to_vec(),
                g.data().iter().zip(mask.data()).map(|(&a, &m)| a * m).collect(),
            )
            .expect("shape");
            acc_grad(nodes, grads, *x, gx);
        }
        Op::Exp(x) => {
            let out = &nodes[id].value;
            let gx = Tensor::from_vec(
                g.shape().to_vec(),
                g.data().iter().zip(out.data()).map(|(&a, &y)| a * y).collect(),
            )
            .expect("shape");
            acc_grad(nodes, grads, *x, gx);
        }
        Op::Gelu(x) => {
            let inv_sqrt2 = T::from_f64(core::f64::consts::FRAC_1_SQRT_2);
            let inv_sqrt_2pi = T::from_f64(0.398_942_280_401_432_7);
            let half = T::from_f64(0.5);
            let xv = val(*x);
            let gx: Vec<T> = g
                .data()
                .iter()
                .zip(xv.data())
                .map(|(&gv, &v)| {
                    let phi = half * (T::ONE + (v * inv_sqrt2).erf());
                    let pdf = (-(v * v) * half).exp() * inv_sqrt_2pi;
                    gv * (phi + v * pdf)
                })
                .collect();
            acc_grad(nodes, grads, *x, Tensor::from_vec(g.shape().to_vec(), gx).expect("shape"));
        }
        Op::Matmul(a, b) => {
            let (m, k) = rows_cols(val(*a));
            let n = val(*b).cols();
            if nodes[a.id()].requires_grad {
                let ga = kernels::matmul_nt(g.data(), val(*b).data(), m, n, k);
                acc_grad(nodes, grads, *a, Tensor::from_vec(val(*a).shape().to_vec(), ga).expect("shape"));
            }
            if nodes[b.id()].requires_grad {
                let mut gb = vec![T::ZERO; k * n];
                kernels::matmul_tn_acc(val(*a).data(), g.data(), &mut gb, m, k, n);
                acc_grad(nodes, grads, *b, Tensor::from_vec(val(*b).shape().to_vec(), gb).expect("shape"));
            }
        }
        Op::MatmulNT(a, b) => {
            let (m, k) = rows_cols(val(*a));
            let n = val(*b).rows();
            if nodes[a.id()].requires_grad {
                let ga = kernels::matmul(g.data(), val(*b).data(), m, n, k);
                acc_grad(nodes, grads, *a, Tensor::from_vec(val(*a).shape().to_vec(), ga).expect("shape"));
            }
            if nodes[b.id()].requires_grad {
                let mut gb = vec![T::ZERO; n * k];
                kernels::matmul_tn_acc(g.data(), val(*a).data(), &mut gb, m, n, k);
                acc_grad(nodes, grads, *b, Tensor::from_vec(val(*b).shape().to_vec(), gb).expect("shape"));
            }
        }
        Op::Transpose(x) => {
            let (r, c) = rows_cols(g);
            let gx = kernels::transpose(g.data(), r, c);
            acc_grad(nodes, grads, *x, Tensor::from_vec(val(*x).shape().to_vec(), gx).expect("shape"));
        }
        Op::Conv1d { x, w, b, stride, pad_l, cin, len, cout, kernel } => {
            let mut dx = vec![T::ZERO; cin * len];
            let mut dw = vec![T::ZERO; cout * cin * kernel];
            let mut db = vec![T::ZERO; *cout];
            kernels::conv1d_backward(
                g.data(),
                val(*x).data(),
                val(*w).data(),
                *cin,
                *len,
                *cout,
                *kernel,
                *stride,
                *pad_l,
                &mut dx,
                &mut dw,
                &mut db,
            );
            acc_grad(nodes, grads, *x, Tensor::from_vec(val(*x).shape().to_vec(), dx).expect("shape"));
            acc_grad(nodes, grads, *w, Tensor::from_vec(val(*w).shape().to_vec(), dw).expect("shape"));
            acc_grad(nodes, grads, *b, Tensor::from_vec(val(*b).shape().to_vec(), db).expect("shape"));
        }
        Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
            let (c, l) = rows_cols(val(*x));
            let cg = c / groups;
            let gm = val(*gamma).data();
            let mut dx = vec![T::ZERO; c * l];
            let mut dgamma = vec![T::ZERO; c];
            let mut dbeta = vec![T::ZERO; c];
            let n = T::from_f64((cg * l) as f64);
            for gi in 0..*groups {
                let span = gi * cg * l..(gi + 1) * cg * l;
                let mut m1 = T::ZERO;
                let mut m2 = T::ZERO;
                for i in span.clone() {
                    let ch = i / l;
                    let dxh = g.data()[i] * gm[ch];
                    m1 += dxh;
                    m2 += dxh * xhat.data()[i];
                }
                m1 = m1 / n;
                m2 = m2 / n;
                let inv = inv_std[gi];
                for i in span {
                    let ch = i / l;
                    let dxh = g.data()[i] * gm[ch];
                    dx[i] = inv * (dxh - m1 - xhat.data()[i] * m2);
                    dgamma[ch] += g.data()[i] * xhat.data()[i];
                    dbeta[ch] += g.data()[i];
                }
            }
            acc_grad(nodes, grads, *x, Tensor::from_vec(val(*x).shape().to_vec(), dx).expect("shape"));
            acc_grad(nodes, grads, *gamma, Tensor::vector(dgamma));
            acc_grad(nodes, grads, *beta, Tensor::vector(dbeta));
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let (r, d) = rows_cols(val(*x));
            let gm = val(*gamma).data();
            let mut dx = vec![T::ZERO; r * d];
            let mut dgamma = vec![T::ZERO; d];
            let mut dbeta = vec![T::ZERO; d];
            let n = T::from_f64(d as f64);
            for row in 0..r {
                let span = row * d..(row + 1) * d;
                let mut m1 = T::ZERO;
                let mut m2 = T::ZERO;
                for (j, i) in span.clone().enumerate() {
                    let dxh = g.data()[i] * gm[j];
                    m1 += dxh;
                    m2 += dxh * xhat.data()[i];
                }
                m1 = m1 / n;
                m2 = m2 / n;
                let inv = inv_std[row];
                for (j, i) in span.enumerate() {
                    let dxh = g.data()[i] * gm[j];
                    dx[i] = inv * (dxh - m1 - xhat.data()[i] * m2);
                    dgamma[j] += g.data()[i] * xhat.data()[i];
                    dbeta[j] += g.data()[i];
                }
            }
            acc_grad(nodes, grads, *x, Tensor::from_vec(val(*x).shape().to_vec(), dx).expect("shape"));
            acc_grad(nodes, grads, *gamma, Tensor::vector(dgamma));
            acc_grad(nodes, grads, *beta, Tensor::vector(dbeta));
        }
        Op::RowGather { x, ids } => {
            let (r, c) = rows_cols(val(*x));
            let mut dt = vec![T::ZERO; r * c];
            for (i, &id_) in ids.iter().enumerate() {
                for j in 0..c {
                    dt[id_ * c + j] += g.data()[i * c + j];
                }
            }
            acc_grad(nodes, grads, *x, Tensor::from_vec(val(*x).shape().to_vec(), dt).expect("shape"));
        }
        Op::RowSlice { x, start } => {
            let (_, c) = rows_cols(val(*x));
            let mut dx = vec![T::ZERO; val(*x).numel()];
            let off = start * c;
            for (i, &gv) in g.data().iter().enumerate() {
                dx[off + i] += gv;
            }
            acc_grad(nodes, grads, *x, Tensor::from_vec(val(*x).shape().to_vec(), dx).expect("shape"));
        }
        Op::ColSlice { x, start } => {
            let (r, c) = rows_cols(val(*x));
            let w = g.cols();
            let mut dx = vec![T::ZERO; r * c];
            for row in 0..r {
                for j in 0..w {
                    dx[row * c + start + j] += g.data()[row * w + j];
                }
            }
            acc_grad(nodes, grads, *x, Tensor::from_vec(val(*x).shape().to_vec(), dx).expect("shape"));
        }
        Op::ConcatCols(parts) => {
            let r = g.rows();
            let total = g.cols();
            let mut off = 0usize;
            for &p in parts {
                let c = val(p).cols();
                if nodes[p.id()].requires_grad {
                    let mut dp = Vec::with_capacity(r * c);
                    for row in 0..r {
                        dp.extend_from_slice(&g.data()[row * total + off..row * total + off + c]);
                    }
                    acc_grad(nodes, grads, p, Tensor::from_vec(val(p).shape().to_vec(), dp).expect("shape"));
                }
                off += c;
            }
        }
        Op::StackRows(parts) => {
            let d = g.cols();
            for (i, &p) in parts.iter().enumerate() {
                if nodes[p.id()].requires_grad {
                    let dp = g.data()[i * d..(i + 1) * d].to_vec();
                    acc_grad(nodes, grads, p, Tensor::from_vec(val(p).shape().to_vec(), dp).expect("shape"));
                }
            }
        }
        Op::StackScalars(parts) => {
            for (i, &p) in parts.iter().enumerate() {
                if nodes[p.id()].requires_grad {
                    acc_grad(nodes, grads, p, Tensor::from_vec(val(p).shape().to_vec(), vec![g.data()[i]]).expect("shape"));
                }
            }
        }
        Op::MeanRows(x) => {
            let (r, c) = rows_cols(val(*x));
            let inv = T::ONE / T::from_f64(r as f64);
            let mut dx = Vec::with_capacity(r * c);
            for _ in 0..r {
                for &gv in g.data() {
                    dx.push(gv * inv);
                }
            }
            acc_grad(nodes, grads, *x, Tensor::from_vec(val(*x).shape().to_vec(), dx).expect("shape"));
        }
        Op::SumAll(x) => {
            let gv = g.data()[0];
            acc_grad(nodes, grads, *x, Tensor::full(val(*x).shape().to_vec(), gv));
        }
        Op::MeanAll(x) => {
            let gv = g.data()[0] / T::from_f64(val(*x).numel() as f64);
            acc_grad(nodes, grads, *x, Tensor::full(val(*x).shape().to_vec(), gv));
        }
        Op::SoftmaxRows(x) => {
            let out = &nodes[id].value;
            let (r, c) = rows_cols(out);
            let mut dx = vec![T::ZERO; r * c];
            for row in 0..r {
                let y = &out.data()[row * c..(row + 1) * c];
                let gr = &g.data()[row * c..(row + 1) * c];
                let s = kernels::dot(y, gr);
                for j in 0..c {
                    dx[row * c + j] = y[j] * (gr[j] - s);
                }
            }
            acc_grad(nodes, grads, *x, Tensor::from_vec(val(*x).shape().to_vec(), dx).expect("shape"));
        }
        Op::LseRows(x) => {
            let out = &nodes[id].value;
            let xv = val(*x);
            let (r, c) = rows_cols(xv);
            let mut dx = vec![T::ZERO; r * c];
            for row in 0..r {
                let lse = out.data()[row];
                let gv = g.data()[row];
                for j in 0..c {
                    dx[row * c + j] = gv * (xv.data()[row * c + j] - lse).exp();
                }
            }
            acc_grad(nodes, grads, *x, Tensor::from_vec(xv.shape().to_vec(), dx).expect("shape"));
        }
        Op::LseAll(x) => {
            let lse = nodes[id].value.data()[0];
            let gv = g.data()[0];
            let xv = val(*x);
            let dx: Vec<T> = xv.data().iter().map(|&v| gv * (v - lse).exp()).collect();
            acc_grad(nodes, grads, *x, Tensor::from_vec(xv.shape().to_vec(), dx).expect("shape"));
        }
        Op::RowNormalize { x, norms } => {
            let out = &nodes[id].value;
            let (r, c) = rows_cols(out);
            let mut dx = vec![T::ZERO; r * c];
            for row in 0..r {
                let y = &out.data()[row * c..(row + 1) * c];
                let gr = &g.data()[row * c..(row + 1) * c];
                let proj = kernels::dot(y, gr);
                let inv = T::ONE / norms[row];
                for j in 0..c {
                    dx[row * c + j] = (gr[j] - y[j] * proj) * inv;
                }
            }
            acc_grad(nodes, grads, *x, Tensor::from_vec(val(*x).shape().to_vec(), dx).expect("shape"));
        }
        Op::CosineSim { a, b, na, nb, dot } => {
            let gv = g.data()[0];
            let (av, bv) = (val(*a), val(*b));
            let cosv = *dot / (*na * *nb);
            let inv_ab = T::ONE / (*na * *nb);
            let inv_aa = cosv / (*na * *na);
            let inv_bb = cosv / (*nb * *nb);
            let ga: Vec<T> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| gv * (y * inv_ab - x * inv_aa))
                .collect();
            let gb: Vec<T> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| gv * (x * inv_ab - y * inv_bb))
                .collect();
            acc_grad(nodes, grads, *a, Tensor::from_vec(av.shape().to_vec(), ga).expect("shape"));
            acc_grad(nodes, grads, *b, Tensor::from_vec(bv.shape().to_vec(), gb).expect("shape"));
        }
        Op::Dot(a, b) => {
            let gv = g.data()[0];
            let ga = val(*b).map(|v| v * gv);
            let gb = val(*a).map(|v| v * gv);
            acc_grad(nodes, grads, *a, Tensor::from_vec(val(*a).shape().to_vec(), ga.into_data()).expect("shape"));
            acc_grad(nodes, grads, *b, Tensor::from_vec(val(*b).shape().to_vec(), gb.into_data()).expect("shape"));
        }
        Op::CrossEntropy { logits, targets, mean, count } => {
            let xv = val(*logits);
            let (r, c) = rows_cols(xv);
            let gs = if *mean { g.data()[0] / T::from_f64(*count as f64) } else { g.data()[0] };
            let mut dx = vec![T::ZERO; r * c];
            for (row, &t) in targets.iter().enumerate() {
                if t == IGNORE_INDEX {
                    continue;
                }
                let xr = &xv.data()[row * c..(row + 1) * c];
                let mut p = xr.to_vec();
                kernels::softmax_row(&mut p);
                for j in 0..c {
                    dx[row * c + j] = gs * p[j];
                }
                dx[row * c + t] -= gs;
            }
            acc_grad(nodes, grads, *logits, Tensor::from_vec(xv.shape().to_vec(), dx).expect("shape"));
        }
        Op::BceLogits { logits, targets } => {
            let xv = val(*logits);
            let gs = g.data()[0] / T::from_f64(xv.numel() as f64);
            let dx: Vec<T> = xv
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&z, &y)| {
                    // sigmoid(z) - y, via the stable split on the sign of z
                    let s = if z >= T::ZERO {
                        T::ONE / (T::ONE + (-z).exp())
                    } else {
                        let e = z.exp();
                        e / (T::ONE + e)
                    };
                    gs * (s - y)
                })
                .collect();
            acc_grad(nodes, grads, *logits, Tensor::from_vec(xv.shape().to_vec(), dx).expect("shape"));
        }
        Op::Pick { x, index } => {
            let mut dx = vec![T::ZERO; val(*x).numel()];
            dx[*index] = g.data()[0];
            acc_grad(nodes, grads, *x, Tensor::from_vec(val(*x).shape().to_vec(), dx).expect("shape"));
        }
        Op::AddRowBroadcast { x, row } => {
            acc_grad(nodes, grads, *x, g.clone());
            if nodes[row.id()].requires_grad {
                let (r, c) = rows_cols(g);
                let mut dr = vec![T::ZERO; c];
                for rr in 0..r {
                    for j in 0..c {
                        dr[j] += g.data()[rr * c + j];
                    }
                }
                acc_grad(nodes, grads, *row, Tensor::from_vec(val(*row).shape().to_vec(), dr).expect("shape"));
            }
        }
        Op::MulScalarVar { x, s } => {
            let sv = val(*s).data()[0];
            acc_grad(nodes, grads, *x, g.map(|v| v * sv));
            if nodes[s.id()].requires_grad {
                let mut acc = T::ZERO;
                for (&gv, &xv) in g.data().iter().zip(val(*x).data()) {
                    acc += gv * xv;
                }
                acc_grad(nodes, grads, *s, Tensor::from_vec(val(*s).shape().to_vec(), vec![acc]).expect("shape"));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry_and_analytic_values() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::vector(alloc::vec![0.0, 0.0])).unwrap();
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let y = g.leaf(Tensor::vector(alloc::vec![1.0f64.ln(), 3.0f64.ln()])).unwrap();
        let sy = g.softmax(y, 0).unwrap();
        let v = g.value(sy);
        assert!((v.data()[0] - 0.25).abs() < 1e-12);
        assert!((v.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_magnitude_matches_f64_reference() {
        // f32 path with inputs near 1000 stays finite and sums to 1, and
        // matches the 64-bit max-subtracted reference within 1e-6.
        let inputs = alloc::vec![1000.0f32, 1000.1];
        let g32: Graph<f32> = Graph::new();
        let x = g32.leaf(Tensor::vector(inputs.clone())).unwrap();
        let s = g32.softmax(x, 0).unwrap();
        let v32 = g32.value(s);
        let sum: f32 = v32.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);

        let g64: Graph<f64> = Graph::new();
        let x64 = g64.leaf(Tensor::vector(inputs.iter().map(|&v| v as f64).collect())).unwrap();
        let s64 = g64.softmax(x64, 0).unwrap();
        let v64 = g64.value(s64);
        for (a, b) in v32.data().iter().zip(v64.data()) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_non_finite_input() {
        let g: Graph<f32> = Graph::new();
        let err = g.leaf(Tensor::vector(alloc::vec![f32::NAN, 0.0])).unwrap_err();
        assert_eq!(err, Error::NonFinite { op: "leaf" });
    }

    #[test]
    fn logsumexp_contracts() {
        let g: Graph<f64> = Graph::new();
        // single element -> itself
        let x = g.leaf(Tensor::vector(alloc::vec![3.25])).unwrap();
        let l = g.logsumexp(x, 0).unwrap();
        assert_eq!(g.item(l).unwrap(), 3.25);
        // [0,0] -> ln 2
        let y = g.leaf(Tensor::vector(alloc::vec![0.0, 0.0])).unwrap();
        let ly = g.logsumexp(y, 0).unwrap();
        assert!((g.item(ly).unwrap() - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_matches_naive_oracle_on_random_vector() {
        let mut r = crate::rng::stream(11, "lse");
        use crate::rng::RngExt;
        let xs: alloc::vec::Vec<f64> = (0..8).map(|_| r.range(-3.0, 3.0)).collect();
        let naive = xs.iter().map(|v| v.exp()).sum::<f64>().ln();
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::vector(xs)).unwrap();
        let l = g.logsumexp(x, 0).unwrap();
        assert!((g.item(l).unwrap() - naive).abs() < 1e-10);
    }

    #[test]
    fn logsumexp_bounds_and_empty_axis() {
        let g: Graph<f64> = Graph::new();
        let xs = alloc::vec![1.0, -2.0, 0.5, 0.9];
        let x = g.leaf(Tensor::vector(xs.clone())).unwrap();
        let l = g.logsumexp(x, 0).unwrap();
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let v = g.item(l).unwrap();
        assert!(v >= max && v <= max + (xs.len() as f64).ln() + 1e-12);
        // empty input is rejected at leaf creation
        let err = g.leaf(Tensor::<f64>::vector(alloc::vec![])).unwrap_err();
        assert_eq!(err, Error::Empty { op: "leaf" });
    }

    #[test]
    fn cosine_similarity_contracts() {
        let g: Graph<f64> = Graph::new();
        let a = g.leaf(Tensor::vector(alloc::vec![1.0, 2.0, 3.0])).unwrap();
        let same = g.cosine_sim(a, a).unwrap();
        assert!((g.item(same).unwrap() - 1.0).abs() < 1e-12);

        let e1 = g.leaf(Tensor::vector(alloc::vec![1.0, 0.0])).unwrap();
        let e2 = g.leaf(Tensor::vector(alloc::vec![0.0, 1.0])).unwrap();
        let orth = g.cosine_sim(e1, e2).unwrap();
        assert_eq!(g.item(orth).unwrap(), 0.0);

        let b = g.leaf(Tensor::vector(alloc::vec![4.0, 5.0, 6.0])).unwrap();
        let c = g.cosine_sim(a, b).unwrap();
        assert!((g.item(c).unwrap() - 0.974_631_846).abs() < 1e-9);

        // scale invariance: cos(k*a, b) == cos(a, b) for k > 0
        let ka = g.scale(a, 7.5).unwrap();
        let ck = g.cosine_sim(ka, b).unwrap();
        assert!((g.item(ck).unwrap() - g.item(c).unwrap()).abs() < 1e-12);

        let z = g.leaf(Tensor::vector(alloc::vec![0.0, 0.0, 0.0])).unwrap();
        let err = g.cosine_sim(a, z).unwrap_err();
        assert_eq!(err, Error::ZeroNorm { op: "cosine_similarity" });
    }

    #[test]
    fn backward_sum_gives_ones() {
        let g: Graph<f64> = Graph::new();
        let x = g.param(Tensor::vector(alloc::vec![1.0, -2.0, 0.5])).unwrap();
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_dot_gives_two_x() {
        let g: Graph<f64> = Graph::new();
        let x = g.param(Tensor::vector(alloc::vec![1.0, -2.0, 0.5])).unwrap();
        let l = g.dot(x, x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_fanout_accumulates() {
        // d(sum(x) + sum(x))/dx == 2 * ones
        let g: Graph<f64> = Graph::new();
        let x = g.param(Tensor::vector(alloc::vec![3.0, 4.0])).unwrap();
        let s1 = g.sum_all(x).unwrap();
        let s2 = g.sum_all(x).unwrap();
        let l = g.add(s1, s2).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let g: Graph<f64> = Graph::new();
        let x = g.param(Tensor::vector(alloc::vec![1.0, 2.0])).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn off_path_parameter_gets_zero_grad() {
        let g: Graph<f64> = Graph::new();
        let x = g.param(Tensor::vector(alloc::vec![1.0, 2.0])).unwrap();
        let unused = g.param(Tensor::vector(alloc::vec![5.0])).unwrap();
        let l = g.sum_all(x).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(unused).is_none());
        assert_eq!(g.grad_or_zero(unused).data(), &[0.0]);
    }

    #[test]
    fn softmax_rows_are_stochastic_under_masking() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 3, alloc::vec![0.3, -1.0, 2.0, 5.0, 5.0, 5.0]).unwrap()).unwrap();
        let mask = Tensor::matrix(2, 3, alloc::vec![0.0, NEG_MASK, 0.0, 0.0, 0.0, NEG_MASK]).unwrap();
        let xm = g.add_mask(x, &mask).unwrap();
        let s = g.softmax_rows(xm).unwrap();
        let v = g.value(s);
        for row in 0..2 {
            let sum: f64 = v.row(row).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert!(v.at(0, 1) < 1e-12);
        assert!(v.at(1, 2) < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_vocab() {
        let g: Graph<f64> = Graph::new();
        let logits = g.leaf(Tensor::matrix(2, 8, alloc::vec![0.0; 16]).unwrap()).unwrap();
        let l = g.cross_entropy_logits(logits, &[3, IGNORE_INDEX], true).unwrap();
        assert!((g.item(l).unwrap() - (8.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_is_error() {
        let g: Graph<f64> = Graph::new();
        let logits = g.leaf(Tensor::matrix(1, 4, alloc::vec![0.0; 4]).unwrap()).unwrap();
        let err = g.cross_entropy_logits(logits, &[IGNORE_INDEX], true).unwrap_err();
        assert_eq!(err, Error::Empty { op: "cross_entropy" });
    }
}
