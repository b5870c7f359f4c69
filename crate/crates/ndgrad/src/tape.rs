//! The tape and its differentiable primitives.
//!
//! Shape table (all tensors row-major):
//!
//! | op                  | inputs                          | output          |
//! |---------------------|---------------------------------|-----------------|
//! | add / sub / mul     | same rank, dims equal or 1      | broadcast shape |
//! | matmul              | `[m,k]`, `[k,n]`                | `[m,n]`         |
//! | concat              | equal shapes except `axis`      | summed `axis`   |
//! | slice               | any, `start < end <= dim`       | narrowed `axis` |
//! | sum / mean          | any                             | scalar          |
//! | sum_axis            | any, `axis < rank`              | `axis` removed  |
//! | softmax etc.        | any rank >= 1                   | same, last axis |
//! | embedding_gather    | `[v,d]` table, ids `< v`        | `[n,d]`         |
//! | conv1d              | `[b,t,c]`, kernel `[f,c,k]`     | `[b,t,f]`       |

use crate::tensor::Tensor;
use crate::{NdError, Result};

/// Default norm bound applied to gradients arriving at a reversal node.
pub const GRL_CLIP_NORM: f64 = 0.5;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { input: Var, axis: usize },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Gather { table: Var, ids: Vec<usize> },
    Conv1d { input: Var, kernel: Var },
    Reversal { input: Var, lambda: f64, max_norm: f64 },
    BceWithLogits { input: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation.
///
/// Inputs always precede their consumers, so reverse insertion order is a
/// valid reverse topological order.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient for `v`, zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn shape_err(op: &'static str, detail: String) -> NdError {
    NdError::Shape { op, detail }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(shape_err(op, format!("{a:?} vs {b:?} (rank differs)")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(shape_err(op, format!("{a:?} vs {b:?}"))),
        })
        .collect()
}

/// Flat input offset for every flat output offset under broadcasting.
fn broadcast_index(input: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if input[d] == 1 { 0 } else { acc };
        acc *= input[d];
    }
    let n: usize = out.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        idx.push(offset);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out[d] {
                break;
            }
            offset -= strides[d] * out[d];
            counter[d] = 0;
        }
    }
    idx
}

/// `c = a * b` for row-major `a: [m,k]`, `b: [k,n]`, optionally transposed views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe views that stay inside `a`, `b` and `c`,
    // whose lengths the callers derive from the same m/k/n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / cols, cols)
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the non-finite check run on every op output.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
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

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(NdError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Vec<usize>)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(ta.shape(), &shape);
            let ib = broadcast_index(tb.shape(), &shape);
            ia.iter()
                .zip(&ib)
                .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
                .collect()
        };
        Ok((Tensor::new(shape.clone(), data)?, shape))
    }

    /// Elementwise sum with broadcasting over size-1 dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * factor);
        self.push("scale", t, Op::Scale(a, factor), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k as isize, 1), tb.data(), (n as isize, 1), &mut out, 0.0);
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(shape_err("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(shape, data)?;
        self.push(
            "concat",
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(shape_err("slice", format!("{s:?} axis {axis} [{start}, {end})")));
        }
        let (outer, dim, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let t = Tensor::new(shape, data)?;
        self.push("slice", t, Op::Slice { input: a, axis, start }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", t, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let t = Tensor::scalar(src.data().iter().sum::<f64>() / src.len() as f64);
        self.push("mean", t, Op::Mean(a), &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(shape_err("sum_axis", format!("axis {axis} for {s:?}")));
        }
        let (outer, dim, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, x) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let t = if shape.is_empty() {
            Tensor::scalar(data[0])
        } else {
            Tensor::new(shape, data)?
        };
        self.push("sum_axis", t, Op::SumAxis { input: a, axis }, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::tanh);
        self.push("tanh", t, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(sigmoid);
        self.push("sigmoid", t, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push("relu", t, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::exp);
        self.push("exp", t, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::ln);
        self.push("log", t, Op::Log(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Softmax over the last axis restricted to positions where `mask` is
    /// true. Masked positions come out exactly zero. `mask` has one entry per
    /// element; a row with no unmasked position is rejected.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        self.softmax_impl(a, Some(mask))
    }

    fn softmax_impl(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let src = self.value(a);
        if src.rank() == 0 {
            return Err(shape_err("softmax", "scalar input".into()));
        }
        if let Some(m) = mask {
            if m.len() != src.len() {
                return Err(shape_err(
                    "softmax",
                    format!("mask of {} for {:?}", m.len(), src.shape()),
                ));
            }
        }
        let (rows, cols) = last_axis(src.shape());
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let x = &src.data()[r * cols..(r + 1) * cols];
            let keep = |j: usize| mask.map_or(true, |m| m[r * cols + j]);
            let max = (0..cols)
                .filter(|&j| keep(j))
                .map(|j| x[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(shape_err("softmax", format!("row {r} fully masked")));
            }
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for j in 0..cols {
                if keep(j) {
                    out[j] = (x[j] - max).exp();
                    total += out[j];
                }
            }
            out.iter_mut().for_each(|v| *v /= total);
        }
        let t = Tensor::new(src.shape().to_vec(), data)?;
        self.push("softmax", t, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.rank() == 0 {
            return Err(shape_err("log_softmax", "scalar input".into()));
        }
        let (rows, cols) = last_axis(src.shape());
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let x = &src.data()[r * cols..(r + 1) * cols];
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..cols {
                data[r * cols + j] = x[j] - lse;
            }
        }
        let t = Tensor::new(src.shape().to_vec(), data)?;
        self.push("log_softmax", t, Op::LogSoftmax(a), &[a])
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 || ids.is_empty() {
            return Err(shape_err(
                "embedding_gather",
                format!("table {:?} with {} ids", t.shape(), ids.len()),
            ));
        }
        let (rows, dim) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return Err(NdError::Index {
                    op: "embedding_gather",
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), dim], data)?;
        self.push(
            "embedding_gather",
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Centered 1-D convolution with zero ("SAME") padding:
    /// `out[b,t,f] = sum_{c,k} w[f,c,k] * x[b, t + k/2 - k, c]`.
    pub fn conv1d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(kernel));
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || sw[2] % 2 == 0 {
            return Err(shape_err("conv1d", format!("input {sx:?} kernel {sw:?}")));
        }
        let (b, t, c) = (sx[0], sx[1], sx[2]);
        let (f, k) = (sw[0], sw[2]);
        let half = k / 2;
        let mut out = vec![0.0; b * t * f];
        for bi in 0..b {
            for ti in 0..t {
                for kk in 0..k {
                    let Some(src) = (ti + half).checked_sub(kk).filter(|&s| s < t) else {
                        continue;
                    };
                    let xrow = &x.data()[(bi * t + src) * c..(bi * t + src + 1) * c];
                    for fi in 0..f {
                        let mut acc = 0.0;
                        for (ci, xv) in xrow.iter().enumerate() {
                            acc += w.data()[(fi * c + ci) * k + kk] * xv;
                        }
                        out[(bi * t + ti) * f + fi] += acc;
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, t, f], out)?;
        self.push("conv1d", out, Op::Conv1d { input, kernel }, &[input, kernel])
    }

    /// Gradient reversal with the default clip bound of 0.5.
    pub fn gradient_reversal(&mut self, x: Var, lambda: f64) -> Result<Var> {
        self.gradient_reversal_clipped(x, lambda, GRL_CLIP_NORM)
    }

    /// Identity forward. Backward clips the incoming gradient to global norm
    /// `max_norm`, then multiplies it by `-lambda`.
    pub fn gradient_reversal_clipped(&mut self, x: Var, lambda: f64, max_norm: f64) -> Result<Var> {
        if lambda < 0.0 || max_norm <= 0.0 {
            return Err(NdError::Argument(format!(
                "gradient reversal needs lambda >= 0 and max_norm > 0, got {lambda}, {max_norm}"
            )));
        }
        let t = self.value(x).clone();
        self.push(
            "gradient_reversal",
            t,
            Op::Reversal {
                input: x,
                lambda,
                max_norm,
            },
            &[x],
        )
    }

    /// Elementwise `max(x,0) - x*y + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let x = self.value(logits);
        if x.len() != targets.len() {
            return Err(shape_err(
                "bce_with_logits",
                format!("{:?} logits vs {} targets", x.shape(), targets.len()),
            ));
        }
        let data = x
            .data()
            .iter()
            .zip(targets)
            .map(|(&v, &y)| v.max(0.0) - v * y + (-v.abs()).exp().ln_1p())
            .collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        self.push(
            "bce_with_logits",
            t,
            Op::BceWithLogits {
                input: logits,
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    /// Reverse-mode pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(NdError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes[..n].iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    let ga = self.unbroadcast(g, out.shape(), self.shape(*a));
                    accumulate(grads, *a, &ga, 1.0);
                }
                if self.needs(*b) {
                    let gb = self.unbroadcast(g, out.shape(), self.shape(*b));
                    accumulate(grads, *b, &gb, sign);
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !self.needs(this) {
                        continue;
                    }
                    let ov = self.value(other);
                    let prod: Vec<f64> = if ov.shape() == out.shape() {
                        g.iter().zip(ov.data()).map(|(x, y)| x * y).collect()
                    } else {
                        let idx = broadcast_index(ov.shape(), out.shape());
                        g.iter().zip(&idx).map(|(x, &j)| x * ov.data()[j]).collect()
                    };
                    let gt = self.unbroadcast(&prod, out.shape(), self.shape(this));
                    accumulate(grads, this, &gt, 1.0);
                }
            }
            Op::Scale(a, f) => accumulate(grads, *a, g, *f),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    // dA = G * B^T
                    let slot = slot(grads, *a, m * k);
                    gemm(m, n, k, g, (n as isize, 1), tb.data(), (1, n as isize), slot, 1.0);
                }
                if self.needs(*b) {
                    // dB = A^T * G
                    let slot = slot(grads, *b, k * n);
                    gemm(k, m, n, ta.data(), (1, k as isize), g, (n as isize, 1), slot, 1.0);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(out.shape(), *axis);
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.shape(*v)[*axis] * inner;
                    if self.needs(*v) {
                        let mut part = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            part.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        accumulate(grads, *v, &part, 1.0);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let s = self.shape(*input).to_vec();
                let (outer, dim, inner) = axis_split(&s, *axis);
                let width = out.shape()[*axis] * inner;
                let dst = slot(grads, *input, s.iter().product());
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    for (d, x) in dst[base..base + width].iter_mut().zip(&g[o * width..(o + 1) * width]) {
                        *d += x;
                    }
                }
            }
            Op::Reshape(a) => accumulate(grads, *a, g, 1.0),
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, &vec![g[0]; n], 1.0);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, &vec![g[0] / n as f64; n], 1.0);
            }
            Op::SumAxis { input, axis } => {
                let s = self.shape(*input).to_vec();
                let (outer, dim, inner) = axis_split(&s, *axis);
                let dst = slot(grads, *input, s.iter().product());
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for d in 0..dim {
                        let base = (o * dim + d) * inner;
                        for (x, y) in dst[base..base + inner].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                let d: Vec<f64> = g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(grads, *a, &d, 1.0);
            }
            Op::Sigmoid(a) => {
                let d: Vec<f64> = g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(grads, *a, &d, 1.0);
            }
            Op::Relu(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &d, 1.0);
            }
            Op::Exp(a) => {
                let d: Vec<f64> = g.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                accumulate(grads, *a, &d, 1.0);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let d: Vec<f64> = g.iter().zip(x).map(|(g, x)| g / x).collect();
                accumulate(grads, *a, &d, 1.0);
            }
            Op::Softmax(a) => {
                let (rows, cols) = last_axis(out.shape());
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(a, b)| a * b).sum();
                    for j in span {
                        d[j] = y[j] * (g[j] - dot);
                    }
                }
                accumulate(grads, *a, &d, 1.0);
            }
            Op::LogSoftmax(a) => {
                let (rows, cols) = last_axis(out.shape());
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let total: f64 = g[span.clone()].iter().sum();
                    for j in span {
                        d[j] = g[j] - y[j].exp() * total;
                    }
                }
                accumulate(grads, *a, &d, 1.0);
            }
            Op::Gather { table, ids } => {
                let s = self.shape(*table).to_vec();
                let dim = s[1];
                let dst = slot(grads, *table, s[0] * dim);
                for (r, &id) in ids.iter().enumerate() {
                    for (x, y) in dst[id * dim..(id + 1) * dim].iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                        *x += y;
                    }
                }
            }
            Op::Conv1d { input, kernel } => {
                let (x, w) = (self.value(*input), self.value(*kernel));
                let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (f, k) = (w.shape()[0], w.shape()[2]);
                let half = k / 2;
                let mut dx = vec![0.0; x.len()];
                let mut dw = vec![0.0; w.len()];
                for bi in 0..b {
                    for ti in 0..t {
                        for kk in 0..k {
                            let Some(src) = (ti + half).checked_sub(kk).filter(|&s| s < t) else {
                                continue;
                            };
                            for fi in 0..f {
                                let go = g[(bi * t + ti) * f + fi];
                                if go == 0.0 {
                                    continue;
                                }
                                for ci in 0..c {
                                    let wi = (fi * c + ci) * k + kk;
                                    let xi = (bi * t + src) * c + ci;
                                    dx[xi] += go * w.data()[wi];
                                    dw[wi] += go * x.data()[xi];
                                }
                            }
                        }
                    }
                }
                if self.needs(*input) {
                    accumulate(grads, *input, &dx, 1.0);
                }
                if self.needs(*kernel) {
                    accumulate(grads, *kernel, &dw, 1.0);
                }
            }
            Op::Reversal {
                input,
                lambda,
                max_norm,
            } => {
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                let clip = if norm > *max_norm { max_norm / norm } else { 1.0 };
                let d: Vec<f64> = g.iter().map(|v| -lambda * (v * clip)).collect();
                accumulate(grads, *input, &d, 1.0);
            }
            Op::BceWithLogits { input, targets } => {
                let x = self.value(*input).data();
                let d: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .zip(targets)
                    .map(|((g, &x), y)| g * (sigmoid(x) - y))
                    .collect();
                accumulate(grads, *input, &d, 1.0);
            }
        }
    }

    /// Sums `g` (shaped `out`) down to the broadcast source shape `target`.
    fn unbroadcast(&self, g: &[f64], out: &[usize], target: &[usize]) -> Vec<f64> {
        if out == target {
            return g.to_vec();
        }
        let idx = broadcast_index(target, out);
        let mut acc = vec![0.0; target.iter().product()];
        for (x, &j) in g.iter().zip(&idx) {
            acc[j] += x;
        }
        acc
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], factor: f64) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, x)| *a += factor * x),
        slot @ None => *slot = Some(g.iter().map(|x| factor * x).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_by_identity_is_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = tape.param(Tensor::matrix(2, 2, vec![1.5, -2.0, 0.25, 7.0]).unwrap());
        let y = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(a).data());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.5, 9.0, 0.5]).unwrap());
        let y = tape.masked_softmax(x, &[true, true, false, true, false, true]).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[2], 0.0);
        assert_eq!(v[4], 0.0);
        assert!((v[3] - 0.5).abs() < 1e-15);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
        assert!(tape.masked_softmax(x, &[false; 6]).is_err());
    }

    #[test]
    fn conv1d_same_padding_is_center_aligned() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3, 1], vec![1.0, 0.0, 0.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.conv1d(x, w).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0, 0.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[6.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 6]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(NdError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::zeros(&[4, 3]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[2, 3]));
        let bias = tape.param(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.add(a, bias).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(bias).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn reversal_forward_is_identity_and_backward_clips_then_negates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.5, -2.0]));
        let r = tape.gradient_reversal(x, 1.0).unwrap();
        assert_eq!(tape.value(r).data(), &[1.5, -2.0]);
        // loss = 3*r0 + 4*r1 sends g = [3, 4] into the reversal node
        let w = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = tape.mul(r, w).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(close(g.wrt(x).data(), &[-0.3, -0.4], 1e-15));

        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.5, -2.0]));
        let r = tape.gradient_reversal(x, 1.0).unwrap();
        let w = tape.constant(Tensor::vector(vec![0.1, 0.2]));
        let p = tape.mul(r, w).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(close(g.wrt(x).data(), &[-0.1, -0.2], 1e-15));
    }

    #[test]
    fn reversal_rejects_negative_lambda() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0]));
        assert!(tape.gradient_reversal(x, -1.0).is_err());
    }

    #[test]
    fn finite_checks_catch_log_of_negative() {
        let mut tape = Tape::new().with_finite_checks(true);
        let x = tape.constant(Tensor::vector(vec![-1.0]));
        assert!(matches!(tape.log(x), Err(NdError::NonFinite { op: "log" })));
    }

    #[test]
    fn bce_matches_direct_formula() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-2.0, 0.0, 3.0]));
        let y = tape.bce_with_logits(x, &[0.0, 1.0, 1.0]).unwrap();
        let expect: Vec<f64> = [(-2.0f64, 0.0f64), (0.0, 1.0), (3.0, 1.0)]
            .iter()
            .map(|&(x, y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .collect();
        assert!(close(tape.value(y).data(), &expect, 1e-12));
    }
}
