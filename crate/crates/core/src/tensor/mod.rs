//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding the result
//! values, the op that produced it, and (after [`Graph::backward`]) the
//! gradient of the root with respect to it. Nodes are immutable once created
//! except for the grad slot; the trainer builds a fresh graph per iteration.
//!
//! Design points that matter for reproducibility and the gradient checker:
//!
//! * Backward walks nodes in reverse creation order with sequential
//!   accumulation, so repeated runs are bitwise identical.
//! * Quantities frozen at construction time (detached tensors, contrast
//!   statistics, argmax indices) stay frozen when the checker re-evaluates
//!   the graph under perturbed leaves. A built graph therefore represents a
//!   fixed differentiable function, and numeric and analytic gradients agree
//!   even across detach boundaries.
//! * Division, `log`, `exp` and `pow` guard their domains and check their
//!   outputs for NaN/infinity; norm and contrast denominators are floored at
//!   [`Scalar::GUARD_EPS`].

mod backward;
mod check;
mod ops;

pub use check::{finite_diff_check, max_relative_error};

use crate::error::TensorError;
use crate::scalar::Scalar;
use ops::{axis_split, eval_op};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) struct Node<S: Scalar> {
    pub(crate) shape: Vec<usize>,
    pub(crate) values: Vec<S>,
    pub(crate) grad: Option<Vec<S>>,
    pub(crate) needs_grad: bool,
    pub(crate) op: Op<S>,
}

/// Recorded operation. Aux data computed at construction time (argmax
/// positions, contrast statistics) lives inside the variant so backward and
/// re-evaluation see exactly what forward saw.
#[derive(Debug)]
pub(crate) enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddScalar(Var, S),
    MulScalar(Var, S),
    DivScalar(Var, S),
    Exp(Var),
    Tanh(Var),
    /// ln(x + GUARD_EPS); errors when the shifted argument is not positive.
    LogEps(Var),
    /// x^p for a fixed exponent p.
    Pow(Var, S),
    SumAll(Var),
    SumAxis(Var, usize),
    /// Max over one axis. `argmax` holds the winning position along the axis
    /// per output element, frozen at construction (ties -> lowest index).
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<u32>,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    /// 2-D convolution over [C_in, H, W] with kernel [C_out, C_in, k, k],
    /// odd k, zero padding k/2, stride 1 or 2.
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    SoftmaxRows(Var),
    /// Euclidean norm of each column of a matrix, floored at GUARD_EPS.
    L2NormCols(Var),
    /// x[r, c] / v[c].
    ColsDiv(Var, Var),
    /// x[r, c] - v[r].
    RowsSub(Var, Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<u32>,
    },
    /// out[k] = x[r_k, c_k]; backward scatter-adds into the matrix.
    GatherEntries {
        x: Var,
        entries: Vec<(u32, u32)>,
    },
    /// Identity on values, gradient barrier. The node's values are a snapshot:
    /// re-evaluation never flows through a detach.
    Detach(Var),
    /// Per-row (x - mu) / max(sigma, GUARD_EPS) with mu and the sample
    /// standard deviation frozen at construction. Rows flagged degenerate
    /// (length < 2 or exactly zero variance) produce zeros and block
    /// gradients; other rows backpropagate g * inv_sigma exactly.
    ContrastNormRows {
        x: Var,
        mu: Vec<S>,
        inv_sigma: Vec<S>,
        degenerate: Vec<bool>,
    },
}

/// Computation tape. See the module docs for the semantics.
#[derive(Debug, Default)]
pub struct Graph<S: Scalar> {
    pub(crate) nodes: Vec<Node<S>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── node access ─────────────────────────────────────────────────────

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].values.len()
    }

    pub fn values(&self, v: Var) -> &[S] {
        &self.nodes[v.0].values
    }

    /// Value of a single-element tensor.
    pub fn value_scalar(&self, v: Var) -> S {
        debug_assert_eq!(self.nodes[v.0].values.len(), 1);
        self.nodes[v.0].values[0]
    }

    /// Gradient of the last `backward` root w.r.t. `v`, if one was computed.
    /// `None` means the node was unreachable from the root or does not
    /// require gradients; callers may treat it as zero.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as an owned vector, absent gradients materialized as zeros.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<S> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![S::zero(); self.nodes[v.0].values.len()],
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf) && self.nodes[v.0].needs_grad
    }

    fn check_var(&self, op: &'static str, v: Var) -> Result<(), TensorError> {
        if v.0 >= self.nodes.len() {
            return Err(TensorError::invalid(op, "variable from another graph"));
        }
        Ok(())
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Insert an input tensor. `requires_grad` marks it as a differentiation
    /// target for `backward` and the finite-difference checker.
    pub fn leaf(
        &mut self,
        shape: &[usize],
        values: Vec<S>,
        requires_grad: bool,
    ) -> Result<Var, TensorError> {
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(TensorError::invalid(
                "leaf",
                format!("shape {:?} wants {} values, got {}", shape, numel, values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            shape: shape.to_vec(),
            values,
            grad: None,
            needs_grad: requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant tensor (a leaf that never receives gradients).
    pub fn constant(&mut self, shape: &[usize], values: Vec<S>) -> Result<Var, TensorError> {
        self.leaf(shape, values, false)
    }

    /// Scalar constant with shape `[]`.
    pub fn scalar_const(&mut self, v: S) -> Result<Var, TensorError> {
        self.leaf(&[], vec![v], false)
    }

    fn push(&mut self, shape: Vec<usize>, op: Op<S>) -> Result<Var, TensorError> {
        let values = eval_op(&op, &shape, &self.nodes)?;
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        let needs_grad = match &op {
            Op::Leaf => unreachable!("leaves are pushed directly"),
            Op::Detach(_) => false,
            other => ops::parents_of(other).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            needs_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ── shape validation helpers ────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        self.check_var(op, a)?;
        self.check_var(op, b)?;
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        self.check_var(op, v)?;
        match *self.nodes[v.0].shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::invalid(
                op,
                format!("expected a rank-2 tensor, got shape {:?}", self.nodes[v.0].shape),
            )),
        }
    }

    fn finite_scalar(op: &'static str, s: S) -> Result<(), TensorError> {
        if !s.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        Ok(())
    }

    // ── elementwise arithmetic ──────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        self.push(self.nodes[a.0].shape.clone(), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        self.push(self.nodes[a.0].shape.clone(), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        self.push(self.nodes[a.0].shape.clone(), Op::Mul(a, b))
    }

    /// Elementwise division; any zero in the denominator is a domain error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("div", a, b)?;
        self.push(self.nodes[a.0].shape.clone(), Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check_var("neg", a)?;
        self.push(self.nodes[a.0].shape.clone(), Op::Neg(a))
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Result<Var, TensorError> {
        self.check_var("add_scalar", a)?;
        Self::finite_scalar("add_scalar", s)?;
        self.push(self.nodes[a.0].shape.clone(), Op::AddScalar(a, s))
    }

    pub fn mul_scalar(&mut self, a: Var, s: S) -> Result<Var, TensorError> {
        self.check_var("mul_scalar", a)?;
        Self::finite_scalar("mul_scalar", s)?;
        self.push(self.nodes[a.0].shape.clone(), Op::MulScalar(a, s))
    }

    /// Division by a fixed scalar, kept as its own op so that `x / s` with
    /// `x == s` is exactly 1 (multiplying by a rounded reciprocal is not).
    pub fn div_scalar(&mut self, a: Var, s: S) -> Result<Var, TensorError> {
        self.check_var("div_scalar", a)?;
        Self::finite_scalar("div_scalar", s)?;
        if s == S::zero() {
            return Err(TensorError::domain("div_scalar", "division by zero"));
        }
        self.push(self.nodes[a.0].shape.clone(), Op::DivScalar(a, s))
    }

    // ── transcendental ops ──────────────────────────────────────────────

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check_var("exp", a)?;
        self.push(self.nodes[a.0].shape.clone(), Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check_var("tanh", a)?;
        self.push(self.nodes[a.0].shape.clone(), Op::Tanh(a))
    }

    /// ln(x + eps) with the crate-wide guard epsilon. Arguments at or below
    /// -eps are a domain error.
    pub fn log_eps(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check_var("log_eps", a)?;
        self.push(self.nodes[a.0].shape.clone(), Op::LogEps(a))
    }

    /// x^p for fixed p. Negative bases need an integral p; a zero base needs
    /// p == 0 or p >= 1 (the derivative is unbounded otherwise).
    pub fn pow(&mut self, a: Var, p: S) -> Result<Var, TensorError> {
        self.check_var("pow", a)?;
        Self::finite_scalar("pow", p)?;
        self.push(self.nodes[a.0].shape.clone(), Op::Pow(a, p))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check_var("sum_all", a)?;
        self.push(vec![], Op::SumAll(a))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_var("sum_axis", a)?;
        let shape = &self.nodes[a.0].shape;
        if axis >= shape.len() {
            return Err(TensorError::invalid(
                "sum_axis",
                format!("axis {} out of range for shape {:?}", axis, shape),
            ));
        }
        let mut out = shape.clone();
        out.remove(axis);
        self.push(out, Op::SumAxis(a, axis))
    }

    /// Mean over one axis, composed as sum then scale.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let len = *self
            .nodes
            .get(a.0)
            .and_then(|n| n.shape.get(axis))
            .ok_or_else(|| TensorError::invalid("mean_axis", "bad var or axis"))?;
        if len == 0 {
            return Err(TensorError::invalid("mean_axis", "empty axis"));
        }
        let s = self.sum_axis(a, axis)?;
        self.mul_scalar(s, S::lit(1.0 / len as f64))
    }

    /// Mean over all elements, composed as sum then scale.
    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check_var("mean_all", a)?;
        let n = self.nodes[a.0].values.len();
        if n == 0 {
            return Err(TensorError::invalid("mean_all", "empty tensor"));
        }
        let s = self.sum_all(a)?;
        self.mul_scalar(s, S::lit(1.0 / n as f64))
    }

    /// Max over one axis. Returns the reduced tensor and the winning indices
    /// along the axis (ties broken toward the lowest index). The indices are
    /// frozen into the graph: gradients flow only to the recorded winners.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<(Var, Vec<usize>), TensorError> {
        self.check_var("max_axis", a)?;
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::invalid(
                "max_axis",
                format!("axis {} out of range for shape {:?}", axis, shape),
            ));
        }
        if shape[axis] == 0 {
            return Err(TensorError::invalid("max_axis", "empty axis"));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = &self.nodes[a.0].values;
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0u32;
                let mut best_v = x[o * len * inner + i];
                for k in 1..len {
                    let v = x[(o * len + k) * inner + i];
                    if v > best_v {
                        best_v = v;
                        best = k as u32;
                    }
                }
                argmax.push(best);
            }
        }
        let indices = argmax.iter().map(|&k| k as usize).collect();
        let mut out = shape;
        out.remove(axis);
        let v = self.push(out, Op::MaxAxis { x: a, axis, argmax })?;
        Ok((v, indices))
    }

    // ── linear algebra and layout ───────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, ka) = self.rank2("matmul", a)?;
        let (kb, n) = self.rank2("matmul", b)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        self.push(vec![m, n], Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.rank2("transpose", a)?;
        self.push(vec![c, r], Op::Transpose(a))
    }

    /// Reinterpret the value buffer under a new shape with the same element
    /// count. Row-major order is preserved.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        self.check_var("reshape", a)?;
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].values.len() {
            return Err(TensorError::invalid(
                "reshape",
                format!(
                    "cannot reshape {:?} ({} elements) to {:?} ({})",
                    self.nodes[a.0].shape,
                    self.nodes[a.0].values.len(),
                    shape,
                    numel
                ),
            ));
        }
        self.push(shape.to_vec(), Op::Reshape(a))
    }

    /// 2-D convolution: input [C_in, H, W], kernel [C_out, C_in, k, k] with
    /// odd k, zero padding k/2, stride 1 or 2, optional bias [C_out].
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    ) -> Result<Var, TensorError> {
        self.check_var("conv2d", x)?;
        self.check_var("conv2d", w)?;
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let (cin, h, wd) = match *xs.as_slice() {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(TensorError::invalid(
                    "conv2d",
                    format!("input must be [C, H, W], got {:?}", xs),
                ))
            }
        };
        let (cout, wcin, kh, kw) = match *ws.as_slice() {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => {
                return Err(TensorError::invalid(
                    "conv2d",
                    format!("kernel must be [C_out, C_in, k, k], got {:?}", ws),
                ))
            }
        };
        if kh != kw || kh % 2 == 0 {
            return Err(TensorError::invalid(
                "conv2d",
                format!("kernel must be square with odd size, got {}x{}", kh, kw),
            ));
        }
        if wcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if stride != 1 && stride != 2 {
            return Err(TensorError::invalid(
                "conv2d",
                format!("stride must be 1 or 2, got {}", stride),
            ));
        }
        if let Some(bv) = b {
            self.check_var("conv2d", bv)?;
            if *self.nodes[bv.0].shape.as_slice() != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![cout],
                    rhs: self.nodes[bv.0].shape.clone(),
                });
            }
        }
        // With padding k/2 the stride-1 output keeps the input extent and the
        // stride-2 output is the ceiling half.
        let oh = (h + stride - 1) / stride;
        let ow = (wd + stride - 1) / stride;
        if h == 0 || wd == 0 {
            return Err(TensorError::invalid("conv2d", "empty spatial extent"));
        }
        self.push(vec![cout, oh, ow], Op::Conv2d { x, w, b, stride })
    }

    // ── row/column structured ops ───────────────────────────────────────

    /// Numerically stable softmax of each row of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.rank2("softmax_rows", a)?;
        if r == 0 || c == 0 {
            return Err(TensorError::invalid("softmax_rows", "empty matrix"));
        }
        self.push(vec![r, c], Op::SoftmaxRows(a))
    }

    /// Euclidean norm of every column, floored at the guard epsilon so a
    /// zero column yields a usable (zero-gradient) denominator.
    pub fn l2_norm_cols(&mut self, a: Var) -> Result<Var, TensorError> {
        let (_, c) = self.rank2("l2_norm_cols", a)?;
        self.push(vec![c], Op::L2NormCols(a))
    }

    /// Divide each column j of a matrix by v[j]; zero divisors are a domain
    /// error.
    pub fn cols_div(&mut self, a: Var, v: Var) -> Result<Var, TensorError> {
        let (r, c) = self.rank2("cols_div", a)?;
        self.check_var("cols_div", v)?;
        if *self.nodes[v.0].shape.as_slice() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "cols_div",
                lhs: vec![r, c],
                rhs: self.nodes[v.0].shape.clone(),
            });
        }
        self.push(vec![r, c], Op::ColsDiv(a, v))
    }

    /// Subtract v[i] from every element of row i.
    pub fn rows_sub(&mut self, a: Var, v: Var) -> Result<Var, TensorError> {
        let (r, c) = self.rank2("rows_sub", a)?;
        self.check_var("rows_sub", v)?;
        if *self.nodes[v.0].shape.as_slice() != [r] {
            return Err(TensorError::ShapeMismatch {
                op: "rows_sub",
                lhs: vec![r, c],
                rhs: self.nodes[v.0].shape.clone(),
            });
        }
        self.push(vec![r, c], Op::RowsSub(a, v))
    }

    /// Concatenate tensors along one axis; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::invalid("concat", "no tensors given"));
        }
        for &p in parts {
            self.check_var("concat", p)?;
        }
        let first = self.nodes[parts[0].0].shape.clone();
        if axis >= first.len() {
            return Err(TensorError::invalid(
                "concat",
                format!("axis {} out of range for shape {:?}", axis, first),
            ));
        }
        let mut total = 0usize;
        for &p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let mut out = first;
        out[axis] = total;
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Select rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.rank2("gather_rows", a)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("row index {} out of range for {} rows", bad, r),
            ));
        }
        let rows: Vec<u32> = rows.iter().map(|&i| i as u32).collect();
        let k = rows.len();
        self.push(vec![k, c], Op::GatherRows { x: a, rows })
    }

    /// Pick individual (row, col) entries of a matrix into a vector.
    pub fn gather_entries(
        &mut self,
        a: Var,
        entries: &[(usize, usize)],
    ) -> Result<Var, TensorError> {
        let (r, c) = self.rank2("gather_entries", a)?;
        if entries.is_empty() {
            return Err(TensorError::invalid("gather_entries", "no entries given"));
        }
        if let Some(&(br, bc)) = entries.iter().find(|&&(er, ec)| er >= r || ec >= c) {
            return Err(TensorError::invalid(
                "gather_entries",
                format!("entry ({}, {}) out of range for [{}, {}]", br, bc, r, c),
            ));
        }
        let entries: Vec<(u32, u32)> = entries
            .iter()
            .map(|&(er, ec)| (er as u32, ec as u32))
            .collect();
        self.push(
            vec![entries.len()],
            Op::GatherEntries { x: a, entries },
        )
    }

    /// Identity on values, but gradients do not flow through and the values
    /// stay pinned if the graph is re-evaluated under perturbed leaves.
    pub fn detach(&mut self, a: Var) -> Result<Var, TensorError> {
        self.check_var("detach", a)?;
        let node = &self.nodes[a.0];
        let (shape, values) = (node.shape.clone(), node.values.clone());
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            needs_grad: false,
            op: Op::Detach(a),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Per-row contrast normalization (x - mu) / max(sigma, eps) where mu and
    /// the sample standard deviation (n-1 denominator) are computed from the
    /// current values and frozen. Degenerate rows (length < 2 or zero
    /// variance) output zeros and pass no gradient; other rows scale the
    /// incoming gradient by exactly 1/sigma.
    pub fn contrast_norm_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.rank2("contrast_norm_rows", a)?;
        let x = &self.nodes[a.0].values;
        let mut mu = Vec::with_capacity(r);
        let mut inv_sigma = Vec::with_capacity(r);
        let mut degenerate = Vec::with_capacity(r);
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            if c < 2 {
                mu.push(S::zero());
                inv_sigma.push(S::zero());
                degenerate.push(true);
                continue;
            }
            let mean = row.iter().copied().sum::<S>() / S::from_usize(c).unwrap();
            let ss = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<S>();
            let var = ss / S::from_usize(c - 1).unwrap();
            let sigma = var.sqrt();
            if sigma == S::zero() {
                mu.push(mean);
                inv_sigma.push(S::zero());
                degenerate.push(true);
            } else {
                mu.push(mean);
                inv_sigma.push(S::one() / sigma.max(S::GUARD_EPS));
                degenerate.push(false);
            }
        }
        self.push(
            vec![r, c],
            Op::ContrastNormRows {
                x: a,
                mu,
                inv_sigma,
                degenerate,
            },
        )
    }
}

#[cfg(test)]
mod tests;
