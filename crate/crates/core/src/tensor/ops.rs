//! Forward kernels. [`eval_op`] is the single implementation used both when
//! an op is recorded and when the gradient checker re-evaluates the graph
//! under perturbed leaves, so the two can never drift apart.

use super::{Node, Op, Var};
use crate::error::TensorError;
use crate::scalar::Scalar;

/// Direct inputs of an op, in a fixed order.
pub(crate) fn parents_of<S: Scalar>(op: &Op<S>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
        Op::Neg(a)
        | Op::AddScalar(a, _)
        | Op::MulScalar(a, _)
        | Op::DivScalar(a, _)
        | Op::Exp(a)
        | Op::Tanh(a)
        | Op::LogEps(a)
        | Op::Pow(a, _)
        | Op::SumAll(a)
        | Op::SumAxis(a, _)
        | Op::Transpose(a)
        | Op::Reshape(a)
        | Op::SoftmaxRows(a)
        | Op::L2NormCols(a)
        | Op::Detach(a) => vec![*a],
        Op::MaxAxis { x, .. } => vec![*x],
        Op::MatMul(a, b) | Op::ColsDiv(a, b) | Op::RowsSub(a, b) => vec![*a, *b],
        Op::Conv2d { x, w, b, .. } => {
            let mut p = vec![*x, *w];
            if let Some(bv) = b {
                p.push(*bv);
            }
            p
        }
        Op::Concat { parts, .. } => parts.clone(),
        Op::GatherRows { x, .. } | Op::GatherEntries { x, .. } => vec![*x],
        Op::ContrastNormRows { x, .. } => vec![*x],
    }
}

/// Split a shape at `axis` into (outer, axis length, inner) extents, where
/// flat index = (o * len + k) * inner + i.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn vals<'a, S: Scalar>(nodes: &'a [Node<S>], v: Var) -> &'a [S] {
    &nodes[v.0].values
}

fn shape<'a, S: Scalar>(nodes: &'a [Node<S>], v: Var) -> &'a [usize] {
    &nodes[v.0].shape
}

fn check_finite<S: Scalar>(op: &'static str, out: &[S]) -> Result<(), TensorError> {
    if out.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op });
    }
    Ok(())
}

/// Evaluate one op from its parents' current values. Shapes were validated
/// when the op was recorded.
pub(crate) fn eval_op<S: Scalar>(
    op: &Op<S>,
    out_shape: &[usize],
    nodes: &[Node<S>],
) -> Result<Vec<S>, TensorError> {
    match op {
        // Leaves hold external data and detached nodes hold frozen snapshots;
        // neither is ever re-evaluated.
        Op::Leaf | Op::Detach(_) => unreachable!("leaf/detach values are pinned"),

        Op::Add(a, b) => Ok(zip_map(vals(nodes, *a), vals(nodes, *b), |x, y| x + y)),
        Op::Sub(a, b) => Ok(zip_map(vals(nodes, *a), vals(nodes, *b), |x, y| x - y)),
        Op::Mul(a, b) => Ok(zip_map(vals(nodes, *a), vals(nodes, *b), |x, y| x * y)),
        Op::Div(a, b) => {
            let bv = vals(nodes, *b);
            if bv.iter().any(|&v| v == S::zero()) {
                return Err(TensorError::domain("div", "division by zero"));
            }
            let out = zip_map(vals(nodes, *a), bv, |x, y| x / y);
            check_finite("div", &out)?;
            Ok(out)
        }
        Op::Neg(a) => Ok(vals(nodes, *a).iter().map(|&v| -v).collect()),
        Op::AddScalar(a, s) => Ok(vals(nodes, *a).iter().map(|&v| v + *s).collect()),
        Op::MulScalar(a, s) => Ok(vals(nodes, *a).iter().map(|&v| v * *s).collect()),
        Op::DivScalar(a, s) => {
            let out: Vec<S> = vals(nodes, *a).iter().map(|&v| v / *s).collect();
            check_finite("div_scalar", &out)?;
            Ok(out)
        }

        Op::Exp(a) => {
            let out: Vec<S> = vals(nodes, *a).iter().map(|&v| v.exp()).collect();
            check_finite("exp", &out)?;
            Ok(out)
        }
        Op::Tanh(a) => Ok(vals(nodes, *a).iter().map(|&v| v.tanh()).collect()),
        Op::LogEps(a) => {
            let eps = S::GUARD_EPS;
            let mut out = Vec::with_capacity(nodes[a.0].values.len());
            for &v in vals(nodes, *a) {
                let t = v + eps;
                if t <= S::zero() {
                    return Err(TensorError::domain(
                        "log_eps",
                        format!("argument {} is not above -eps", v),
                    ));
                }
                out.push(t.ln());
            }
            check_finite("log_eps", &out)?;
            Ok(out)
        }
        Op::Pow(a, p) => {
            let p = *p;
            let integral = p.fract() == S::zero();
            let mut out = Vec::with_capacity(nodes[a.0].values.len());
            for &v in vals(nodes, *a) {
                if v < S::zero() && !integral {
                    return Err(TensorError::domain(
                        "pow",
                        format!("negative base {} with fractional exponent", v),
                    ));
                }
                if v == S::zero() && p != S::zero() && p < S::one() {
                    return Err(TensorError::domain(
                        "pow",
                        "zero base with exponent below one",
                    ));
                }
                out.push(v.powf(p));
            }
            check_finite("pow", &out)?;
            Ok(out)
        }

        Op::SumAll(a) => Ok(vec![vals(nodes, *a).iter().copied().sum()]),
        Op::SumAxis(a, axis) => {
            let (outer, len, inner) = axis_split(shape(nodes, *a), *axis);
            let x = vals(nodes, *a);
            let mut out = vec![S::zero(); outer * inner];
            for o in 0..outer {
                let dst = &mut out[o * inner..(o + 1) * inner];
                for k in 0..len {
                    let src = &x[(o * len + k) * inner..(o * len + k + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            Ok(out)
        }
        Op::MaxAxis { x, axis, argmax } => {
            let (outer, len, inner) = axis_split(shape(nodes, *x), *axis);
            let xv = vals(nodes, *x);
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let k = argmax[o * inner + i] as usize;
                    out.push(xv[(o * len + k) * inner + i]);
                }
            }
            Ok(out)
        }

        Op::MatMul(a, b) => {
            let (m, k) = dims2(shape(nodes, *a));
            let (_, n) = dims2(shape(nodes, *b));
            Ok(matmul_kernel(vals(nodes, *a), vals(nodes, *b), m, k, n))
        }
        Op::Transpose(a) => {
            let (r, c) = dims2(shape(nodes, *a));
            let x = vals(nodes, *a);
            let mut out = vec![S::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x[i * c + j];
                }
            }
            Ok(out)
        }
        Op::Reshape(a) => Ok(vals(nodes, *a).to_vec()),

        Op::Conv2d { x, w, b, stride } => {
            let bv = b.map(|bb| vals(nodes, bb));
            Ok(conv2d_forward(
                vals(nodes, *x),
                shape(nodes, *x),
                vals(nodes, *w),
                shape(nodes, *w),
                bv,
                *stride,
                out_shape,
            ))
        }

        Op::SoftmaxRows(a) => {
            let (r, c) = dims2(shape(nodes, *a));
            let x = vals(nodes, *a);
            let mut out = vec![S::zero(); r * c];
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                let m = row.iter().copied().fold(row[0], S::max);
                let dst = &mut out[i * c..(i + 1) * c];
                let mut sum = S::zero();
                for (d, &v) in dst.iter_mut().zip(row) {
                    let e = (v - m).exp();
                    *d = e;
                    sum += e;
                }
                for d in dst.iter_mut() {
                    *d /= sum;
                }
            }
            Ok(out)
        }
        Op::L2NormCols(a) => {
            let (r, c) = dims2(shape(nodes, *a));
            let x = vals(nodes, *a);
            let mut acc = vec![S::zero(); c];
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                for (a_j, &v) in acc.iter_mut().zip(row) {
                    *a_j += v * v;
                }
            }
            Ok(acc
                .into_iter()
                .map(|s| s.sqrt().max(S::GUARD_EPS))
                .collect())
        }
        Op::ColsDiv(a, v) => {
            let (r, c) = dims2(shape(nodes, *a));
            let x = vals(nodes, *a);
            let d = vals(nodes, *v);
            if d.iter().any(|&v| v == S::zero()) {
                return Err(TensorError::domain("cols_div", "division by zero"));
            }
            let mut out = vec![S::zero(); r * c];
            for i in 0..r {
                let src = &x[i * c..(i + 1) * c];
                let dst = &mut out[i * c..(i + 1) * c];
                for ((o, &xv), &dv) in dst.iter_mut().zip(src).zip(d) {
                    *o = xv / dv;
                }
            }
            check_finite("cols_div", &out)?;
            Ok(out)
        }
        Op::RowsSub(a, v) => {
            let (r, c) = dims2(shape(nodes, *a));
            let x = vals(nodes, *a);
            let s = vals(nodes, *v);
            let mut out = vec![S::zero(); r * c];
            for i in 0..r {
                let src = &x[i * c..(i + 1) * c];
                let dst = &mut out[i * c..(i + 1) * c];
                let si = s[i];
                for (o, &xv) in dst.iter_mut().zip(src) {
                    *o = xv - si;
                }
            }
            Ok(out)
        }

        Op::Concat { parts, axis } => {
            let (outer, total, inner) = axis_split(out_shape, *axis);
            let mut out = vec![S::zero(); outer * total * inner];
            let out_chunk = total * inner;
            let mut offset = 0usize;
            for &p in parts {
                let len = shape(nodes, p)[*axis];
                let chunk = len * inner;
                let x = vals(nodes, p);
                for o in 0..outer {
                    out[o * out_chunk + offset..o * out_chunk + offset + chunk]
                        .copy_from_slice(&x[o * chunk..(o + 1) * chunk]);
                }
                offset += chunk;
            }
            Ok(out)
        }
        Op::GatherRows { x, rows } => {
            let (_, c) = dims2(shape(nodes, *x));
            let xv = vals(nodes, *x);
            let mut out = Vec::with_capacity(rows.len() * c);
            for &r in rows {
                let r = r as usize;
                out.extend_from_slice(&xv[r * c..(r + 1) * c]);
            }
            Ok(out)
        }
        Op::GatherEntries { x, entries } => {
            let (_, c) = dims2(shape(nodes, *x));
            let xv = vals(nodes, *x);
            Ok(entries
                .iter()
                .map(|&(r, cc)| xv[r as usize * c + cc as usize])
                .collect())
        }

        Op::ContrastNormRows {
            x,
            mu,
            inv_sigma,
            degenerate,
        } => {
            let (r, c) = dims2(shape(nodes, *x));
            let xv = vals(nodes, *x);
            let mut out = vec![S::zero(); r * c];
            for i in 0..r {
                if degenerate[i] {
                    continue; // stays zero
                }
                let src = &xv[i * c..(i + 1) * c];
                let dst = &mut out[i * c..(i + 1) * c];
                let (m, s) = (mu[i], inv_sigma[i]);
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = (v - m) * s;
                }
            }
            Ok(out)
        }
    }
}

fn zip_map<S: Scalar>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    debug_assert_eq!(shape.len(), 2);
    (shape[0], shape[1])
}

/// C[m,n] = A[m,k] * B[k,n], accumulation over k in index order.
pub(crate) fn matmul_kernel<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
    c
}

/// Zero-padded 2-D convolution. The stride-1 inner loop runs over contiguous
/// slices so it vectorizes; stride 2 falls back to indexed reads.
fn conv2d_forward<S: Scalar>(
    x: &[S],
    xs: &[usize],
    w: &[S],
    ws: &[usize],
    b: Option<&[S]>,
    stride: usize,
    out_shape: &[usize],
) -> Vec<S> {
    let (cin, h, wd) = (xs[0], xs[1], xs[2]);
    let (cout, k) = (ws[0], ws[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let pad = k / 2;
    let mut out = vec![S::zero(); cout * oh * ow];
    for co in 0..cout {
        let bias = b.map_or(S::zero(), |bv| bv[co]);
        let out_c = &mut out[co * oh * ow..(co + 1) * oh * ow];
        if bias != S::zero() {
            out_c.iter_mut().for_each(|v| *v = bias);
        }
        for oy in 0..oh {
            let out_row = &mut out_c[oy * ow..(oy + 1) * ow];
            for ci in 0..cin {
                let x_c = &x[ci * h * wd..(ci + 1) * h * wd];
                let w_base = ((co * cin) + ci) * k * k;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_row = &x_c[iy as usize * wd..(iy as usize + 1) * wd];
                    for kx in 0..k {
                        let wv = w[w_base + ky * k + kx];
                        // ix = ox*stride + kx - pad must lie in [0, wd)
                        let (lo, hi) = ox_range(ow, wd, stride, kx, pad);
                        if lo >= hi {
                            continue;
                        }
                        if stride == 1 {
                            // lo + kx - pad is non-negative by construction of lo
                            let src = &x_row[(lo + kx) - pad..(hi + kx) - pad];
                            for (d, &s) in out_row[lo..hi].iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in lo..hi {
                                let ix = ox * stride + kx - pad;
                                out_row[ox] += wv * x_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output-x range [lo, hi) for which ix = ox*stride + kx - pad is in [0, wd).
pub(crate) fn ox_range(ow: usize, wd: usize, stride: usize, kx: usize, pad: usize) -> (usize, usize) {
    // ox >= (pad - kx) / stride, rounded up, when kx < pad
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx + stride - 1) / stride
    };
    // ox*stride + kx - pad <= wd - 1  =>  ox <= (wd - 1 + pad - kx) / stride
    let hi = if wd + pad > kx {
        ((wd + pad - kx - 1) / stride + 1).min(ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}
