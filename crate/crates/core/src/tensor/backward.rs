//! Reverse pass. Nodes are visited in strictly decreasing creation order and
//! every accumulation is sequential, so gradients are bitwise reproducible.

use super::ops::{axis_split, ox_range, parents_of};
use super::{Graph, Node, Op, Var};
use crate::error::TensorError;
use crate::scalar::Scalar;

impl<S: Scalar> Graph<S> {
    /// Populate gradients of the scalar `root` with respect to every
    /// reachable gradient-requiring node. Gradients from a previous call are
    /// discarded, never accumulated across calls.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        self.check_var("backward", root)?;
        if self.nodes[root.0].values.len() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: self.nodes[root.0].shape.clone(),
            });
        }

        // Reachability from the root through parent edges; detached nodes are
        // reachable but their parents (through that edge) are not.
        let mut reach = vec![false; self.nodes.len()];
        reach[root.0] = true;
        let mut stack = vec![root.0];
        while let Some(i) = stack.pop() {
            if matches!(self.nodes[i].op, Op::Detach(_)) {
                continue;
            }
            for p in parents_of(&self.nodes[i].op) {
                if !reach[p.0] {
                    reach[p.0] = true;
                    stack.push(p.0);
                }
            }
        }

        for n in &mut self.nodes {
            n.grad = None;
        }

        let mut grads: Vec<Vec<S>> = vec![Vec::new(); self.nodes.len()];
        grads[root.0] = vec![S::one()];

        for i in (0..=root.0).rev() {
            if !reach[i] || grads[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            self.backprop_node(i, &g, &mut grads);
            if self.nodes[i].needs_grad {
                self.nodes[i].grad = Some(g);
            }
        }
        Ok(())
    }

    /// Distribute the gradient `g` of node `i` onto its parents.
    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Vec<S>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].values;
        match &nodes[i].op {
            Op::Leaf | Op::Detach(_) => {}

            Op::Add(a, b) => {
                acc(grads, nodes, *a, |d| add_assign(d, g));
                acc(grads, nodes, *b, |d| add_assign(d, g));
            }
            Op::Sub(a, b) => {
                acc(grads, nodes, *a, |d| add_assign(d, g));
                acc(grads, nodes, *b, |d| sub_assign(d, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].values, &nodes[b.0].values);
                acc(grads, nodes, *a, |d| {
                    for ((d, &g), &b) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * b;
                    }
                });
                acc(grads, nodes, *b, |d| {
                    for ((d, &g), &a) in d.iter_mut().zip(g).zip(av) {
                        *d += g * a;
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = &nodes[b.0].values;
                acc(grads, nodes, *a, |d| {
                    for ((d, &g), &b) in d.iter_mut().zip(g).zip(bv) {
                        *d += g / b;
                    }
                });
                // d(a/b)/db = -out/b
                acc(grads, nodes, *b, |d| {
                    for (((d, &g), &o), &b) in d.iter_mut().zip(g).zip(out).zip(bv) {
                        *d -= g * o / b;
                    }
                });
            }
            Op::Neg(a) => acc(grads, nodes, *a, |d| sub_assign(d, g)),
            Op::AddScalar(a, _) => acc(grads, nodes, *a, |d| add_assign(d, g)),
            Op::MulScalar(a, s) => {
                let s = *s;
                acc(grads, nodes, *a, |d| {
                    for (d, &g) in d.iter_mut().zip(g) {
                        *d += g * s;
                    }
                });
            }
            Op::DivScalar(a, s) => {
                let s = *s;
                acc(grads, nodes, *a, |d| {
                    for (d, &g) in d.iter_mut().zip(g) {
                        *d += g / s;
                    }
                });
            }

            Op::Exp(a) => acc(grads, nodes, *a, |d| {
                for ((d, &g), &o) in d.iter_mut().zip(g).zip(out) {
                    *d += g * o;
                }
            }),
            Op::Tanh(a) => acc(grads, nodes, *a, |d| {
                for ((d, &g), &o) in d.iter_mut().zip(g).zip(out) {
                    *d += g * (S::one() - o * o);
                }
            }),
            Op::LogEps(a) => {
                let xv = &nodes[a.0].values;
                acc(grads, nodes, *a, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(xv) {
                        *d += g / (x + S::GUARD_EPS);
                    }
                });
            }
            Op::Pow(a, p) => {
                let (p, xv) = (*p, &nodes[a.0].values);
                acc(grads, nodes, *a, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(xv) {
                        *d += g * p * x.powf(p - S::one());
                    }
                });
            }

            Op::SumAll(a) => {
                let g0 = g[0];
                acc(grads, nodes, *a, |d| {
                    for d in d.iter_mut() {
                        *d += g0;
                    }
                });
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = axis_split(&nodes[a.0].shape, *axis);
                acc(grads, nodes, *a, |d| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for k in 0..len {
                            let dst = &mut d[(o * len + k) * inner..(o * len + k + 1) * inner];
                            add_assign(dst, src);
                        }
                    }
                });
            }
            Op::MaxAxis { x, axis, argmax } => {
                let (outer, len, inner) = axis_split(&nodes[x.0].shape, *axis);
                acc(grads, nodes, *x, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let k = argmax[o * inner + i] as usize;
                            d[(o * len + k) * inner + i] += g[o * inner + i];
                        }
                    }
                });
            }

            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (av, bv) = (&nodes[a.0].values, &nodes[b.0].values);
                // dA[i,p] = sum_n g[i,n] * B[p,n]
                acc(grads, nodes, *a, |d| {
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        let d_row = &mut d[i * k..(i + 1) * k];
                        for (p, dv) in d_row.iter_mut().enumerate() {
                            let b_row = &bv[p * n..(p + 1) * n];
                            let mut s = S::zero();
                            for (&gv, &bb) in g_row.iter().zip(b_row) {
                                s += gv * bb;
                            }
                            *dv += s;
                        }
                    }
                });
                // dB[p,n] = sum_i A[i,p] * g[i,n]
                acc(grads, nodes, *b, |d| {
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        let a_row = &av[i * k..(i + 1) * k];
                        for (p, &a_ip) in a_row.iter().enumerate() {
                            let d_row = &mut d[p * n..(p + 1) * n];
                            for (dv, &gv) in d_row.iter_mut().zip(g_row) {
                                *dv += a_ip * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                acc(grads, nodes, *a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(grads, nodes, *a, |d| add_assign(d, g)),

            Op::Conv2d { x, w, b, stride } => {
                let (gx, gw, gb) = conv2d_backward(
                    &nodes[x.0].values,
                    &nodes[x.0].shape,
                    &nodes[w.0].values,
                    &nodes[w.0].shape,
                    g,
                    &nodes[i].shape,
                    *stride,
                    nodes[x.0].needs_grad,
                    nodes[w.0].needs_grad,
                    b.map_or(false, |bb| nodes[bb.0].needs_grad),
                );
                if let Some(gx) = gx {
                    acc(grads, nodes, *x, |d| add_assign(d, &gx));
                }
                if let Some(gw) = gw {
                    acc(grads, nodes, *w, |d| add_assign(d, &gw));
                }
                if let (Some(gb), Some(bv)) = (gb, *b) {
                    acc(grads, nodes, bv, |d| add_assign(d, &gb));
                }
            }

            Op::SoftmaxRows(a) => {
                let (r, c) = (nodes[i].shape[0], nodes[i].shape[1]);
                acc(grads, nodes, *a, |d| {
                    for row in 0..r {
                        let s = &out[row * c..(row + 1) * c];
                        let gr = &g[row * c..(row + 1) * c];
                        let dr = &mut d[row * c..(row + 1) * c];
                        let mut dot = S::zero();
                        for (&gv, &sv) in gr.iter().zip(s) {
                            dot += gv * sv;
                        }
                        for ((dv, &gv), &sv) in dr.iter_mut().zip(gr).zip(s) {
                            *dv += sv * (gv - dot);
                        }
                    }
                });
            }
            Op::L2NormCols(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let xv = &nodes[a.0].values;
                // out[j] was floored at eps; clamped columns pass no gradient.
                acc(grads, nodes, *a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            if out[j] > S::GUARD_EPS {
                                d[i * c + j] += g[j] * xv[i * c + j] / out[j];
                            }
                        }
                    }
                });
            }
            Op::ColsDiv(a, v) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let dv = &nodes[v.0].values;
                acc(grads, nodes, *a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[i * c + j] / dv[j];
                        }
                    }
                });
                // d(x/v)/dv = -out/v
                acc(grads, nodes, *v, |d| {
                    for i in 0..r {
                        for (j, dj) in d.iter_mut().enumerate() {
                            *dj -= g[i * c + j] * out[i * c + j] / dv[j];
                        }
                    }
                });
            }
            Op::RowsSub(a, v) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                acc(grads, nodes, *a, |d| add_assign(d, g));
                acc(grads, nodes, *v, |d| {
                    for (i, di) in d.iter_mut().enumerate().take(r) {
                        for j in 0..c {
                            *di -= g[i * c + j];
                        }
                    }
                });
            }

            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_split(&nodes[i].shape, *axis);
                let out_chunk = nodes[i].shape[*axis] * inner;
                let mut offset = 0usize;
                for &p in parts {
                    let chunk = nodes[p.0].shape[*axis] * inner;
                    acc(grads, nodes, p, |d| {
                        for o in 0..outer {
                            let src = &g[o * out_chunk + offset..o * out_chunk + offset + chunk];
                            add_assign(&mut d[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::GatherRows { x, rows } => {
                let c = nodes[x.0].shape[1];
                acc(grads, nodes, *x, |d| {
                    for (k, &r) in rows.iter().enumerate() {
                        let r = r as usize;
                        add_assign(&mut d[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::GatherEntries { x, entries } => {
                let c = nodes[x.0].shape[1];
                acc(grads, nodes, *x, |d| {
                    for (k, &(r, cc)) in entries.iter().enumerate() {
                        d[r as usize * c + cc as usize] += g[k];
                    }
                });
            }

            Op::ContrastNormRows {
                x,
                inv_sigma,
                degenerate,
                ..
            } => {
                let c = nodes[i].shape[1];
                acc(grads, nodes, *x, |d| {
                    for (row, (&inv, &deg)) in inv_sigma.iter().zip(degenerate).enumerate() {
                        if deg {
                            continue;
                        }
                        let gr = &g[row * c..(row + 1) * c];
                        let dr = &mut d[row * c..(row + 1) * c];
                        for (dv, &gv) in dr.iter_mut().zip(gr) {
                            *dv += gv * inv;
                        }
                    }
                });
            }
        }
    }
}

/// Accumulate a gradient contribution onto parent `p` if it wants one. The
/// parent buffer is taken out of the arena while the closure runs, so a node
/// used twice by one op (e.g. `mul(x, x)`) accumulates both contributions.
fn acc<S: Scalar>(
    grads: &mut [Vec<S>],
    nodes: &[Node<S>],
    p: Var,
    f: impl FnOnce(&mut [S]),
) {
    if !nodes[p.0].needs_grad {
        return;
    }
    let mut buf = std::mem::take(&mut grads[p.0]);
    if buf.is_empty() {
        buf = vec![S::zero(); nodes[p.0].values.len()];
    }
    f(&mut buf);
    grads[p.0] = buf;
}

fn add_assign<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_assign<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}

/// Gradients of a conv2d in one traversal: returns (dx, dw, db) for the
/// inputs that were requested.
#[allow(clippy::too_many_arguments)]
fn conv2d_backward<S: Scalar>(
    x: &[S],
    xs: &[usize],
    w: &[S],
    ws: &[usize],
    g: &[S],
    out_shape: &[usize],
    stride: usize,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>, Option<Vec<S>>) {
    let (cin, h, wd) = (xs[0], xs[1], xs[2]);
    let (cout, k) = (ws[0], ws[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let pad = k / 2;
    let mut gx = need_x.then(|| vec![S::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![S::zero(); w.len()]);
    let mut gb = need_b.then(|| vec![S::zero(); cout]);

    for co in 0..cout {
        let g_c = &g[co * oh * ow..(co + 1) * oh * ow];
        if let Some(gb) = gb.as_mut() {
            gb[co] = g_c.iter().copied().sum();
        }
        if gx.is_none() && gw.is_none() {
            continue;
        }
        for oy in 0..oh {
            let g_row = &g_c[oy * ow..(oy + 1) * ow];
            for ci in 0..cin {
                let w_base = ((co * cin) + ci) * k * k;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row_off = ci * h * wd + iy as usize * wd;
                    for kx in 0..k {
                        let (lo, hi) = ox_range(ow, wd, stride, kx, pad);
                        if lo >= hi {
                            continue;
                        }
                        if let Some(gw) = gw.as_mut() {
                            let x_row = &x[row_off..row_off + wd];
                            let mut s = S::zero();
                            if stride == 1 {
                                let src = &x_row[(lo + kx) - pad..(hi + kx) - pad];
                                for (&gv, &xv) in g_row[lo..hi].iter().zip(src) {
                                    s += gv * xv;
                                }
                            } else {
                                for ox in lo..hi {
                                    s += g_row[ox] * x_row[ox * stride + kx - pad];
                                }
                            }
                            gw[w_base + ky * k + kx] += s;
                        }
                        if let Some(gx) = gx.as_mut() {
                            let wv = w[w_base + ky * k + kx];
                            let gx_row = &mut gx[row_off..row_off + wd];
                            if stride == 1 {
                                let dst = &mut gx_row[(lo + kx) - pad..(hi + kx) - pad];
                                for (d, &gv) in dst.iter_mut().zip(&g_row[lo..hi]) {
                                    *d += wv * gv;
                                }
                            } else {
                                for ox in lo..hi {
                                    gx_row[ox * stride + kx - pad] += wv * g_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}
