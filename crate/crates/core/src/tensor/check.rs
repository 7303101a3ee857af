//! Finite-difference gradient verification.
//!
//! The checker treats a built graph as a fixed function of its leaves:
//! perturbing a leaf re-evaluates exactly the nodes downstream of it, while
//! detached values, contrast statistics and argmax choices stay frozen. This
//! matches what backward differentiates, so analytic and numeric gradients
//! are comparable even for losses with gradient barriers inside.

use super::ops::{eval_op, parents_of};
use super::{Graph, Op, Var};
use crate::error::TensorError;
use crate::scalar::Scalar;

/// Relative error between one analytic and one numeric derivative:
/// |a - n| / max(1e-8, |a| + |n|).
pub fn rel_error<S: Scalar>(analytic: S, numeric: S) -> S {
    let denom = (analytic.abs() + numeric.abs()).max(S::lit(1e-8));
    (analytic - numeric).abs() / denom
}

/// Worst [`rel_error`] over two gradient vectors of equal length.
pub fn max_relative_error<S: Scalar>(analytic: &[S], numeric: &[S]) -> S {
    debug_assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(S::zero(), S::max)
}

/// Compare the analytic gradient of `root` against central finite
/// differences for every leaf in `wrt`, returning the worst relative error.
///
/// Leaves must be inputs created with [`Graph::leaf`]. The graph is restored
/// to its original values before returning. Errors if a perturbed evaluation
/// leaves an op's domain or produces a non-finite root.
pub fn finite_diff_check<S: Scalar>(
    g: &mut Graph<S>,
    root: Var,
    wrt: &[Var],
    eps: S,
) -> Result<S, TensorError> {
    if !(eps > S::zero()) {
        return Err(TensorError::invalid("finite_diff_check", "eps must be > 0"));
    }
    for &v in wrt {
        if v.0 >= g.nodes.len() || !matches!(g.nodes[v.0].op, Op::Leaf) {
            return Err(TensorError::invalid(
                "finite_diff_check",
                "wrt entries must be leaves of this graph",
            ));
        }
    }
    g.backward(root)?;
    let analytic: Vec<Vec<S>> = wrt.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut worst = S::zero();
    for (leaf, analytic) in wrt.iter().zip(&analytic) {
        let affected = affected_nodes(g, *leaf, root);
        // Snapshot everything the perturbation can touch so the graph can be
        // restored bitwise.
        let saved: Vec<(usize, Vec<S>)> = affected
            .iter()
            .map(|&i| (i, g.nodes[i].values.clone()))
            .collect();

        let n = g.nodes[leaf.0].values.len();
        for k in 0..n {
            let orig = g.nodes[leaf.0].values[k];
            g.nodes[leaf.0].values[k] = orig + eps;
            let f_plus = replay(g, &affected, root);
            g.nodes[leaf.0].values[k] = orig - eps;
            let f_minus = replay(g, &affected, root);
            g.nodes[leaf.0].values[k] = orig;
            let (f_plus, f_minus) = match (f_plus, f_minus) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(e), _) | (_, Err(e)) => {
                    restore(g, &saved);
                    return Err(e);
                }
            };
            let numeric = (f_plus - f_minus) / (eps + eps);
            worst = worst.max(rel_error(analytic[k], numeric));
        }
        restore(g, &saved);
    }
    Ok(worst)
}

/// Indices (ascending) of non-leaf nodes whose values change when `leaf`
/// moves, up to and including the root if it is affected. Detach nodes stop
/// the propagation: their values are snapshots.
fn affected_nodes<S: Scalar>(g: &Graph<S>, leaf: Var, root: Var) -> Vec<usize> {
    if leaf.0 > root.0 {
        return Vec::new(); // created after the root: cannot influence it
    }
    let mut touched = vec![false; root.0 + 1];
    touched[leaf.0] = true;
    let mut out = Vec::new();
    for i in leaf.0 + 1..=root.0 {
        let op = &g.nodes[i].op;
        if matches!(op, Op::Leaf | Op::Detach(_)) {
            continue;
        }
        if parents_of(op).iter().any(|p| p.0 <= root.0 && touched[p.0]) {
            touched[i] = true;
            out.push(i);
        }
    }
    out
}

/// Re-evaluate the affected nodes in creation order and read the root value.
/// Must only run while the perturbed leaf is in place.
fn replay<S: Scalar>(g: &mut Graph<S>, affected: &[usize], root: Var) -> Result<S, TensorError> {
    for &i in affected {
        let node = &g.nodes[i];
        let values = eval_op(&node.op, &node.shape, &g.nodes)?;
        g.nodes[i].values = values;
    }
    let f = g.nodes[root.0].values[0];
    if !f.is_finite() {
        return Err(TensorError::NonFinite {
            op: "finite_diff_check",
        });
    }
    Ok(f)
}

fn restore<S: Scalar>(g: &mut Graph<S>, saved: &[(usize, Vec<S>)]) {
    for (i, v) in saved {
        g.nodes[*i].values = v.clone();
    }
}
