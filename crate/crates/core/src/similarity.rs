//! Pixel-to-pixel similarity maps between two images.
//!
//! A similarity map D is an [N_from, N_to] matrix inside a graph: D[i, j]
//! scores pixel i of the "from" image against pixel j of the "to" image.
//! Two kinds are supported: cosine similarity on feature columns, and
//! negative KL divergence on per-pixel class distributions. Both are built
//! from differentiable ops, so losses defined on a map backpropagate into
//! the features or probabilities that produced it.

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Which way a map points. The cycle uses one of each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    SourceToTarget,
    TargetToSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimKind {
    Cosine,
    NegKl,
}

/// A similarity matrix with its provenance. `normalized` records whether
/// per-row contrast normalization has been applied.
#[derive(Clone, Copy, Debug)]
pub struct SimMatrix {
    pub entries: Var,
    pub kind: SimKind,
    pub direction: Direction,
    pub normalized: bool,
    pub n_from: usize,
    pub n_to: usize,
}

/// Column distributions must sum to one within this tolerance.
pub const PROB_TOL: f64 = 1e-6;

/// Cosine similarity between every column of `f_from` [C, N_from] and every
/// column of `f_to` [C, N_to]. Columns are L2-normalized with an epsilon
/// floor, so an all-zero feature vector scores zero against everything
/// instead of poisoning the map.
pub fn cosine_similarity_map<S: Scalar>(
    g: &mut Graph<S>,
    f_from: Var,
    f_to: Var,
    direction: Direction,
) -> Result<SimMatrix, TensorError> {
    let (entries, n_from, n_to) = cosine_entries(g, f_from, f_to)?;
    Ok(SimMatrix {
        entries,
        kind: SimKind::Cosine,
        direction,
        normalized: false,
        n_from,
        n_to,
    })
}

/// The differentiable core of the cosine map; also used by aggregation.
pub(crate) fn cosine_entries<S: Scalar>(
    g: &mut Graph<S>,
    f_from: Var,
    f_to: Var,
) -> Result<(Var, usize, usize), TensorError> {
    let sf = g.shape(f_from).to_vec();
    let st = g.shape(f_to).to_vec();
    if sf.len() != 2 || st.len() != 2 || sf[0] != st[0] {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_similarity_map",
            lhs: sf,
            rhs: st,
        });
    }
    if sf[0] == 0 || sf[1] == 0 || st[1] == 0 {
        return Err(TensorError::invalid(
            "cosine_similarity_map",
            "empty feature matrix",
        ));
    }
    let (n_from, n_to) = (sf[1], st[1]);
    let u_from = unit_columns(g, f_from)?;
    let u_to = unit_columns(g, f_to)?;
    let ut = g.transpose(u_from)?;
    let entries = g.matmul(ut, u_to)?;
    Ok((entries, n_from, n_to))
}

/// Columns scaled to unit Euclidean norm (zero columns stay zero).
fn unit_columns<S: Scalar>(g: &mut Graph<S>, f: Var) -> Result<Var, TensorError> {
    let norms = g.l2_norm_cols(f)?;
    g.cols_div(f, norms)
}

/// Negative KL divergence -KL(p_from_i || p_to_j) between per-pixel class
/// distributions, shapes [M, N]. Larger is more similar; the diagonal of a
/// self-map is exactly zero. Columns are validated as distributions.
pub fn kl_similarity_map<S: Scalar>(
    g: &mut Graph<S>,
    p_from: Var,
    p_to: Var,
    direction: Direction,
) -> Result<SimMatrix, TensorError> {
    let (m_from, n_from) = validate_prob_columns(g, p_from, "kl_similarity_map")?;
    let (m_to, n_to) = validate_prob_columns(g, p_to, "kl_similarity_map")?;
    if m_from != m_to {
        return Err(TensorError::ShapeMismatch {
            op: "kl_similarity_map",
            lhs: g.shape(p_from).to_vec(),
            rhs: g.shape(p_to).to_vec(),
        });
    }
    // -KL(p||q) = sum_m p ln q - sum_m p ln p, with the epsilon-guarded log.
    let log_to = g.log_eps(p_to)?;
    let pt = g.transpose(p_from)?;
    let cross = g.matmul(pt, log_to)?; // [N_from, N_to]
    let log_from = g.log_eps(p_from)?;
    let self_term = g.mul(p_from, log_from)?;
    let ent = g.sum_axis(self_term, 0)?; // [N_from]
    let entries = g.rows_sub(cross, ent)?;
    Ok(SimMatrix {
        entries,
        kind: SimKind::NegKl,
        direction,
        normalized: false,
        n_from,
        n_to,
    })
}

/// Check that every column of a [M, N] matrix is a probability distribution:
/// non-negative entries, sums within [`PROB_TOL`] of one.
pub fn validate_prob_columns<S: Scalar>(
    g: &Graph<S>,
    p: Var,
    op: &'static str,
) -> Result<(usize, usize), TensorError> {
    let shape = g.shape(p).to_vec();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(TensorError::invalid(
            op,
            format!("expected a non-empty [classes, pixels] matrix, got {:?}", shape),
        ));
    }
    let (m, n) = (shape[0], shape[1]);
    let v = g.values(p);
    let tol = S::lit(PROB_TOL);
    for j in 0..n {
        let mut sum = S::zero();
        for i in 0..m {
            let x = v[i * n + j];
            if x < S::zero() {
                return Err(TensorError::domain(
                    op,
                    format!("negative probability {x} in column {j}"),
                ));
            }
            sum += x;
        }
        if (sum - S::one()).abs() > tol {
            return Err(TensorError::domain(
                op,
                format!("column {j} sums to {sum}, not 1"),
            ));
        }
    }
    Ok((m, n))
}

/// Per-row contrast normalization of a similarity map. Statistics are frozen
/// at call time (see the tensor engine docs); applying it twice is an error
/// because the second pass would standardize already-standardized scores.
pub fn contrast_normalize<S: Scalar>(
    g: &mut Graph<S>,
    sim: &SimMatrix,
) -> Result<SimMatrix, TensorError> {
    if sim.normalized {
        return Err(TensorError::invalid(
            "contrast_normalize",
            "similarity map is already normalized",
        ));
    }
    let entries = g.contrast_norm_rows(sim.entries)?;
    Ok(SimMatrix {
        entries,
        normalized: true,
        ..*sim
    })
}
