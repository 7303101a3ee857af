//! Training objectives.
//!
//! All losses are built on the tape and return a scalar [`Var`]; everything
//! that must not receive gradients (association choices, Lovász sort
//! permutations, regularizer gates) is frozen as constants or detached, so
//! each loss is an honest differentiable function of its tensor inputs.

use crate::association::AssociationSet;
use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::similarity::{
    contrast_normalize, cosine_similarity_map, kl_similarity_map, validate_prob_columns,
    Direction, SimMatrix,
};
use crate::tensor::{Graph, Var};
use crate::IGNORE_LABEL;

/// Pixel-averaged cross-entropy -mean log P[y_i, i] over non-ignored pixels.
/// `probs` is [M, N] with distribution columns; labels must be < M or the
/// ignore value. Errors if every pixel is ignored.
pub fn cross_entropy_loss<S: Scalar>(
    g: &mut Graph<S>,
    probs: Var,
    labels: &[u8],
) -> Result<Var, TensorError> {
    let (m, n) = validate_prob_columns(g, probs, "cross_entropy_loss")?;
    let entries = label_entries(m, n, labels, "cross_entropy_loss")?;
    if entries.is_empty() {
        return Err(TensorError::invalid(
            "cross_entropy_loss",
            "every pixel is ignored",
        ));
    }
    let k = entries.len();
    let picked = g.gather_entries(probs, &entries)?;
    let logs = g.log_eps(picked)?;
    let total = g.sum_all(logs)?;
    g.mul_scalar(total, S::lit(-1.0 / k as f64))
}

/// (label, pixel) gather positions for the supervised losses.
fn label_entries(
    m: usize,
    n: usize,
    labels: &[u8],
    op: &'static str,
) -> Result<Vec<(usize, usize)>, TensorError> {
    if labels.len() != n {
        return Err(TensorError::invalid(
            op,
            format!("{} labels for {} pixels", labels.len(), n),
        ));
    }
    let mut out = Vec::with_capacity(n);
    for (i, &y) in labels.iter().enumerate() {
        if y == IGNORE_LABEL {
            continue;
        }
        if y as usize >= m {
            return Err(TensorError::invalid(
                op,
                format!("label {y} out of range for {m} classes"),
            ));
        }
        out.push((y as usize, i));
    }
    Ok(out)
}

/// Lovász-softmax: a convex surrogate of the per-class Jaccard loss,
/// averaged over the classes present among the non-ignored pixels.
///
/// Per class, the prediction errors are sorted (descending, ties toward the
/// lower pixel index) and weighted by the discrete gradient of the Jaccard
/// set function along that prefix order. The sort and the weights are frozen
/// constants; gradients flow only through the error values themselves.
pub fn lovasz_softmax_loss<S: Scalar>(
    g: &mut Graph<S>,
    probs: Var,
    labels: &[u8],
) -> Result<Var, TensorError> {
    let (m, n) = validate_prob_columns(g, probs, "lovasz_softmax_loss")?;
    let _ = label_entries(m, n, labels, "lovasz_softmax_loss")?; // range checks
    let kept: Vec<usize> = (0..n).filter(|&i| labels[i] != IGNORE_LABEL).collect();
    if kept.is_empty() {
        return Err(TensorError::invalid(
            "lovasz_softmax_loss",
            "every pixel is ignored",
        ));
    }
    let mut classes: Vec<u8> = kept.iter().map(|&i| labels[i]).collect();
    classes.sort_unstable();
    classes.dedup();

    let k = kept.len();
    let mut acc: Option<Var> = None;
    for &c in &classes {
        let fg: Vec<bool> = kept.iter().map(|&i| labels[i] == c).collect();
        // m_i = 1 - P[c, i] on foreground pixels, P[c, i] elsewhere
        let entries: Vec<(usize, usize)> = kept.iter().map(|&i| (c as usize, i)).collect();
        let row = g.gather_entries(probs, &entries)?;
        let sign: Vec<S> = fg
            .iter()
            .map(|&f| if f { -S::one() } else { S::one() })
            .collect();
        let off: Vec<S> = fg
            .iter()
            .map(|&f| if f { S::one() } else { S::zero() })
            .collect();
        let sign_c = g.constant(&[k], sign)?;
        let off_c = g.constant(&[k], off)?;
        let signed = g.mul(row, sign_c)?;
        let errors = g.add(signed, off_c)?;

        let w = jaccard_weights(g.values(errors), &fg);
        let w_c = g.constant(&[k], w)?;
        let weighted = g.mul(errors, w_c)?;
        let class_loss = g.sum_all(weighted)?;
        acc = Some(match acc {
            None => class_loss,
            Some(prev) => g.add(prev, class_loss)?,
        });
    }
    let total = acc.expect("at least one class present");
    g.mul_scalar(total, S::lit(1.0 / classes.len() as f64))
}

/// Discrete Jaccard-extension gradient, scattered back through the sort
/// permutation of the current error values.
fn jaccard_weights<S: Scalar>(errors: &[S], fg: &[bool]) -> Vec<S> {
    let k = errors.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        errors[b]
            .partial_cmp(&errors[a])
            .expect("error values are finite")
            .then(a.cmp(&b))
    });
    let gts = fg.iter().filter(|&&f| f).count();
    debug_assert!(gts > 0, "class must be present");
    let mut w = vec![S::zero(); k];
    let (mut cum_fg, mut cum_bg) = (0usize, 0usize);
    let mut prev_jac = S::zero();
    for (rank, &idx) in order.iter().enumerate() {
        if fg[idx] {
            cum_fg += 1;
        } else {
            cum_bg += 1;
        }
        let inter = S::from_usize(gts - cum_fg).unwrap();
        let union = S::from_usize(gts + cum_bg).unwrap();
        let jac = S::one() - inter / union;
        w[idx] = if rank == 0 { jac } else { jac - prev_jac };
        prev_jac = jac;
    }
    w
}

/// Cycle-association loss over a pair of raw (unnormalized) similarity maps:
/// for each valid cycle (i, j*, i*), maximize the row-softmax probability of
/// the associated pixel in both directions after contrast normalization.
/// With no valid cycles the loss is a constant zero (and a warning is
/// logged), so a bad pair cannot poison a batch.
pub fn association_loss_from_similarities<S: Scalar>(
    g: &mut Graph<S>,
    d_s2t: &SimMatrix,
    d_t2s: &SimMatrix,
    assoc: &AssociationSet,
) -> Result<Var, TensorError> {
    if d_s2t.n_from != assoc.n_source || d_s2t.n_to != assoc.n_target {
        return Err(TensorError::ShapeMismatch {
            op: "association_loss",
            lhs: vec![d_s2t.n_from, d_s2t.n_to],
            rhs: vec![assoc.n_source, assoc.n_target],
        });
    }
    if d_t2s.n_from != assoc.n_target || d_t2s.n_to != assoc.n_source {
        return Err(TensorError::ShapeMismatch {
            op: "association_loss",
            lhs: vec![d_t2s.n_from, d_t2s.n_to],
            rhs: vec![assoc.n_target, assoc.n_source],
        });
    }
    if assoc.valid_count == 0 {
        log::warn!("association loss: no valid cycles in this pair, contributing zero");
        return g.scalar_const(S::zero());
    }
    let n1 = contrast_normalize(g, d_s2t)?;
    let n2 = contrast_normalize(g, d_t2s)?;
    let s1 = g.softmax_rows(n1.entries)?;
    let s2 = g.softmax_rows(n2.entries)?;
    let fwd: Vec<(usize, usize)> = assoc.valid_pairs().collect();
    let back: Vec<(usize, usize)> = assoc.valid_back_pairs().collect();
    let p1 = g.gather_entries(s1, &fwd)?;
    let p2 = g.gather_entries(s2, &back)?;
    let l1 = g.log_eps(p1)?;
    let l2 = g.log_eps(p2)?;
    let both = g.add(l1, l2)?;
    let total = g.sum_all(both)?;
    g.mul_scalar(total, S::lit(-1.0 / assoc.valid_count as f64))
}

/// Association loss on feature columns: cosine maps in both directions, then
/// [`association_loss_from_similarities`]. `f_t` is usually the aggregated
/// target feature map.
pub fn feature_association_loss<S: Scalar>(
    g: &mut Graph<S>,
    f_s: Var,
    f_t: Var,
    assoc: &AssociationSet,
) -> Result<Var, TensorError> {
    let d1 = cosine_similarity_map(g, f_s, f_t, Direction::SourceToTarget)?;
    let d2 = cosine_similarity_map(g, f_t, f_s, Direction::TargetToSource)?;
    association_loss_from_similarities(g, &d1, &d2, assoc)
}

/// Association loss on class probability maps [M, N] via negative-KL
/// similarity. `p_t` is usually the aggregated target probability map.
pub fn prediction_association_loss<S: Scalar>(
    g: &mut Graph<S>,
    p_s: Var,
    p_t: Var,
    assoc: &AssociationSet,
) -> Result<Var, TensorError> {
    let d1 = kl_similarity_map(g, p_s, p_t, Direction::SourceToTarget)?;
    let d2 = kl_similarity_map(g, p_t, p_s, Direction::TargetToSource)?;
    association_loss_from_similarities(g, &d1, &d2, assoc)
}

/// Ablation baseline: instead of the contrastive objective, directly push up
/// the raw cosine similarity along each valid cycle.
pub fn similarity_maximization_loss<S: Scalar>(
    g: &mut Graph<S>,
    f_s: Var,
    f_t: Var,
    assoc: &AssociationSet,
) -> Result<Var, TensorError> {
    let d1 = cosine_similarity_map(g, f_s, f_t, Direction::SourceToTarget)?;
    let d2 = cosine_similarity_map(g, f_t, f_s, Direction::TargetToSource)?;
    if d1.n_from != assoc.n_source || d1.n_to != assoc.n_target {
        return Err(TensorError::ShapeMismatch {
            op: "similarity_maximization_loss",
            lhs: vec![d1.n_from, d1.n_to],
            rhs: vec![assoc.n_source, assoc.n_target],
        });
    }
    if assoc.valid_count == 0 {
        log::warn!("similarity loss: no valid cycles in this pair, contributing zero");
        return g.scalar_const(S::zero());
    }
    let fwd: Vec<(usize, usize)> = assoc.valid_pairs().collect();
    let back: Vec<(usize, usize)> = assoc.valid_back_pairs().collect();
    let s1 = g.gather_entries(d1.entries, &fwd)?;
    let s2 = g.gather_entries(d2.entries, &back)?;
    let both = g.add(s1, s2)?;
    let total = g.sum_all(both)?;
    g.mul_scalar(total, S::lit(-1.0 / assoc.valid_count as f64))
}

/// Label-smooth regularizer. Per pixel, m_i = -(1/M) sum_c log(P[c,i] + eps)
/// measures how spread the distribution is; the detached gate
/// gamma_i = m_i / lambda - 1 turns the mean of gamma_i * m_i into a
/// two-sided pressure toward m_i = lambda. Pixels sitting exactly at lambda
/// contribute exactly zero. Applied to the source map and, when given, the
/// target map.
pub fn lsr_loss<S: Scalar>(
    g: &mut Graph<S>,
    probs_source: Var,
    probs_target: Option<Var>,
    lambda: S,
) -> Result<Var, TensorError> {
    if !(lambda > S::zero()) || !lambda.is_finite() {
        return Err(TensorError::invalid(
            "lsr_loss",
            format!("lambda must be positive and finite, got {lambda}"),
        ));
    }
    let s = lsr_side(g, probs_source, lambda)?;
    match probs_target {
        None => Ok(s),
        Some(pt) => {
            let t = lsr_side(g, pt, lambda)?;
            g.add(s, t)
        }
    }
}

fn lsr_side<S: Scalar>(g: &mut Graph<S>, probs: Var, lambda: S) -> Result<Var, TensorError> {
    let (m, _) = validate_prob_columns(g, probs, "lsr_loss")?;
    let logs = g.log_eps(probs)?;
    let col_sums = g.sum_axis(logs, 0)?;
    let smooth = g.mul_scalar(col_sums, S::lit(-1.0 / m as f64))?; // m_i per pixel
    let ratio = g.div_scalar(smooth, lambda)?; // exact 1 when m_i == lambda
    let shifted = g.add_scalar(ratio, -S::one())?;
    let gate = g.detach(shifted)?;
    let gated = g.mul(gate, smooth)?;
    g.mean_all(gated)
}

/// The individual terms of one training step. `ce` is always present;
/// optional terms are simply absent when disabled by the ablation flags.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub ce: Var,
    pub lov: Option<Var>,
    pub fass: Option<Var>,
    pub cass: Option<Var>,
    pub lsr: Option<Var>,
}

/// full = ce + b1 * lov + b2 * (fass + cass) + b3 * lsr, skipping absent
/// terms. Betas must be finite and non-negative.
pub fn full_objective<S: Scalar>(
    g: &mut Graph<S>,
    terms: &LossTerms,
    betas: [S; 3],
) -> Result<Var, TensorError> {
    for b in betas {
        if !b.is_finite() || b < S::zero() {
            return Err(TensorError::invalid(
                "full_objective",
                format!("betas must be finite and non-negative, got {b}"),
            ));
        }
    }
    for v in [Some(terms.ce), terms.lov, terms.fass, terms.cass, terms.lsr]
        .into_iter()
        .flatten()
    {
        if g.numel(v) != 1 {
            return Err(TensorError::invalid(
                "full_objective",
                "loss terms must be scalars",
            ));
        }
    }
    let mut acc = terms.ce;
    if let Some(lov) = terms.lov {
        let t = g.mul_scalar(lov, betas[0])?;
        acc = g.add(acc, t)?;
    }
    let assoc = match (terms.fass, terms.cass) {
        (Some(f), Some(c)) => Some(g.add(f, c)?),
        (Some(f), None) => Some(f),
        (None, Some(c)) => Some(c),
        (None, None) => None,
    };
    if let Some(a) = assoc {
        let t = g.mul_scalar(a, betas[1])?;
        acc = g.add(acc, t)?;
    }
    if let Some(lsr) = terms.lsr {
        let t = g.mul_scalar(lsr, betas[2])?;
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}
