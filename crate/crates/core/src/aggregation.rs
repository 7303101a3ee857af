//! Spatial aggregation over the pixels of one image.
//!
//! Raw pixel features are noisy association anchors. Aggregation replaces
//! each target pixel's vector with a convex blend of itself and an
//! attention-weighted sum of all pixels of the same image, where the weights
//! come from the image's own normalized self-similarity. The same weights
//! can be applied to the class probability map, and the same transform is
//! used at inference time.

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::similarity::{contrast_normalize, cosine_entries, validate_prob_columns, Direction, SimKind, SimMatrix};
use crate::tensor::{Graph, Var};

/// Row-stochastic attention over pixels of one image: row i holds the
/// weights with which pixel i drinks from every other pixel.
#[derive(Clone, Copy, Debug)]
pub struct AggregationWeights {
    pub w: Var,
    pub n: usize,
}

/// Build aggregation weights from features [C, N]: cosine self-similarity,
/// per-row contrast normalization, then a row softmax. A single-pixel image
/// degenerates to the identity weight [[1]].
pub fn aggregation_weights<S: Scalar>(
    g: &mut Graph<S>,
    features: Var,
) -> Result<AggregationWeights, TensorError> {
    let (entries, n, _) = cosine_entries(g, features, features)?;
    let sim = SimMatrix {
        entries,
        kind: SimKind::Cosine,
        direction: Direction::TargetToSource, // self-map; direction is moot
        normalized: false,
        n_from: n,
        n_to: n,
    };
    let normed = contrast_normalize(g, &sim)?;
    let w = g.softmax_rows(normed.entries)?;
    Ok(AggregationWeights { w, n })
}

/// F_hat = (1 - alpha) * F + alpha * F W^T, columns of F being pixel
/// feature vectors. alpha in [0, 1]; alpha = 0 returns F bitwise.
pub fn spatial_aggregate_features<S: Scalar>(
    g: &mut Graph<S>,
    features: Var,
    weights: &AggregationWeights,
    alpha: S,
) -> Result<Var, TensorError> {
    aggregate(g, features, weights, alpha, "spatial_aggregate_features")
}

/// Same blend applied to a probability map [M, N]. Rows of W sum to one, so
/// every output column is a convex combination of distributions and remains
/// one; inputs are still validated to catch misuse.
pub fn spatial_aggregate_probs<S: Scalar>(
    g: &mut Graph<S>,
    probs: Var,
    weights: &AggregationWeights,
    alpha: S,
) -> Result<Var, TensorError> {
    validate_prob_columns(g, probs, "spatial_aggregate_probs")?;
    aggregate(g, probs, weights, alpha, "spatial_aggregate_probs")
}

fn aggregate<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    weights: &AggregationWeights,
    alpha: S,
    op: &'static str,
) -> Result<Var, TensorError> {
    if !(alpha >= S::zero() && alpha <= S::one()) {
        return Err(TensorError::invalid(op, format!("alpha {alpha} outside [0, 1]")));
    }
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != weights.n {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: shape,
            rhs: vec![weights.n, weights.n],
        });
    }
    let wt = g.transpose(weights.w)?;
    let mixed = g.matmul(x, wt)?;
    let keep = g.mul_scalar(x, S::one() - alpha)?;
    let take = g.mul_scalar(mixed, alpha)?;
    g.add(keep, take)
}
