//! Cycle association between a labeled source image and an unlabeled target.
//!
//! For each source pixel i, follow the source-to-target similarity map to
//! its best target pixel j*, then the target-to-source map back to i*. If i
//! and i* carry the same label the cycle is consistent and (i, j*) becomes a
//! trusted cross-domain pair. Association is a pure selection step: it reads
//! similarity values, never gradients, and it is invariant to positive
//! rescaling of the feature vectors behind a cosine map.

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::similarity::SimMatrix;
use crate::tensor::Graph;
use crate::IGNORE_LABEL;
use std::collections::BTreeMap;

/// One attempted cycle starting at source pixel `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AssociationRecord {
    pub i: usize,
    pub j_star: usize,
    pub i_star: usize,
    /// The cycle closed on a pixel with the same label as `i`.
    pub valid: bool,
}

/// All cycles of one source/target pair.
#[derive(Clone, Debug)]
pub struct AssociationSet {
    pub records: Vec<AssociationRecord>,
    pub valid_count: usize,
    /// Fraction of target pixels selected as j* by at least one valid cycle.
    pub target_coverage: f64,
    pub n_source: usize,
    pub n_target: usize,
    /// Source labels the records were built against.
    pub source_labels: Vec<u8>,
}

/// Summary statistics for logging and analysis.
#[derive(Clone, Debug, PartialEq)]
pub struct AssociationStats {
    pub valid_ratio: f64,
    pub target_coverage: f64,
    /// class -> (cycles started, cycles valid)
    pub per_class: BTreeMap<u8, (usize, usize)>,
}

/// Row-wise argmax of a similarity map, ties broken toward the lowest column
/// index. Selection only; nothing is recorded on the tape.
pub fn argmax_rows<S: Scalar>(g: &Graph<S>, sim: &SimMatrix) -> Vec<usize> {
    let v = g.values(sim.entries);
    let (r, c) = (sim.n_from, sim.n_to);
    let mut out = Vec::with_capacity(r);
    for i in 0..r {
        let row = &v[i * c..(i + 1) * c];
        let mut best = 0usize;
        for (j, &x) in row.iter().enumerate().skip(1) {
            if x > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    out
}

/// Build the cycle associations for one image pair.
///
/// `d_s2t` scores source against target pixels, `d_t2s` the reverse;
/// `source_labels` has one entry per source pixel. Pixels labeled
/// [`IGNORE_LABEL`] never start a cycle, but a cycle may land on one (it is
/// then invalid, since an ignored pixel matches no class).
pub fn build_cycle_associations<S: Scalar>(
    g: &Graph<S>,
    d_s2t: &SimMatrix,
    d_t2s: &SimMatrix,
    source_labels: &[u8],
) -> Result<AssociationSet, TensorError> {
    if d_s2t.n_to != d_t2s.n_from || d_s2t.n_from != d_t2s.n_to {
        return Err(TensorError::ShapeMismatch {
            op: "build_cycle_associations",
            lhs: vec![d_s2t.n_from, d_s2t.n_to],
            rhs: vec![d_t2s.n_from, d_t2s.n_to],
        });
    }
    if source_labels.len() != d_s2t.n_from {
        return Err(TensorError::invalid(
            "build_cycle_associations",
            format!(
                "{} source labels for {} source pixels",
                source_labels.len(),
                d_s2t.n_from
            ),
        ));
    }

    let fwd = argmax_rows(g, d_s2t);
    let back = argmax_rows(g, d_t2s);

    let mut records = Vec::new();
    let mut valid_count = 0usize;
    let mut covered = vec![false; d_s2t.n_to];
    for (i, &label) in source_labels.iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        let j_star = fwd[i];
        let i_star = back[j_star];
        let valid = source_labels[i_star] == label;
        if valid {
            valid_count += 1;
            covered[j_star] = true;
        }
        records.push(AssociationRecord {
            i,
            j_star,
            i_star,
            valid,
        });
    }
    let target_coverage =
        covered.iter().filter(|&&c| c).count() as f64 / d_s2t.n_to as f64;
    Ok(AssociationSet {
        records,
        valid_count,
        target_coverage,
        n_source: d_s2t.n_from,
        n_target: d_s2t.n_to,
        source_labels: source_labels.to_vec(),
    })
}

impl AssociationSet {
    /// Valid (i, j*) pairs in record order.
    pub fn valid_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.records
            .iter()
            .filter(|r| r.valid)
            .map(|r| (r.i, r.j_star))
    }

    /// Valid (j*, i*) return pairs in record order.
    pub fn valid_back_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.records
            .iter()
            .filter(|r| r.valid)
            .map(|r| (r.j_star, r.i_star))
    }
}

pub fn association_stats(set: &AssociationSet) -> AssociationStats {
    let mut per_class: BTreeMap<u8, (usize, usize)> = BTreeMap::new();
    for r in &set.records {
        let class = set.source_labels[r.i];
        let e = per_class.entry(class).or_insert((0, 0));
        e.0 += 1;
        if r.valid {
            e.1 += 1;
        }
    }
    let started = set.records.len();
    AssociationStats {
        valid_ratio: if started == 0 {
            0.0
        } else {
            set.valid_count as f64 / started as f64
        },
        target_coverage: set.target_coverage,
        per_class,
    }
}
