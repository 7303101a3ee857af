//! Evaluation: confusion counts, per-class IoU, and mean IoU on the feature
//! grid.
//!
//! Predictions are compared against ground truth center-sampled to the same
//! grid the network predicts on. Classes that never occur in either ground
//! truth or predictions are left out of the mean.

use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregation_weights, spatial_aggregate_probs};
use crate::datagen::{downsample_labels, Sample};
use crate::error::PlcaError;
use crate::segnet::{forward, insert_params, NetworkParams};
use crate::tensor::Graph;
use crate::IGNORE_LABEL;

// ── confusion counts ────────────────────────────────────────────────────────

/// Dense confusion matrix; `counts[gt * classes + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Ignored ground-truth pixels are skipped.
    pub fn add(&mut self, gt: &[u8], pred: &[u8]) -> Result<(), PlcaError> {
        if gt.len() != pred.len() {
            return Err(PlcaError::data("ground truth and prediction sizes differ"));
        }
        for (&t, &p) in gt.iter().zip(pred) {
            if t == IGNORE_LABEL {
                continue;
            }
            if t as usize >= self.classes || p as usize >= self.classes {
                return Err(PlcaError::data("label outside the class range"));
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    fn tp_fp_fn(&self, c: usize) -> (u64, u64, u64) {
        let m = self.classes;
        let tp = self.counts[c * m + c];
        let fp: u64 = (0..m).filter(|&t| t != c).map(|t| self.counts[t * m + c]).sum();
        let fal_n: u64 = (0..m).filter(|&p| p != c).map(|p| self.counts[c * m + p]).sum();
        (tp, fp, fal_n)
    }

    /// Per-class intersection over union for classes with a nonzero union.
    pub fn class_ious(&self) -> Vec<ClassIou> {
        (0..self.classes)
            .filter_map(|c| {
                let (tp, fp, fal_n) = self.tp_fp_fn(c);
                let union = tp + fp + fal_n;
                (union > 0).then(|| ClassIou {
                    class: c,
                    tp,
                    fp,
                    fn_count: fal_n,
                    iou: tp as f64 / union as f64,
                })
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        let ious = self.class_ious();
        if ious.is_empty() {
            return 0.0;
        }
        ious.iter().map(|c| c.iou).sum::<f64>() / ious.len() as f64
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let hit: u64 = (0..self.classes).map(|c| self.counts[c * self.classes + c]).sum();
        hit as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: usize,
    pub tp: u64,
    pub fp: u64,
    pub fn_count: u64,
    pub iou: f64,
}

// ── prediction ──────────────────────────────────────────────────────────────

/// Column-wise argmax of an [m, n] probability map; ties go to the lower
/// class index.
pub fn predict_labels(probs: &[f64], m: usize, n: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let mut best = 0usize;
        for i in 1..m {
            if probs[i * n + j] > probs[best * n + j] {
                best = i;
            }
        }
        out.push(best as u8);
    }
    out
}

// ── full evaluation ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub per_class: Vec<ClassIou>,
    pub n_images: usize,
    /// Whether predictions went through spatial aggregation.
    pub aggregated: bool,
    pub alpha: f64,
    /// Largest observed deviation of a probability column from summing to 1.
    pub max_prob_deviation: f64,
    pub checkpoint: Option<String>,
    pub config_hash: Option<String>,
}

/// Runs the network over every sample and scores it against center-sampled
/// ground truth. With `aggregate` set, predictions are refined by spatial
/// aggregation with self-similarity weights before the argmax.
pub fn evaluate(
    params: &NetworkParams<f64>,
    samples: &[Sample],
    alpha: f64,
    aggregate: bool,
) -> Result<EvalReport, PlcaError> {
    if samples.is_empty() {
        return Err(PlcaError::data("nothing to evaluate"));
    }
    let stride = params.arch.total_stride();
    let mut confusion = Confusion::new(params.arch.num_classes);
    let mut max_dev = 0.0f64;
    for s in samples {
        let mut g = Graph::<f64>::new();
        let pv = insert_params(&mut g, params, false)?;
        let img = g.leaf(&[3, s.height, s.width], s.image.clone(), false)?;
        let out = forward(&mut g, &pv, img)?;
        let probs = if aggregate {
            let w = aggregation_weights(&mut g, out.feature_cols)?;
            spatial_aggregate_probs(&mut g, out.probs, &w, alpha)?
        } else {
            out.probs
        };
        let (m, n) = (params.arch.num_classes, out.grid.0 * out.grid.1);
        let pv = g.values(probs);
        for j in 0..n {
            let sum: f64 = (0..m).map(|i| pv[i * n + j]).sum();
            max_dev = max_dev.max((sum - 1.0).abs());
        }
        let pred = predict_labels(pv, m, n);
        let gt = downsample_labels(&s.labels, s.height, s.width, stride)?;
        confusion.add(&gt, &pred)?;
    }
    Ok(EvalReport {
        miou: confusion.miou(),
        pixel_accuracy: confusion.pixel_accuracy(),
        per_class: confusion.class_ious(),
        n_images: samples.len(),
        aggregated: aggregate,
        alpha,
        max_prob_deviation: max_dev,
        checkpoint: None,
        config_hash: None,
    })
}
