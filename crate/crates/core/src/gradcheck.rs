//! End-to-end gradient verification.
//!
//! Each item builds a small but complete computation — network forward pass
//! included — and compares every analytic parameter/input gradient against
//! central finite differences. This is the long-form proof that the tape,
//! the frozen-statistics replay semantics, and every loss implementation
//! agree with the mathematics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{aggregation_weights, spatial_aggregate_features, spatial_aggregate_probs};
use crate::association::build_cycle_associations;
use crate::error::PlcaError;
use crate::losses::{
    association_loss_from_similarities, cross_entropy_loss, full_objective, lovasz_softmax_loss,
    lsr_loss, similarity_maximization_loss, LossTerms,
};
use crate::segnet::{forward, insert_params, ArchConfig, NetworkParams, ParamVars};
use crate::similarity::{cosine_similarity_map, kl_similarity_map, Direction};
use crate::tensor::{finite_diff_check, Graph, Var};
use crate::IGNORE_LABEL;

// Central differences trade truncation against cancellation; 1e-5 sits well
// for gradients that pass through softmax/log chains with f64 values.
pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckItem {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn all_pass(items: &[GradCheckItem]) -> bool {
    !items.is_empty() && items.iter().all(|i| i.pass)
}

struct Fixture {
    params: NetworkParams<f64>,
    img_s: Vec<f64>,
    img_t: Vec<f64>,
    labels: Vec<u8>,
}

/// 8x8 images, stride-2 net, 4x4 feature grid, 3 classes; one source cell is
/// ignored so that path is exercised too.
fn fixture(seed: u64) -> Fixture {
    let arch = ArchConfig {
        channels: vec![3, 4, 4],
        strides: vec![1, 2],
        num_classes: 3,
    };
    let params = NetworkParams::<f64>::init(arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let img_s: Vec<f64> = (0..3 * 64).map(|_| rng.gen()).collect();
    let img_t: Vec<f64> = (0..3 * 64).map(|_| rng.gen()).collect();
    let mut labels: Vec<u8> = (0..16).map(|_| rng.gen_range(0..3) as u8).collect();
    labels[5] = IGNORE_LABEL;
    Fixture {
        params,
        img_s,
        img_t,
        labels,
    }
}

struct Built {
    g: Graph<f64>,
    pv: ParamVars,
    img_s: Var,
    img_t: Var,
}

fn build(fx: &Fixture) -> Built {
    let mut g = Graph::<f64>::new();
    let pv = insert_params(&mut g, &fx.params, true).unwrap();
    let img_s = g.leaf(&[3, 8, 8], fx.img_s.clone(), true).unwrap();
    let img_t = g.leaf(&[3, 8, 8], fx.img_t.clone(), true).unwrap();
    Built { g, pv, img_s, img_t }
}

fn check(
    name: &'static str,
    g: &mut Graph<f64>,
    root: Var,
    wrt: &[Var],
) -> Result<GradCheckItem, PlcaError> {
    let max_rel_err = finite_diff_check(g, root, wrt, GRADCHECK_EPS)?;
    Ok(GradCheckItem {
        name,
        max_rel_err,
        tolerance: GRADCHECK_TOL,
        pass: max_rel_err < GRADCHECK_TOL,
    })
}

/// Runs every item. All checks differentiate through the network with
/// respect to every parameter tensor and the input images.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckItem>, PlcaError> {
    let fx = fixture(seed);
    let mut items = Vec::new();

    {
        let mut b = build(&fx);
        let out = forward(&mut b.g, &b.pv, b.img_s)?;
        let loss = cross_entropy_loss(&mut b.g, out.probs, &fx.labels)?;
        let mut wrt = b.pv.all();
        wrt.push(b.img_s);
        items.push(check("cross_entropy", &mut b.g, loss, &wrt)?);
    }
    {
        let mut b = build(&fx);
        let out = forward(&mut b.g, &b.pv, b.img_s)?;
        let loss = lovasz_softmax_loss(&mut b.g, out.probs, &fx.labels)?;
        let mut wrt = b.pv.all();
        wrt.push(b.img_s);
        items.push(check("lovasz_softmax", &mut b.g, loss, &wrt)?);
    }
    {
        let mut b = build(&fx);
        let out_t = forward(&mut b.g, &b.pv, b.img_t)?;
        let w = aggregation_weights(&mut b.g, out_t.feature_cols)?;
        let f_hat = spatial_aggregate_features(&mut b.g, out_t.feature_cols, &w, 0.5)?;
        let p_hat = spatial_aggregate_probs(&mut b.g, out_t.probs, &w, 0.5)?;
        // scalar probe: mean of aggregated features plus energy of the
        // aggregated distributions (their plain mean is constant)
        let mf = b.g.mean_all(f_hat)?;
        let pp = b.g.mul(p_hat, p_hat)?;
        let mp = b.g.mean_all(pp)?;
        let root = b.g.add(mf, mp)?;
        let mut wrt = b.pv.all();
        wrt.push(b.img_t);
        items.push(check("spatial_aggregation", &mut b.g, root, &wrt)?);
    }

    // the association fixtures share this shape: forward both images,
    // optionally aggregate the target side, build cycles on the matching
    // similarity kind (cosine for features, negative KL for predictions),
    // then differentiate the chosen loss
    let assoc_item = |name: &'static str,
                      which: usize,
                      sagg: bool|
     -> Result<GradCheckItem, PlcaError> {
        let mut b = build(&fx);
        let out_s = forward(&mut b.g, &b.pv, b.img_s)?;
        let out_t = forward(&mut b.g, &b.pv, b.img_t)?;
        let (f_t, p_t) = if sagg {
            let w = aggregation_weights(&mut b.g, out_t.feature_cols)?;
            (
                spatial_aggregate_features(&mut b.g, out_t.feature_cols, &w, 0.5)?,
                spatial_aggregate_probs(&mut b.g, out_t.probs, &w, 0.5)?,
            )
        } else {
            (out_t.feature_cols, out_t.probs)
        };
        let loss = if which == 1 {
            let k1 = kl_similarity_map(&mut b.g, out_s.probs, p_t, Direction::SourceToTarget)?;
            let k2 = kl_similarity_map(&mut b.g, p_t, out_s.probs, Direction::TargetToSource)?;
            let assoc = build_cycle_associations(&b.g, &k1, &k2, &fx.labels)?;
            association_loss_from_similarities(&mut b.g, &k1, &k2, &assoc)?
        } else {
            let d1 = cosine_similarity_map(
                &mut b.g,
                out_s.feature_cols,
                f_t,
                Direction::SourceToTarget,
            )?;
            let d2 = cosine_similarity_map(
                &mut b.g,
                f_t,
                out_s.feature_cols,
                Direction::TargetToSource,
            )?;
            let assoc = build_cycle_associations(&b.g, &d1, &d2, &fx.labels)?;
            if which == 0 {
                association_loss_from_similarities(&mut b.g, &d1, &d2, &assoc)?
            } else {
                similarity_maximization_loss(&mut b.g, out_s.feature_cols, f_t, &assoc)?
            }
        };
        let mut wrt = b.pv.all();
        wrt.push(b.img_s);
        wrt.push(b.img_t);
        check(name, &mut b.g, loss, &wrt)
    };
    items.push(assoc_item("feature_association", 0, true)?);
    items.push(assoc_item("feature_association_no_sagg", 0, false)?);
    items.push(assoc_item("prediction_association", 1, true)?);
    items.push(assoc_item("similarity_maximization", 2, true)?);

    {
        let mut b = build(&fx);
        let out_s = forward(&mut b.g, &b.pv, b.img_s)?;
        let out_t = forward(&mut b.g, &b.pv, b.img_t)?;
        let loss = lsr_loss(&mut b.g, out_s.probs, Some(out_t.probs), 10.0)?;
        let mut wrt = b.pv.all();
        wrt.push(b.img_s);
        wrt.push(b.img_t);
        items.push(check("label_smooth_regularizer", &mut b.g, loss, &wrt)?);
    }
    {
        // one complete training objective, exactly as the harness builds it
        let mut b = build(&fx);
        let out_s = forward(&mut b.g, &b.pv, b.img_s)?;
        let out_t = forward(&mut b.g, &b.pv, b.img_t)?;
        let ce = cross_entropy_loss(&mut b.g, out_s.probs, &fx.labels)?;
        let lov = lovasz_softmax_loss(&mut b.g, out_s.probs, &fx.labels)?;
        let w = aggregation_weights(&mut b.g, out_t.feature_cols)?;
        let f_hat = spatial_aggregate_features(&mut b.g, out_t.feature_cols, &w, 0.5)?;
        let p_hat = spatial_aggregate_probs(&mut b.g, out_t.probs, &w, 0.5)?;
        let d1 = cosine_similarity_map(
            &mut b.g,
            out_s.feature_cols,
            f_hat,
            Direction::SourceToTarget,
        )?;
        let d2 = cosine_similarity_map(
            &mut b.g,
            f_hat,
            out_s.feature_cols,
            Direction::TargetToSource,
        )?;
        let assoc_f = build_cycle_associations(&b.g, &d1, &d2, &fx.labels)?;
        let fass = association_loss_from_similarities(&mut b.g, &d1, &d2, &assoc_f)?;
        let k1 = kl_similarity_map(&mut b.g, out_s.probs, p_hat, Direction::SourceToTarget)?;
        let k2 = kl_similarity_map(&mut b.g, p_hat, out_s.probs, Direction::TargetToSource)?;
        let assoc_p = build_cycle_associations(&b.g, &k1, &k2, &fx.labels)?;
        let cass = association_loss_from_similarities(&mut b.g, &k1, &k2, &assoc_p)?;
        let lsr = lsr_loss(&mut b.g, out_s.probs, Some(p_hat), 10.0)?;
        let full = full_objective(
            &mut b.g,
            &LossTerms {
                ce,
                lov: Some(lov),
                fass: Some(fass),
                cass: Some(cass),
                lsr: Some(lsr),
            },
            [0.75, 0.1, 0.01],
        )?;
        let mut wrt = b.pv.all();
        wrt.push(b.img_s);
        wrt.push(b.img_t);
        items.push(check("full_objective", &mut b.g, full, &wrt)?);
    }

    Ok(items)
}
