//! Training harness: pairwise domain-adaptive training with SGD, poly decay,
//! JSONL metrics, and tensor-file checkpoints.
//!
//! Every iteration builds a fresh tape, runs a few source/target image pairs,
//! assembles the objective from the enabled terms, backpropagates, and
//! applies one momentum-SGD step on the host-side parameters. All sampling
//! comes from one seeded stream, so a config trains to bitwise-identical
//! parameters every time.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{aggregation_weights, spatial_aggregate_features, spatial_aggregate_probs};
use crate::association::build_cycle_associations;
use crate::datagen::{downsample_labels, generate_split, load_split, DatasetSpec, Sample, Split};
use crate::error::PlcaError;
use crate::eval::{evaluate, EvalReport};
use crate::io::{read_plt1, write_plt1, TensorData};
use crate::losses::{
    association_loss_from_similarities, cross_entropy_loss, full_objective, lovasz_softmax_loss,
    lsr_loss, similarity_maximization_loss, LossTerms,
};
use crate::segnet::{forward, insert_params, ArchConfig, NetworkParams};
use crate::similarity::{cosine_similarity_map, kl_similarity_map, Direction};
use crate::tensor::{Graph, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ── configuration ───────────────────────────────────────────────────────────

/// Which loss terms and modules take part in a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Lovász-softmax term on source predictions.
    pub use_lovasz: bool,
    /// Contrastive association loss on features.
    pub use_fass: bool,
    /// Contrastive association loss on class predictions.
    pub use_cass: bool,
    /// Label-smooth regularizer.
    pub use_lsr: bool,
    /// Replace both association losses by raw similarity maximization.
    pub sim_plca: bool,
    /// Spatial aggregation of target features/predictions during training.
    pub use_sagg: bool,
    /// Spatial aggregation of predictions at evaluation time.
    pub inference_aggregation: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags::full()
    }
}

impl AblationFlags {
    /// The complete method.
    pub fn full() -> Self {
        AblationFlags {
            use_lovasz: true,
            use_fass: true,
            use_cass: true,
            use_lsr: true,
            sim_plca: false,
            use_sagg: true,
            inference_aggregation: true,
        }
    }

    /// Supervised source training only; target images are never touched.
    pub fn source_only() -> Self {
        AblationFlags {
            use_lovasz: true,
            use_fass: false,
            use_cass: false,
            use_lsr: false,
            sim_plca: false,
            use_sagg: false,
            inference_aggregation: false,
        }
    }

    /// Similarity-maximization baseline instead of the contrastive losses.
    pub fn sim_baseline() -> Self {
        AblationFlags {
            use_fass: false,
            use_cass: false,
            sim_plca: true,
            ..AblationFlags::full()
        }
    }

    fn needs_association(&self) -> bool {
        self.use_fass || self.use_cass || self.sim_plca
    }

    fn needs_target(&self) -> bool {
        self.needs_association() || self.use_lsr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub data: DatasetSpec,
    pub iters: usize,
    pub pairs_per_iter: usize,
    pub lr: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weights of the Lovász, association, and regularizer terms.
    pub betas: [f64; 3],
    /// Smoothness target of the regularizer.
    pub lambda: f64,
    /// Aggregation mixing weight.
    pub alpha: f64,
    /// Iterations of supervised source training before the adaptation terms
    /// activate. Associations built on freshly initialized features are
    /// noise and collapse the target representation; the warmup gives the
    /// backbone class-discriminative features first (the role pretraining
    /// plays at full scale).
    pub warmup_iters: usize,
    /// Learning rate during warmup. Training the backbone from scratch needs
    /// a much larger step than the adaptation phase, whose `lr` assumes an
    /// already-converged feature extractor.
    pub warmup_lr: f64,
    pub seed: u64,
    /// Checkpoint cadence in iterations; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: ArchConfig::default(),
            data: DatasetSpec::default(),
            iters: 4000,
            pairs_per_iter: 4,
            lr: 2.5e-4,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 5e-4,
            betas: [0.75, 0.1, 0.01],
            lambda: 10.0,
            alpha: 0.5,
            warmup_iters: 2000,
            warmup_lr: 3e-3,
            seed: 1,
            checkpoint_every: 500,
            ablation: AblationFlags::full(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PlcaError> {
        self.arch.validate().map_err(|e| PlcaError::config(e.to_string()))?;
        self.data.validate()?;
        if self.arch.num_classes != self.data.generator.classes {
            return Err(PlcaError::config("network classes must match the dataset"));
        }
        if self.arch.total_stride() != self.data.generator.grid_stride {
            return Err(PlcaError::config(
                "network stride must match the dataset grid stride",
            ));
        }
        if self.iters == 0 || self.pairs_per_iter == 0 {
            return Err(PlcaError::config("iters and pairs_per_iter must be positive"));
        }
        if self.pairs_per_iter > self.data.n_source.min(self.data.n_target) {
            return Err(PlcaError::config("pairs_per_iter exceeds a split size"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(PlcaError::config("lr must be positive"));
        }
        if !(self.warmup_lr > 0.0) || !self.warmup_lr.is_finite() {
            return Err(PlcaError::config("warmup_lr must be positive"));
        }
        if self.warmup_iters >= self.iters {
            return Err(PlcaError::config("warmup must end before the run does"));
        }
        if self.poly_power < 0.0 || !self.poly_power.is_finite() {
            return Err(PlcaError::config("poly_power must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(PlcaError::config("momentum must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(PlcaError::config("weight_decay must be non-negative"));
        }
        if self.betas.iter().any(|b| *b < 0.0 || !b.is_finite()) {
            return Err(PlcaError::config("betas must be non-negative"));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(PlcaError::config("lambda must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(PlcaError::config("alpha must be in [0, 1]"));
        }
        let a = &self.ablation;
        if a.sim_plca && (a.use_fass || a.use_cass) {
            return Err(PlcaError::config(
                "sim_plca replaces the association losses; disable use_fass/use_cass",
            ));
        }
        Ok(())
    }

    /// Stable digest of the full configuration.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Learning rate at `iter`: a constant `warmup_lr` during the warmup
/// iterations, then polynomial decay `lr * (1 - t/T)^power` over the
/// remaining span (t counted from the end of warmup). With zero warmup this
/// is plain poly decay from `lr`.
pub fn poly_lr(cfg: &TrainConfig, iter: usize) -> f64 {
    if iter < cfg.warmup_iters {
        return cfg.warmup_lr;
    }
    let t = (iter - cfg.warmup_iters) as f64;
    let span = (cfg.iters - cfg.warmup_iters) as f64;
    cfg.lr * (1.0 - t / span).powf(cfg.poly_power)
}

// ── optimizer ───────────────────────────────────────────────────────────────

/// Momentum SGD with decoupled-from-nothing classic weight decay:
/// v <- m v + g + wd p, then p <- p - lr v.
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(params: &NetworkParams<f64>) -> Self {
        SgdState {
            velocity: params
                .tensors()
                .iter()
                .map(|(_, _, v)| vec![0.0; v.len()])
                .collect(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut NetworkParams<f64>,
        grads: &[Vec<f64>],
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<(), PlcaError> {
        let mut tensors = params.tensors_mut();
        if tensors.len() != grads.len() || tensors.len() != self.velocity.len() {
            return Err(PlcaError::train("gradient list does not match parameters"));
        }
        for ((p, g), v) in tensors.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.len() != g.len() {
                return Err(PlcaError::train("gradient size does not match parameter"));
            }
            for i in 0..p.len() {
                if !g[i].is_finite() {
                    return Err(PlcaError::train("non-finite gradient; aborting"));
                }
                v[i] = momentum * v[i] + g[i] + weight_decay * p[i];
                p[i] -= lr * v[i];
            }
        }
        Ok(())
    }
}

/// First `k` entries of a seeded Fisher-Yates pass over `0..n`; distinct,
/// and independent of any library shuffle implementation.
fn sample_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k.min(n) {
        let j = i + (rng.gen::<u64>() % (n - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(k.min(n));
    idx
}

// ── training data ───────────────────────────────────────────────────────────

/// The two training pools. Target labels exist in the samples but the loop
/// below never reads them.
pub struct TrainData {
    pub source: Vec<Sample>,
    pub target: Vec<Sample>,
}

impl TrainData {
    pub fn generate(spec: &DatasetSpec) -> Result<Self, PlcaError> {
        Ok(TrainData {
            source: generate_split(spec, Split::SourceTrain)?,
            target: generate_split(spec, Split::TargetTrain)?,
        })
    }

    pub fn load(root: &Path) -> Result<Self, PlcaError> {
        Ok(TrainData {
            source: load_split(root, Split::SourceTrain)?,
            target: load_split(root, Split::TargetTrain)?,
        })
    }
}

// ── metrics ─────────────────────────────────────────────────────────────────

/// One JSONL row per iteration. Disabled terms are logged as 0; under the
/// similarity baseline the similarity loss is reported in `fass`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterMetrics {
    pub iter: usize,
    pub ce: f64,
    pub lov: f64,
    pub fass: f64,
    pub cass: f64,
    pub lsr: f64,
    pub full: f64,
    /// Valid cycles summed over the iteration's pairs (feature-level sets
    /// when built, otherwise prediction-level).
    pub valid_pairs: usize,
    pub lr: f64,
}

pub struct TrainResult {
    pub params: NetworkParams<f64>,
    pub config: TrainConfig,
    pub config_hash: String,
    pub metrics: Vec<IterMetrics>,
    /// Largest per-pixel deviation of any probability map column from
    /// summing to one, observed across the whole run.
    pub max_prob_deviation: f64,
}

// ── the loop ────────────────────────────────────────────────────────────────

fn fold_mean(g: &mut Graph<f64>, terms: &[Var]) -> Result<Var, PlcaError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.mul_scalar(acc, 1.0 / terms.len() as f64)?)
}

/// Largest |column sum - 1| of an [m, n] probability map.
fn max_col_deviation(g: &Graph<f64>, probs: Var) -> f64 {
    let shp = g.shape(probs);
    let (m, n) = (shp[0], shp[1]);
    let v = g.values(probs);
    let mut worst = 0.0f64;
    for j in 0..n {
        let s: f64 = (0..m).map(|i| v[i * n + j]).sum();
        worst = worst.max((s - 1.0).abs());
    }
    worst
}

pub fn train(
    cfg: &TrainConfig,
    data: &TrainData,
    out_dir: Option<&Path>,
) -> Result<TrainResult, PlcaError> {
    cfg.validate()?;
    if data.source.is_empty() || data.target.is_empty() {
        return Err(PlcaError::train("empty training pool"));
    }
    if cfg.pairs_per_iter > data.source.len().min(data.target.len()) {
        return Err(PlcaError::train("pairs_per_iter exceeds the loaded pools"));
    }
    let config_hash = cfg.hash();
    let mut metrics_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let cfg_text = serde_json::to_string_pretty(cfg)?;
            fs::write(dir.join("config.json"), cfg_text)?;
            Some(fs::File::create(dir.join("metrics.jsonl"))?)
        }
        None => None,
    };

    let mut params = NetworkParams::<f64>::init(cfg.arch.clone(), cfg.seed)?;
    let mut sgd = SgdState::new(&params);
    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let flags = cfg.ablation;
    let stride = cfg.arch.total_stride();
    let mut metrics = Vec::with_capacity(cfg.iters);
    let mut max_prob_dev = 0.0f64;

    for iter in 0..cfg.iters {
        let lr = poly_lr(cfg, iter);
        let src_idx = sample_indices(&mut sampler, data.source.len(), cfg.pairs_per_iter);
        let tgt_idx = sample_indices(&mut sampler, data.target.len(), cfg.pairs_per_iter);

        let mut g = Graph::<f64>::new();
        let pv = insert_params(&mut g, &params, true)?;
        let mut ce_terms = Vec::new();
        let mut lov_terms = Vec::new();
        let mut fass_terms = Vec::new();
        let mut cass_terms = Vec::new();
        let mut lsr_terms = Vec::new();
        let mut valid_pairs = 0usize;

        for (&si, &ti) in src_idx.iter().zip(&tgt_idx) {
            let s = &data.source[si];
            let img_s = g.leaf(&[3, s.height, s.width], s.image.clone(), false)?;
            let out_s = forward(&mut g, &pv, img_s)?;
            max_prob_dev = max_prob_dev.max(max_col_deviation(&g, out_s.probs));
            let labels = downsample_labels(&s.labels, s.height, s.width, stride)?;
            ce_terms.push(cross_entropy_loss(&mut g, out_s.probs, &labels)?);
            if flags.use_lovasz {
                lov_terms.push(lovasz_softmax_loss(&mut g, out_s.probs, &labels)?);
            }
            if !flags.needs_target() || iter < cfg.warmup_iters {
                continue;
            }

            let t = &data.target[ti];
            let img_t = g.leaf(&[3, t.height, t.width], t.image.clone(), false)?;
            let out_t = forward(&mut g, &pv, img_t)?;
            max_prob_dev = max_prob_dev.max(max_col_deviation(&g, out_t.probs));
            let (f_t, p_t) = if flags.use_sagg {
                let w = aggregation_weights(&mut g, out_t.feature_cols)?;
                let f = spatial_aggregate_features(&mut g, out_t.feature_cols, &w, cfg.alpha)?;
                let p = spatial_aggregate_probs(&mut g, out_t.probs, &w, cfg.alpha)?;
                max_prob_dev = max_prob_dev.max(max_col_deviation(&g, p));
                (f, p)
            } else {
                (out_t.feature_cols, out_t.probs)
            };

            // feature-level and prediction-level cycles are selected
            // independently, each on its own similarity kind
            let mut pair_valid: Option<usize> = None;
            if flags.sim_plca || flags.use_fass {
                let d1 = cosine_similarity_map(
                    &mut g,
                    out_s.feature_cols,
                    f_t,
                    Direction::SourceToTarget,
                )?;
                let d2 = cosine_similarity_map(
                    &mut g,
                    f_t,
                    out_s.feature_cols,
                    Direction::TargetToSource,
                )?;
                let assoc = build_cycle_associations(&g, &d1, &d2, &labels)?;
                pair_valid = Some(assoc.valid_count);
                if flags.sim_plca {
                    fass_terms.push(similarity_maximization_loss(
                        &mut g,
                        out_s.feature_cols,
                        f_t,
                        &assoc,
                    )?);
                } else {
                    fass_terms.push(association_loss_from_similarities(&mut g, &d1, &d2, &assoc)?);
                }
            }
            if flags.use_cass {
                let k1 = kl_similarity_map(&mut g, out_s.probs, p_t, Direction::SourceToTarget)?;
                let k2 = kl_similarity_map(&mut g, p_t, out_s.probs, Direction::TargetToSource)?;
                let assoc = build_cycle_associations(&g, &k1, &k2, &labels)?;
                if pair_valid.is_none() {
                    pair_valid = Some(assoc.valid_count);
                }
                cass_terms.push(association_loss_from_similarities(&mut g, &k1, &k2, &assoc)?);
            }
            valid_pairs += pair_valid.unwrap_or(0);
            if flags.use_lsr {
                lsr_terms.push(lsr_loss(&mut g, out_s.probs, Some(p_t), cfg.lambda)?);
            }
        }

        let ce = fold_mean(&mut g, &ce_terms)?;
        let lov = if lov_terms.is_empty() {
            None
        } else {
            Some(fold_mean(&mut g, &lov_terms)?)
        };
        let fass = if fass_terms.is_empty() {
            None
        } else {
            Some(fold_mean(&mut g, &fass_terms)?)
        };
        let cass = if cass_terms.is_empty() {
            None
        } else {
            Some(fold_mean(&mut g, &cass_terms)?)
        };
        let lsr = if lsr_terms.is_empty() {
            None
        } else {
            Some(fold_mean(&mut g, &lsr_terms)?)
        };
        let terms = LossTerms {
            ce,
            lov,
            fass,
            cass,
            lsr,
        };
        let betas = [cfg.betas[0], cfg.betas[1], cfg.betas[2]];
        let full = full_objective(&mut g, &terms, betas)?;
        if !g.value_scalar(full).is_finite() {
            return Err(PlcaError::train(format!(
                "non-finite objective at iteration {iter}"
            )));
        }
        g.backward(full)?;
        let grads: Vec<Vec<f64>> = pv.all().iter().map(|&v| g.grad_or_zeros(v)).collect();
        sgd.step(&mut params, &grads, lr, cfg.momentum, cfg.weight_decay)?;

        let row = IterMetrics {
            iter,
            ce: g.value_scalar(ce),
            lov: lov.map(|v| g.value_scalar(v)).unwrap_or(0.0),
            fass: fass.map(|v| g.value_scalar(v)).unwrap_or(0.0),
            cass: cass.map(|v| g.value_scalar(v)).unwrap_or(0.0),
            lsr: lsr.map(|v| g.value_scalar(v)).unwrap_or(0.0),
            full: g.value_scalar(full),
            valid_pairs,
            lr,
        };
        if let Some(f) = metrics_file.as_mut() {
            let line = serde_json::to_string(&row)?;
            writeln!(f, "{line}")?;
        }
        if iter % 100 == 0 {
            log::info!(
                "iter {iter}: full {:.4} ce {:.4} valid {}",
                row.full,
                row.ce,
                row.valid_pairs
            );
        }
        metrics.push(row);

        if let Some(dir) = out_dir {
            let last = iter + 1 == cfg.iters;
            let cadence = cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0;
            if cadence && !last {
                save_checkpoint(&dir.join(format!("ckpt_{:05}", iter + 1)), &params, &config_hash, iter + 1)?;
            }
            if last {
                save_checkpoint(&dir.join("ckpt_final"), &params, &config_hash, iter + 1)?;
            }
        }
    }

    Ok(TrainResult {
        params,
        config: cfg.clone(),
        config_hash,
        metrics,
        max_prob_deviation: max_prob_dev,
    })
}

// ── checkpoints ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config_hash: String,
    pub iter: usize,
    pub arch: ArchConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

pub fn save_checkpoint(
    dir: &Path,
    params: &NetworkParams<f64>,
    config_hash: &str,
    iter: usize,
) -> Result<(), PlcaError> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (name, shape, values) in params.tensors() {
        let file = format!("{name}.plt1");
        let t = TensorData::new(shape.clone(), values.to_vec())?;
        write_plt1(&dir.join(&file), &t)?;
        entries.push(TensorEntry { name, file, shape });
    }
    let manifest = CheckpointManifest {
        config_hash: config_hash.to_string(),
        iter,
        arch: params.arch.clone(),
        tensors: entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, NetworkParams<f64>), PlcaError> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    manifest
        .arch
        .validate()
        .map_err(|e| PlcaError::format(e.to_string()))?;
    let mut params = NetworkParams::<f64>::init(manifest.arch.clone(), 0)
        .map_err(|e| PlcaError::format(e.to_string()))?;
    let expected = params.tensors();
    if expected.len() != manifest.tensors.len() {
        return Err(PlcaError::format("checkpoint tensor list does not match arch"));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for ((name, shape, _), entry) in expected.iter().zip(&manifest.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(PlcaError::format(format!(
                "checkpoint tensor {} does not match the architecture",
                entry.name
            )));
        }
        let t = read_plt1(&dir.join(&entry.file))?;
        if t.shape != *shape {
            return Err(PlcaError::format(format!(
                "tensor file {} has the wrong shape",
                entry.file
            )));
        }
        loaded.push(t.values);
    }
    for (slot, values) in params.tensors_mut().into_iter().zip(loaded) {
        *slot = values;
    }
    Ok((manifest, params))
}

// ── ablation table ──────────────────────────────────────────────────────────

/// The standard comparison columns: the two source-only baselines, the
/// progressively added adaptation terms, the full method, and the two
/// alternative-design baselines. `lsr` and `plca` are the same configuration;
/// the table keeps both columns.
pub fn ablation_variants() -> Vec<(&'static str, AblationFlags)> {
    let full = AblationFlags::full();
    let src = AblationFlags::source_only();
    vec![
        ("ce", AblationFlags { use_lovasz: false, ..src }),
        ("source_only", src),
        ("fass", AblationFlags { use_cass: false, use_lsr: false, ..full }),
        ("cass", AblationFlags { use_lsr: false, ..full }),
        ("lsr", full),
        ("plca", full),
        ("sim_plca", AblationFlags::sim_baseline()),
        ("no_sagg", AblationFlags { use_sagg: false, inference_aggregation: false, ..full }),
    ]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub report: EvalReport,
}

/// Trains every variant from the same base config and scores it on the eval
/// pool. With `out_dir` set, each variant gets its own subdirectory. Variants
/// with identical configurations (`lsr`/`plca`) are trained once and the
/// report is reused.
pub fn run_ablation(
    base: &TrainConfig,
    data: &TrainData,
    eval_pool: &[Sample],
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>, PlcaError> {
    let mut rows: Vec<AblationRow> = Vec::new();
    let mut seen: Vec<(String, usize)> = Vec::new();
    for (name, flags) in ablation_variants() {
        let mut cfg = base.clone();
        cfg.ablation = flags;
        cfg.validate()?;
        let hash = cfg.hash();
        if let Some(&(_, idx)) = seen.iter().find(|(h, _)| *h == hash) {
            let mut copy = rows[idx].clone();
            copy.name = name.to_string();
            log::info!("variant {name}: same configuration as {}", rows[idx].name);
            rows.push(copy);
            continue;
        }
        let sub = out_dir.map(|d| d.join(name));
        let result = train(&cfg, data, sub.as_deref())?;
        let mut report = evaluate(
            &result.params,
            eval_pool,
            cfg.alpha,
            flags.inference_aggregation,
        )?;
        report.config_hash = Some(result.config_hash.clone());
        log::info!("variant {name}: mIoU {:.4}", report.miou);
        seen.push((hash, rows.len()));
        rows.push(AblationRow {
            name: name.to_string(),
            report,
        });
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
        fs::write(dir.join("ablation.csv"), ablation_csv(&rows))?;
    }
    Ok(rows)
}

/// CSV rendering of the comparison table.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,miou,pixel_accuracy,n_images\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            r.name, r.report.miou, r.report.pixel_accuracy, r.report.n_images
        ));
    }
    out
}

/// Aligned-text rendering of the comparison table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let name_w = rows.iter().map(|r| r.name.len()).max().unwrap_or(7).max(7);
    let mut out = format!("{:<name_w$}  {:>8}  {:>8}\n", "variant", "miou", "acc");
    for r in rows {
        out.push_str(&format!(
            "{:<name_w$}  {:>8.4}  {:>8.4}\n",
            r.name, r.report.miou, r.report.pixel_accuracy
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{DomainStyle, GeneratorSpec};

    /// 16x16 images, stride-2 net, tiny pools: fast enough to train in tests.
    fn tiny_config() -> TrainConfig {
        TrainConfig {
            arch: ArchConfig {
                channels: vec![3, 6, 6],
                strides: vec![1, 2],
                num_classes: 4,
            },
            data: DatasetSpec {
                generator: GeneratorSpec {
                    classes: 4,
                    height: 16,
                    width: 16,
                    shapes_min: 2,
                    shapes_max: 4,
                    grid_stride: 2,
                    ..GeneratorSpec::default()
                },
                source_style: DomainStyle::source_default(),
                target_style: DomainStyle::target_default(),
                n_source: 6,
                n_target: 6,
                n_eval: 2,
                base_seed: 3,
            },
            iters: 4,
            pairs_per_iter: 2,
            lr: 5e-3,
            warmup_iters: 0,
            checkpoint_every: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validates_and_hashes_stably() {
        let cfg = tiny_config();
        cfg.validate().unwrap();
        assert_eq!(cfg.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.lr = 1e-3;
        assert_ne!(cfg.hash(), other.hash());

        // round trip through JSON
        let text = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);

        let mut bad = cfg.clone();
        bad.ablation.sim_plca = true; // fass/cass still enabled
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.arch.num_classes = 5;
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.pairs_per_iter = 100;
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.alpha = 1.5;
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.momentum = 1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn poly_schedule_decays_from_lr_toward_zero() {
        let mut cfg = tiny_config();
        cfg.iters = 2000;
        cfg.lr = 2.5e-4;
        assert_eq!(poly_lr(&cfg, 0), 2.5e-4);
        let mid = poly_lr(&cfg, 1000);
        assert!((mid - 2.5e-4 * 0.5f64.powf(0.9)).abs() < 1e-18);
        let last = poly_lr(&cfg, 1999);
        assert!(last > 0.0 && last < mid && mid < cfg.lr);

        // warmup holds its own constant rate; decay restarts after it
        cfg.warmup_iters = 500;
        cfg.warmup_lr = 4e-3;
        assert_eq!(poly_lr(&cfg, 0), 4e-3);
        assert_eq!(poly_lr(&cfg, 499), 4e-3);
        assert_eq!(poly_lr(&cfg, 500), cfg.lr);
        let mid = poly_lr(&cfg, 500 + 750);
        assert!((mid - 2.5e-4 * 0.5f64.powf(0.9)).abs() < 1e-18);
    }

    #[test]
    fn sgd_matches_the_two_step_oracle() {
        let arch = ArchConfig {
            channels: vec![3, 2],
            strides: vec![1],
            num_classes: 2,
        };
        let mut params = NetworkParams::<f64>::init(arch, 0).unwrap();
        let p0 = params.layers[0].weight[0];
        let n_tensors = params.tensors().len();
        let sizes: Vec<usize> = params.tensors().iter().map(|(_, _, v)| v.len()).collect();
        let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        grads[0][0] = 0.25;
        let (lr, m) = (0.1, 0.9);
        let mut sgd = SgdState::new(&params);
        sgd.step(&mut params, &grads, lr, m, 0.0).unwrap();
        sgd.step(&mut params, &grads, lr, m, 0.0).unwrap();
        let want = p0 - lr * 0.25 * (2.0 + m);
        assert!((params.layers[0].weight[0] - want).abs() < 1e-15);

        // weight decay pulls an untouched parameter toward zero
        let q0 = params.layers[0].weight[1];
        sgd.step(&mut params, &grads, lr, 0.0, 0.5).unwrap();
        let dq = params.layers[0].weight[1] - q0 * (1.0 - lr * 0.5);
        assert!(dq.abs() < 1e-15);

        grads[0][0] = f64::NAN;
        assert!(sgd.step(&mut params, &grads, lr, m, 0.0).is_err());
        assert_eq!(n_tensors, grads.len());
    }

    #[test]
    fn index_sampling_is_seeded_distinct_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = sample_indices(&mut rng, 10, 4);
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|&i| i < 10));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 4);
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(a, sample_indices(&mut rng2, 10, 4));
    }

    #[test]
    fn training_is_deterministic_and_learns_on_source() {
        let mut cfg = tiny_config();
        cfg.iters = 30;
        cfg.ablation = AblationFlags::source_only();
        let data = TrainData::generate(&cfg.data).unwrap();
        let a = train(&cfg, &data, None).unwrap();
        let b = train(&cfg, &data, None).unwrap();
        assert_eq!(a.params.layers[0].weight, b.params.layers[0].weight);
        assert_eq!(a.metrics.len(), 30);
        for m in &a.metrics {
            assert!(m.full.is_finite());
            assert_eq!((m.fass, m.cass, m.lsr), (0.0, 0.0, 0.0));
            assert!(m.lov > 0.0);
            assert_eq!(m.valid_pairs, 0);
        }
        assert!(a.max_prob_deviation < 1e-9);
        let first: f64 = a.metrics[..5].iter().map(|m| m.ce).sum::<f64>() / 5.0;
        let last: f64 = a.metrics[25..].iter().map(|m| m.ce).sum::<f64>() / 5.0;
        assert!(last < first, "ce did not improve: {first} -> {last}");
    }

    #[test]
    fn full_method_runs_all_terms_and_counts_cycles() {
        let cfg = tiny_config();
        let data = TrainData::generate(&cfg.data).unwrap();
        let result = train(&cfg, &data, None).unwrap();
        let m = &result.metrics[0];
        assert!(m.lov != 0.0 && m.fass != 0.0 && m.cass != 0.0 && m.lsr != 0.0);
        assert!(m.full.is_finite());
        // logged fields recombine into the logged objective
        let b = &cfg.betas;
        let recombined = m.ce + b[0] * m.lov + b[1] * (m.fass + m.cass) + b[2] * m.lsr;
        assert!((recombined - m.full).abs() < 1e-12);
        assert!(result.max_prob_deviation < 1e-9);

        // similarity baseline logs its loss in the fass slot
        let mut sim = cfg;
        sim.ablation = AblationFlags::sim_baseline();
        let r2 = train(&sim, &data, None).unwrap();
        assert!(r2.metrics[0].fass != 0.0);
        assert_eq!(r2.metrics[0].cass, 0.0);
    }

    #[test]
    fn checkpoints_and_metrics_round_trip_through_disk() {
        let cfg = tiny_config();
        let data = TrainData::generate(&cfg.data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let result = train(&cfg, &data, Some(dir.path())).unwrap();

        let (manifest, params) = load_checkpoint(&dir.path().join("ckpt_final")).unwrap();
        assert_eq!(manifest.config_hash, result.config_hash);
        assert_eq!(manifest.iter, cfg.iters);
        assert_eq!(params.layers[0].weight, result.params.layers[0].weight);
        assert_eq!(params.classifier.bias, result.params.classifier.bias);
        // cadence checkpoint exists too (iters 4, every 2 -> ckpt_00002)
        assert!(dir.path().join("ckpt_00002/manifest.json").exists());

        let lines: Vec<String> = fs::read_to_string(dir.path().join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        assert_eq!(lines.len(), cfg.iters);
        let row: IterMetrics = serde_json::from_str(&lines[0]).unwrap();
        assert_eq!(row.iter, 0);
        let saved: TrainConfig =
            serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap())
                .unwrap();
        assert_eq!(saved, result.config);
    }

    #[test]
    fn ablation_variants_cover_the_table() {
        let rows = ablation_variants();
        assert_eq!(rows.len(), 8);
        let names: std::collections::BTreeSet<_> = rows.iter().map(|r| r.0).collect();
        assert_eq!(names.len(), 8);
        let base = tiny_config();
        for (_, flags) in rows {
            let mut cfg = base.clone();
            cfg.ablation = flags;
            cfg.validate().unwrap();
        }
    }
}
