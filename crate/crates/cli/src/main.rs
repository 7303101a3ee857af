//! `plca` — generate the synthetic benchmark, train, evaluate, run the
//! ablation table, verify gradients, and dump association visualizations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use plca_core::aggregation::{aggregation_weights, spatial_aggregate_features, spatial_aggregate_probs};
use plca_core::association::{association_stats, build_cycle_associations};
use plca_core::datagen::{
    class_palette, generate_dataset, load_manifest, load_split, DatasetSpec, Sample, Split,
};
use plca_core::eval::{evaluate, predict_labels, EvalReport};
use plca_core::gradcheck::{all_pass, run_suite};
use plca_core::io::write_ppm;
use plca_core::segnet::{forward, insert_params};
use plca_core::similarity::{cosine_similarity_map, Direction};
use plca_core::train::{
    ablation_table, ablation_variants, load_checkpoint, run_ablation, train, TrainConfig,
    TrainData,
};
use plca_core::Graph;

#[derive(Parser)]
#[command(name = "plca", version, about = "Pixel-level cycle association at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the two-domain benchmark onto disk.
    GenData {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Dataset spec as JSON (defaults to the built-in benchmark).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Override the base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a generated dataset and report target mIoU.
    Train {
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Run directory for config, metrics, and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Training config as JSON (defaults applied field-wise).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the iteration count.
        #[arg(long)]
        iters: Option<usize>,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Use a named ablation variant (see `ablate`).
        #[arg(long)]
        variant: Option<String>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        /// Checkpoint directory (contains manifest.json).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Split: source-train, target-train, or target-eval.
        #[arg(long, default_value = "target-eval")]
        split: String,
        /// Disable spatial aggregation at inference.
        #[arg(long)]
        no_aggregate: bool,
        /// Aggregation mixing weight.
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Write the full report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every ablation variant and print the comparison table.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Verify analytic gradients against finite differences.
    GradCheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Dump cycle-association visualizations for one source/target pair.
    DumpAssoc {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pair index: the k-th source with the k-th target image.
        #[arg(long, default_value_t = 0)]
        pair: usize,
        /// Override the source index independently of --pair.
        #[arg(long)]
        source: Option<usize>,
        /// Override the target index independently of --pair.
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Associate against raw (unaggregated) target features.
        #[arg(long)]
        no_aggregate: bool,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::GenData { out, spec, seed } => gen_data(&out, spec.as_deref(), seed),
        Cmd::Train {
            data,
            out,
            config,
            iters,
            seed,
            variant,
        } => cmd_train(&data, &out, config.as_deref(), iters, seed, variant.as_deref()),
        Cmd::Eval {
            checkpoint,
            data,
            split,
            no_aggregate,
            alpha,
            out,
        } => cmd_eval(&checkpoint, &data, &split, no_aggregate, alpha, out.as_deref()),
        Cmd::Ablate { data, out, config } => cmd_ablate(&data, &out, config.as_deref()),
        Cmd::GradCheck { seed } => cmd_gradcheck(seed),
        Cmd::DumpAssoc {
            data,
            checkpoint,
            pair,
            source,
            target,
            out,
            alpha,
            no_aggregate,
        } => cmd_dump_assoc(
            &data,
            &checkpoint,
            source.unwrap_or(pair),
            target.unwrap_or(pair),
            &out,
            alpha,
            no_aggregate,
        ),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn gen_data(out: &Path, spec_path: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut spec: DatasetSpec = match spec_path {
        Some(p) => read_json(p)?,
        None => DatasetSpec::default(),
    };
    if let Some(s) = seed {
        spec.base_seed = s;
    }
    let manifest = generate_dataset(&spec, out)?;
    for e in &manifest.splits {
        println!("{}: {} samples", e.name, e.count);
    }
    println!("dataset written to {}", out.display());
    Ok(())
}

fn cmd_train(
    data_dir: &Path,
    out: &Path,
    config: Option<&Path>,
    iters: Option<usize>,
    seed: Option<u64>,
    variant: Option<&str>,
) -> Result<()> {
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    // the on-disk data defines the dataset; the config follows it
    let manifest = load_manifest(data_dir)?;
    cfg.data = manifest.spec;
    if let Some(n) = iters {
        cfg.iters = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(name) = variant {
        cfg.ablation = ablation_variants()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, f)| f)
            .ok_or_else(|| anyhow!("unknown variant '{name}'"))?;
    }
    cfg.validate()?;

    let data = TrainData::load(data_dir)?;
    let result = train(&cfg, &data, Some(out))?;
    println!("trained {} iterations, config {}", cfg.iters, &result.config_hash[..12]);

    let eval_pool = load_split(data_dir, Split::TargetEval)?;
    let mut report = evaluate(
        &result.params,
        &eval_pool,
        cfg.alpha,
        cfg.ablation.inference_aggregation,
    )?;
    report.config_hash = Some(result.config_hash.clone());
    report.checkpoint = Some(out.join("ckpt_final").display().to_string());
    print_report(&report);
    Ok(())
}

fn parse_split(name: &str) -> Result<Split> {
    match name {
        "source-train" => Ok(Split::SourceTrain),
        "target-train" => Ok(Split::TargetTrain),
        "target-eval" => Ok(Split::TargetEval),
        other => bail!("unknown split '{other}'"),
    }
}

fn cmd_eval(
    checkpoint: &Path,
    data_dir: &Path,
    split: &str,
    no_aggregate: bool,
    alpha: f64,
    out: Option<&Path>,
) -> Result<()> {
    let (manifest, params) = load_checkpoint(checkpoint)?;
    let samples = load_split(data_dir, parse_split(split)?)?;
    let mut report = evaluate(&params, &samples, alpha, !no_aggregate)?;
    report.checkpoint = Some(checkpoint.display().to_string());
    report.config_hash = Some(manifest.config_hash);
    print_report(&report);
    if let Some(p) = out {
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
        println!("report written to {}", p.display());
    }
    Ok(())
}

fn print_report(r: &EvalReport) {
    println!(
        "mIoU {:.4}  pixel-acc {:.4}  ({} images, aggregation {})",
        r.miou,
        r.pixel_accuracy,
        r.n_images,
        if r.aggregated { "on" } else { "off" }
    );
    for c in &r.per_class {
        println!(
            "  class {}: IoU {:.4} (tp {} fp {} fn {})",
            c.class, c.iou, c.tp, c.fp, c.fn_count
        );
    }
}

fn cmd_ablate(data_dir: &Path, out: &Path, config: Option<&Path>) -> Result<()> {
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    let manifest = load_manifest(data_dir)?;
    cfg.data = manifest.spec;
    cfg.validate()?;
    let data = TrainData::load(data_dir)?;
    let eval_pool = load_split(data_dir, Split::TargetEval)?;
    let rows = run_ablation(&cfg, &data, &eval_pool, Some(out))?;
    print!("{}", ablation_table(&rows));
    println!(
        "table written to {} and {}",
        out.join("ablation.json").display(),
        out.join("ablation.csv").display()
    );
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let items = run_suite(seed)?;
    for item in &items {
        println!(
            "{:<26} max rel err {:>12.3e}  tol {:.0e}  {}",
            item.name,
            item.max_rel_err,
            item.tolerance,
            if item.pass { "PASS" } else { "FAIL" }
        );
    }
    if !all_pass(&items) {
        bail!("gradient check failed");
    }
    println!("all {} checks passed", items.len());
    Ok(())
}

// ── association dump ────────────────────────────────────────────────────────

fn to_rgb8(image: &[f64], h: usize, w: usize) -> Vec<u8> {
    let mut rgb = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = image[(c * h + y) * w + x].clamp(0.0, 1.0);
                rgb[(y * w + x) * 3 + c] = (v * 255.0).round() as u8;
            }
        }
    }
    rgb
}

fn labels_to_rgb8(labels: &[u8], h: usize, w: usize, scale: usize, pal: &[[f64; 3]]) -> Vec<u8> {
    let (oh, ow) = (h * scale, w * scale);
    let mut rgb = vec![0u8; 3 * oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let color = pal[labels[(y / scale) * w + x / scale] as usize];
            for c in 0..3 {
                rgb[(y * ow + x) * 3 + c] = (color[c].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    rgb
}

#[allow(clippy::too_many_arguments)]
fn cmd_dump_assoc(
    data_dir: &Path,
    checkpoint: &Path,
    source: usize,
    target: usize,
    out: &Path,
    alpha: f64,
    no_aggregate: bool,
) -> Result<()> {
    let data_manifest = load_manifest(data_dir)?;
    let sources = load_split(data_dir, Split::SourceTrain)?;
    let targets = load_split(data_dir, Split::TargetTrain)?;
    let s: &Sample = sources.get(source).ok_or_else(|| anyhow!("source index out of range"))?;
    let t: &Sample = targets.get(target).ok_or_else(|| anyhow!("target index out of range"))?;
    let (_, params) = load_checkpoint(checkpoint)?;
    let stride = params.arch.total_stride();

    let mut g = Graph::<f64>::new();
    let pv = insert_params(&mut g, &params, false)?;
    let img_s = g.leaf(&[3, s.height, s.width], s.image.clone(), false)?;
    let img_t = g.leaf(&[3, t.height, t.width], t.image.clone(), false)?;
    let out_s = forward(&mut g, &pv, img_s)?;
    let out_t = forward(&mut g, &pv, img_t)?;
    let (f_t, p_t) = if no_aggregate {
        (out_t.feature_cols, out_t.probs)
    } else {
        let w = aggregation_weights(&mut g, out_t.feature_cols)?;
        (
            spatial_aggregate_features(&mut g, out_t.feature_cols, &w, alpha)?,
            spatial_aggregate_probs(&mut g, out_t.probs, &w, alpha)?,
        )
    };
    let d1 = cosine_similarity_map(&mut g, out_s.feature_cols, f_t, Direction::SourceToTarget)?;
    let d2 = cosine_similarity_map(&mut g, f_t, out_s.feature_cols, Direction::TargetToSource)?;
    let coarse = plca_core::datagen::downsample_labels(&s.labels, s.height, s.width, stride)?;
    let assoc = build_cycle_associations(&g, &d1, &d2, &coarse)?;
    let stats = association_stats(&assoc);
    println!(
        "{} cycles started, {} valid ({:.1}%), target coverage {:.1}%",
        assoc.records.len(),
        assoc.valid_count,
        100.0 * stats.valid_ratio,
        100.0 * stats.target_coverage
    );
    for (class, (started, valid)) in &stats.per_class {
        println!("  class {class}: {valid}/{started} cycles valid");
    }

    fs::create_dir_all(out)?;
    let pal = class_palette(
        data_manifest.spec.generator.classes,
        &data_manifest.spec.source_style,
    );
    write_ppm(&out.join("source.ppm"), s.width, s.height, &to_rgb8(&s.image, s.height, s.width))?;
    write_ppm(&out.join("target.ppm"), t.width, t.height, &to_rgb8(&t.image, t.height, t.width))?;
    write_ppm(
        &out.join("source_labels.ppm"),
        s.width,
        s.height,
        &labels_to_rgb8(&s.labels, s.height, s.width, 1, &pal),
    )?;
    let (gh, gw) = out_t.grid;
    let pred = predict_labels(g.values(p_t), params.arch.num_classes, gh * gw);
    write_ppm(
        &out.join("target_pred.ppm"),
        gw * stride,
        gh * stride,
        &labels_to_rgb8(&pred, gh, gw, stride, &pal),
    )?;
    // cycle map on the source grid: green = valid, red = invalid
    let (sh, sw) = out_s.grid;
    let mut cyc = vec![0u8; 3 * sh * stride * sw * stride];
    for r in &assoc.records {
        let (y, x) = (r.i / sw, r.i % sw);
        let color: [u8; 3] = if r.valid { [40, 200, 60] } else { [200, 50, 40] };
        for dy in 0..stride {
            for dx in 0..stride {
                let o = ((y * stride + dy) * sw * stride + x * stride + dx) * 3;
                cyc[o..o + 3].copy_from_slice(&color);
            }
        }
    }
    write_ppm(&out.join("cycles.ppm"), sw * stride, sh * stride, &cyc)?;
    println!("visualizations written to {}", out.display());
    Ok(())
}
