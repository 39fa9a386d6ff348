//! Single entry point for the pipeline: `prepare` builds a mismatch dataset,
//! `train` runs the training loop from a JSON config, `evaluate` scores a
//! checkpoint, and `theory-check` verifies the gradient-alignment and
//! selection-error bounds empirically.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration or schema, 4 I/O,
//! 5 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use calimatch::data::{
    augment, ingest_image_dataset, load_dataset, make_synthetic, save_dataset, AugmentKind,
    AugmentationPair, ImageIngestConfig, MismatchDataset, SyntheticConfig,
};
use calimatch::error::{Error, Result};
use calimatch::metrics::{self, ConfidenceSource, EvalConfig};
use calimatch::selection::{select_batch, GateMode, HiddenTruth};
use calimatch::theory::{alignment_report, lemma_check, CalibratedOracle, SelectedSample};
use calimatch::trainer::{
    apply_preset, config_hash, preset_names, run_training_to_dir, Checkpoint, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "calimatch",
    version,
    about = "Calibrated safe semi-supervised learning: dataset preparation, training, evaluation, and theory checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or ingest) a label-distribution-mismatch dataset.
    Prepare(PrepareArgs),
    /// Train a model from a JSON config on a prepared dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test splits.
    Evaluate(EvaluateArgs),
    /// Verify the gradient-alignment and selection-error bounds.
    TheoryCheck(TheoryArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Output directory for the splits and manifest.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of the unlabeled pool drawn from unseen classes.
    #[arg(long, default_value_t = 0.6)]
    kappa: f64,
    /// Number of seen classes (synthetic mode).
    #[arg(long, default_value_t = 6)]
    seen: usize,
    /// Number of unseen classes (synthetic mode).
    #[arg(long, default_value_t = 4)]
    unseen: usize,
    #[arg(long, default_value_t = 300)]
    n_labeled: usize,
    #[arg(long, default_value_t = 5000)]
    n_unlabeled: usize,
    #[arg(long, default_value_t = 2000)]
    n_test: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Per-class Gaussian spread (synthetic mode).
    #[arg(long, default_value_t = 1.0)]
    spread: f64,
    /// Radius of the seen-class mean circle (synthetic mode).
    #[arg(long, default_value_t = 3.0)]
    r_seen: f64,
    /// Radius of the unseen-class mean circle (synthetic mode).
    #[arg(long, default_value_t = 4.0)]
    r_unseen: f64,
    /// Ingest a directory of class_<id>.bin image records instead of
    /// generating Gaussians.
    #[arg(long)]
    from_images: Option<PathBuf>,
    /// Seen class ids for image ingestion (comma-separated).
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6,7")]
    seen_classes: Vec<usize>,
    /// Unseen class ids for image ingestion (comma-separated).
    #[arg(long, value_delimiter = ',', default_value = "0,1,8,9")]
    unseen_classes: Vec<usize>,
    /// Labeled samples per seen class for image ingestion.
    #[arg(long, default_value_t = 400)]
    labels_per_class: usize,
}

#[derive(Args)]
#[command(after_help = train_config_help())]
struct TrainArgs {
    /// JSON config file; keys must match the training-config schema exactly.
    #[arg(long)]
    config: PathBuf,
    /// Dataset manifest produced by `prepare`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for logs, checkpoints, and the run manifest.
    #[arg(long)]
    out: PathBuf,
    /// Named ablation preset applied on top of the config.
    #[arg(long, value_parser = PossibleValuesParser::new(preset_names()))]
    preset: Option<String>,
    /// Override the config's seed (handy for paired-seed sweeps).
    #[arg(long)]
    seed: Option<u64>,
}

fn train_config_help() -> String {
    format!(
        "Config schema fields (JSON, unknown keys rejected):\n  {}",
        TrainConfig::FIELDS.join(", ")
    )
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest produced by `prepare`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Bin count for calibration error.
    #[arg(long, default_value_t = 15)]
    ece_bins: usize,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest produced by `prepare`.
    #[arg(long)]
    data: PathBuf,
    /// Number of random gated batches for the alignment analysis.
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    /// Output report file (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Unlabeled batch size per alignment draw.
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Stream size per selection-error simulation cell.
    #[arg(long, default_value_t = 10_000)]
    lemma_n: usize,
}

/// Provenance stamp stored next to every command's outputs. Timestamps live
/// only here, keeping the data artifacts byte-stable across reruns.
#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    schema: String,
    command: String,
    config_hash: String,
    seed: u64,
    version: String,
    started_unix: u64,
    finished_unix: u64,
    artifacts: Vec<String>,
    dirty: bool,
}

const RUN_MANIFEST_SCHEMA: &str = "run-manifest/1";

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn hash_str(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn run_manifest(
    command: &str,
    config_hash: String,
    seed: u64,
    started: u64,
    artifacts: Vec<String>,
) -> RunManifest {
    RunManifest {
        schema: RUN_MANIFEST_SCHEMA.to_string(),
        command: command.to_string(),
        config_hash,
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: started,
        finished_unix: unix_now(),
        // A build from a modified tree can mark itself via BUILD_DIRTY.
        dirty: option_env!("BUILD_DIRTY").is_some(),
        artifacts,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(format!("{}: {e}", path.display())))
}

fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    let started = unix_now();
    let dataset = if let Some(image_dir) = &args.from_images {
        let cfg = ImageIngestConfig {
            seed: args.seed,
            seen_classes: args.seen_classes.clone(),
            unseen_classes: args.unseen_classes.clone(),
            kappa: args.kappa,
            labels_per_class: args.labels_per_class,
            n_unlabeled: args.n_unlabeled,
            n_test: args.n_test,
        };
        ingest_image_dataset(image_dir, &cfg)?
    } else {
        let cfg = SyntheticConfig {
            seed: args.seed,
            num_seen: args.seen,
            num_unseen: args.unseen,
            kappa: args.kappa,
            n_labeled: args.n_labeled,
            n_unlabeled: args.n_unlabeled,
            n_test: args.n_test,
            dim: args.dim,
            cluster_spread: args.spread,
            r_seen: args.r_seen,
            r_unseen: args.r_unseen,
        };
        make_synthetic(&cfg)?
    };
    let manifest_path = save_dataset(&dataset, &args.out)?;

    // Stamp provenance into the dataset manifest (the only mutable part).
    let text = fs::read_to_string(&manifest_path)?;
    let mut manifest: calimatch::data::DatasetManifest = serde_json::from_str(&text)?;
    let stamp = run_manifest(
        "prepare",
        hash_str(&format!("prepare:{}", args.seed)),
        args.seed,
        started,
        manifest.files.keys().cloned().collect(),
    );
    manifest.run = Some(serde_json::to_value(&stamp)?);
    write_json(&manifest_path, &manifest)?;
    println!("{}", manifest_path.display());
    Ok(())
}

fn load_data(path: &Path) -> Result<MismatchDataset> {
    let (dataset, _) = load_dataset(path)?;
    Ok(dataset)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let started = unix_now();
    let text = fs::read_to_string(&args.config)
        .map_err(|e| Error::io(format!("{}: {e}", args.config.display())))?;
    let mut config = TrainConfig::from_json_str(&text)?;
    if let Some(preset) = &args.preset {
        apply_preset(preset, &mut config)?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let dataset = load_data(&args.data)?;
    run_training_to_dir(&dataset, &config, &args.out)?;
    let manifest = run_manifest(
        "train",
        config_hash(&config),
        config.seed,
        started,
        vec![
            "log.csv".into(),
            "epochs.csv".into(),
            "tables.csv".into(),
            "checkpoint-best".into(),
            "checkpoint-last".into(),
        ],
    );
    write_json(&args.out.join("manifest.json"), &manifest)?;
    println!("{}", args.out.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let started = unix_now();
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let dataset = load_data(&args.data)?;
    let eval_cfg = EvalConfig {
        ece_bins: args.ece_bins,
        confidence_source: if ckpt.config.disable_mcal {
            ConfidenceSource::Raw
        } else {
            ConfidenceSource::Scaled
        },
    };
    let arts = metrics::evaluate(&ckpt.params, &dataset, &eval_cfg)?;
    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("report.json"), &arts.report)?;
    metrics::emit_reliability_data(
        &arts.multiclass_reliability,
        &args.out.join("reliability_multiclass.csv"),
    )?;
    metrics::emit_reliability_data(
        &arts.binary_ood_reliability,
        &args.out.join("reliability_binary_ood.csv"),
    )?;
    let mut sweep = String::from("tau1,accuracy,f1,selected_fraction\n");
    for row in &arts.report.sweep {
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x}"));
        sweep.push_str(&format!(
            "{},{},{},{}\n",
            row.tau1,
            fmt(row.accuracy),
            fmt(row.f1),
            fmt(row.selected_fraction)
        ));
    }
    fs::write(args.out.join("sweep.csv"), sweep)?;
    let manifest = run_manifest(
        "evaluate",
        ckpt.config_hash.clone(),
        ckpt.config.seed,
        started,
        vec![
            "report.json".into(),
            "reliability_multiclass.csv".into(),
            "reliability_binary_ood.csv".into(),
            "sweep.csv".into(),
        ],
    );
    write_json(&args.out.join("manifest.json"), &manifest)?;
    println!("{}", args.out.join("report.json").display());
    Ok(())
}

/// Per-draw alignment summary in the theory report.
#[derive(Debug, Serialize, Deserialize)]
struct AlignmentDraw {
    seed: u64,
    n_selected: usize,
    n_errors: usize,
    epsilon_hat: f64,
    grad_diff_norm: f64,
    identity_gap: f64,
    bound: f64,
    bound_holds: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct TheoryReport {
    checkpoint_config_hash: String,
    draws: Vec<AlignmentDraw>,
    draws_with_selection: usize,
    all_bounds_hold: bool,
    max_identity_gap: f64,
    lemma_grid: Vec<calimatch::theory::LemmaReport>,
    lemma_violations: usize,
}

fn cmd_theory(args: TheoryArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let dataset = load_data(&args.data)?;
    let config = &ckpt.config;
    let pair = AugmentationPair {
        sigma_weak: config.sigma_weak,
        sigma_strong: config.sigma_strong,
        dropout_rate: config.dropout_rate,
    };
    let gate = if config.disable_ood_head {
        GateMode::ConfidenceOnly
    } else {
        GateMode::SeenAndConfidence
    };
    let truth = dataset.unlabeled_truth();
    let n_pool = dataset.unlabeled_x.nrows();
    let batch = args.batch.min(n_pool);

    let mut draws = Vec::new();
    let mut all_hold = true;
    let mut max_gap = 0.0f64;
    let mut with_selection = 0usize;
    for seed in 0..args.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(config.seed));
        let idx: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..n_pool)).collect();
        let x = Array2::from_shape_fn((batch, dataset.dim()), |(i, j)| {
            dataset.unlabeled_x[[idx[i], j]]
        });
        let weak = augment(&pair, x.view(), AugmentKind::Weak, &mut rng);
        let (out_w, _) = ckpt.params.forward(weak.view())?;
        let records = select_batch(&out_w, config.tau1, config.tau2, gate)?;
        let selected: Vec<usize> = (0..batch).filter(|&i| records[i].selected).collect();
        if selected.is_empty() {
            draws.push(AlignmentDraw {
                seed,
                n_selected: 0,
                n_errors: 0,
                epsilon_hat: 0.0,
                grad_diff_norm: 0.0,
                identity_gap: 0.0,
                bound: 0.0,
                bound_holds: true,
            });
            continue;
        }
        with_selection += 1;
        let strong_all = augment(&pair, x.view(), AugmentKind::Strong, &mut rng);
        let strong = Array2::from_shape_fn((selected.len(), dataset.dim()), |(i, j)| {
            strong_all[[selected[i], j]]
        });
        let samples: Vec<SelectedSample> = selected
            .iter()
            .map(|&i| {
                let pool_idx = idx[i];
                let seen = truth.seen[pool_idx];
                SelectedSample {
                    pseudo_label: records[i].pseudo_label,
                    truth: HiddenTruth {
                        label: if seen {
                            dataset.seen_position(truth.labels[pool_idx])
                        } else {
                            None
                        },
                        seen,
                    },
                }
            })
            .collect();
        let report = alignment_report(&ckpt.params, strong.view(), &samples)?;
        all_hold &= report.bound_holds;
        max_gap = max_gap.max(report.identity_gap);
        draws.push(AlignmentDraw {
            seed,
            n_selected: report.n_selected,
            n_errors: report.n_errors,
            epsilon_hat: report.epsilon_hat,
            grad_diff_norm: report.grad_diff_norm,
            identity_gap: report.identity_gap,
            bound: report.bound,
            bound_holds: report.bound_holds,
        });
    }

    // Selection-error simulation over the threshold/miscalibration grid.
    let mut lemma_grid = Vec::new();
    let mut lemma_violations = 0usize;
    let taus = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95];
    let etas = [0.0, 0.02, 0.1, 0.2];
    for &tau1 in &taus {
        for &tau2 in &taus {
            for &eta in &etas {
                let oracle = CalibratedOracle::new(eta, config.bins)?;
                let report = lemma_check(&oracle, tau1, tau2, args.lemma_n, config.seed)?;
                if report.violated {
                    lemma_violations += 1;
                }
                lemma_grid.push(report);
            }
        }
    }

    let report = TheoryReport {
        checkpoint_config_hash: ckpt.config_hash.clone(),
        draws,
        draws_with_selection: with_selection,
        all_bounds_hold: all_hold,
        max_identity_gap: max_gap,
        lemma_grid,
        lemma_violations,
    };
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_json(&args.out, &report)?;
    println!("{}", args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::TheoryCheck(args) => cmd_theory(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
