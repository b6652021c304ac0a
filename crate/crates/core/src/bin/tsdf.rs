//! Batch command line for the two-stage prognosis pipeline.
//!
//! Subcommands cover the whole workflow: `synth` writes a synthetic image
//! cohort, `pretrain` fits the masked-autoencoder encoder, `extract` caches
//! per-visit embeddings, `train` runs cross-validated aggregator training,
//! `eval` scores saved checkpoints on a held-out manifest, and `ablate`
//! reproduces the ablation tables. Every run takes an explicit `--seed`
//! (never a wall-clock default) and writes a `config.txt` echo of all
//! resolved flags into its output directory, so any artifact can be
//! replayed exactly.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (I/O, malformed
//! inputs, shape or label mismatches), 3 numerical failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tsdf_core::aggregator::{AggregatorConfig, EpochLog, SeqExample, TrainOptions};
use tsdf_core::checkpoint::{load_aggregator, load_encoder, save_aggregator, save_encoder};
use tsdf_core::data::{
    generate_cohort, leakage_filter_cohort, load_manifest, read_pgm, visit_key, write_manifest,
    write_pgm, EmbeddingStore, PatientSequence, SynthConfig,
};
use tsdf_core::eval::EvalReport;
use tsdf_core::harness::{
    compare_models, delta_t_sweep, evaluate_split, examples_from_store, extract_embeddings,
    lambda_ablation, preprocessed_tensor, run_cv, width_ablation,
};
use tsdf_core::mae::{pretrain, MAEConfig, PretrainOptions};
use tsdf_core::tensor::{Result, Tensor, TensorError};

#[derive(Parser)]
#[command(name = "tsdf", version, about = "Two-stage sequence prognosis pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic longitudinal cohort: PGM images plus a manifest.
    Synth(SynthArgs),
    /// Pretrain the image encoder by masked reconstruction (label-free).
    Pretrain(PretrainArgs),
    /// Run a saved encoder over a manifest and cache one embedding per visit.
    Extract(ExtractArgs),
    /// Train the temporal aggregator with patient-level cross-validation.
    Train(TrainArgs),
    /// Score saved aggregator checkpoints on a held-out manifest.
    Eval(EvalArgs),
    /// Train an ablation grid on one shared split and emit its table.
    Ablate(AblateArgs),
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct Common {
    /// Output directory; created if missing. Receives the config echo.
    #[arg(long)]
    out: PathBuf,
    /// RNG seed. Mandatory: runs are replayable, never seeded from time.
    #[arg(long)]
    seed: u64,
    /// Record that the run must be bit-reproducible. Execution is already
    /// deterministic for a fixed seed; the flag is echoed into config.txt.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Number of patients (one sequence each).
    #[arg(long, default_value_t = 600)]
    patients: usize,
    /// Fraction of progressors, met within one patient by quota.
    #[arg(long, default_value_t = 0.5)]
    positive_frac: f64,
    /// Yearly severity gain of progressors.
    #[arg(long, default_value_t = 0.5)]
    drift: f64,
    /// Noise scale on rendered severity.
    #[arg(long, default_value_t = 0.7)]
    noise: f64,
    /// Side length of the square grayscale images.
    #[arg(long, default_value_t = 32)]
    image_size: usize,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// Cohort manifest(s); repeated flags merge corpora for joint pretraining.
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Input side length images are resized to.
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Fraction of patches hidden from the encoder.
    #[arg(long, default_value_t = 0.75)]
    mask_ratio: f64,
    /// Width of the encoder (embedding dimension of cached features).
    #[arg(long, default_value_t = 64)]
    encoder_dim: usize,
}

#[derive(Args)]
struct ExtractArgs {
    #[command(flatten)]
    common: Common,
    /// Encoder checkpoint produced by `pretrain`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Embedding store to write; defaults to `<out>/embeddings.bin`.
    #[arg(long)]
    store: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: PathBuf,
    /// Embedding store produced by `extract`.
    #[arg(long)]
    store: PathBuf,
    /// Number of patient-level cross-validation folds.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Weight of the per-frame instance loss.
    #[arg(long, default_value_t = 1.5)]
    lambda1: f64,
    /// Weight of the sequence-relationship loss.
    #[arg(long, default_value_t = 1.0)]
    lambda2: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Early-stopping patience in epochs.
    #[arg(long, default_value_t = 10)]
    patience: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Aggregator checkpoint to score.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Second aggregator checkpoint; adds a Mann-Whitney U comparison of
    /// the two models' per-fold AUC over the manifest's fold partitions.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    store: PathBuf,
    /// Folds used for the --compare partitions.
    #[arg(long, default_value_t = 5)]
    folds: usize,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Grid {
    /// Loss-weight ratios λ1:λ2 (5 cells).
    Lambda,
    /// Projection width and attention variant (3 cells).
    Width,
    /// Fixed history length Δt versus variable-length training.
    DeltaT,
}

impl Grid {
    fn name(self) -> &'static str {
        match self {
            Grid::Lambda => "lambda",
            Grid::Width => "width",
            Grid::DeltaT => "delta-t",
        }
    }
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    grid: Grid,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    store: PathBuf,
    /// Largest fixed history length for the delta-t sweep.
    #[arg(long, default_value_t = 4)]
    max: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // clap would exit 2; reserve that for data errors and report
            // usage problems as 1 (help/version remain success)
            let usage = err.use_stderr();
            let _ = err.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(exit_class(&err))
        }
    }
}

fn exit_class(err: &TensorError) -> u8 {
    match err {
        TensorError::NonFinite { .. }
        | TensorError::BackwardAlreadyRun
        | TensorError::NonScalarLoss(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth(args) => cmd_synth(args),
        Cmd::Pretrain(args) => cmd_pretrain(args),
        Cmd::Extract(args) => cmd_extract(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Ablate(args) => cmd_ablate(args),
    }
}

fn io_err(op: &'static str, err: std::io::Error) -> TensorError {
    TensorError::io(op, err)
}

fn prepare_out(common: &Common, subcommand: &str, flags: &[(&str, String)]) -> Result<()> {
    std::fs::create_dir_all(&common.out).map_err(|e| io_err("create_out_dir", e))?;
    let mut echo = String::new();
    let _ = writeln!(echo, "subcommand = {subcommand}");
    let _ = writeln!(echo, "out = {}", common.out.display());
    let _ = writeln!(echo, "seed = {}", common.seed);
    let _ = writeln!(echo, "deterministic = {}", common.deterministic);
    for (key, value) in flags {
        let _ = writeln!(echo, "{key} = {value}");
    }
    std::fs::write(common.out.join("config.txt"), echo).map_err(|e| io_err("write_config", e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err("write_artifact", e))
}

/// Load a manifest, echo its warnings to stderr, and return the sequences.
fn read_cohort(path: &Path) -> Result<Vec<PatientSequence>> {
    let (cohort, warnings) = load_manifest(path)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(cohort)
}

/// Resolve each visit's image relative to the manifest location, read it,
/// and preprocess it in eval mode (plain resize + normalization).
fn load_visit_tensors(
    manifest: &Path,
    cohort: &[PatientSequence],
    side: usize,
) -> Result<Vec<(String, Tensor<f32>)>> {
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut items = Vec::new();
    for seq in cohort {
        for v in &seq.visits {
            let img = read_pgm(&base.join(&v.image_ref))?;
            let tensor = preprocessed_tensor(&img, side)?;
            items.push((visit_key(&seq.patient_id, seq.eye, v.visit_index), tensor));
        }
    }
    Ok(items)
}

/// Apply the pre-onset filter and report exclusions; training and
/// evaluation only ever see visits acquired before the first positive
/// frame label.
fn pre_onset(cohort: &[PatientSequence]) -> Result<Vec<PatientSequence>> {
    let (kept, warnings) = leakage_filter_cohort(cohort)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if !warnings.is_empty() {
        eprintln!("excluded {} sequence(s) with a positive first visit", warnings.len());
    }
    Ok(kept)
}

fn load_examples(
    manifest: &Path,
    store_path: &Path,
) -> Result<(Vec<PatientSequence>, EmbeddingStore, Vec<SeqExample<f32>>)> {
    let cohort = pre_onset(&read_cohort(manifest)?)?;
    let store = EmbeddingStore::read(store_path)?;
    let examples = examples_from_store(&cohort, &store)?;
    Ok((cohort, store, examples))
}

fn epoch_log_table(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch\tlr\tloss_single\tloss_seq\tloss_total\tval_acc\tval_auc\n");
    for e in log {
        let auc = e.val_auc.map_or_else(|| "-".to_string(), |a| format!("{a:.6}"));
        let _ = writeln!(
            out,
            "{}\t{:.8}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            e.epoch, e.lr, e.loss_single, e.loss_seq, e.loss_total, e.val_acc, auc
        );
    }
    out
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_patients: args.patients,
        positive_fraction: args.positive_frac,
        drift: args.drift,
        noise: args.noise,
        seed: args.common.seed,
        ..Default::default()
    };
    prepare_out(
        &args.common,
        "synth",
        &[
            ("patients", args.patients.to_string()),
            ("positive_frac", args.positive_frac.to_string()),
            ("drift", args.drift.to_string()),
            ("noise", args.noise.to_string()),
            ("image_size", args.image_size.to_string()),
        ],
    )?;
    let cohort = generate_cohort(&cfg)?;
    let images = cohort.images(args.image_size)?;

    let image_dir = args.common.out.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| io_err("create_image_dir", e))?;
    let mut sequences = cohort.sequences();
    for (seq, imgs) in sequences.iter_mut().zip(&images) {
        for (visit, img) in seq.visits.iter_mut().zip(imgs) {
            write_pgm(&image_dir.join(&visit.image_ref), img)?;
            visit.image_ref = format!("images/{}", visit.image_ref);
        }
    }
    write_manifest(&args.common.out.join("manifest.csv"), &sequences)?;

    let mut per_class = [0usize; 2];
    let mut lengths = std::collections::BTreeMap::new();
    for seq in &sequences {
        per_class[seq.sequence_label] += 1;
        *lengths.entry(seq.len()).or_insert(0usize) += 1;
    }
    let mut summary = String::new();
    let _ = writeln!(summary, "patients\t{}", sequences.len());
    let _ = writeln!(summary, "controls\t{}", per_class[0]);
    let _ = writeln!(summary, "progressors\t{}", per_class[1]);
    let _ = writeln!(summary, "length\tcount");
    for (len, count) in &lengths {
        let _ = writeln!(summary, "{len}\t{count}");
    }
    write_text(&args.common.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let manifests: Vec<String> =
        args.manifest.iter().map(|m| m.display().to_string()).collect();
    prepare_out(
        &args.common,
        "pretrain",
        &[
            ("manifest", manifests.join(",")),
            ("epochs", args.epochs.to_string()),
            ("batch_size", args.batch_size.to_string()),
            ("image_size", args.image_size.to_string()),
            ("mask_ratio", args.mask_ratio.to_string()),
            ("encoder_dim", args.encoder_dim.to_string()),
        ],
    )?;
    let mut corpus = Vec::new();
    for manifest in &args.manifest {
        let cohort = read_cohort(manifest)?;
        let items = load_visit_tensors(manifest, &cohort, args.image_size)?;
        corpus.extend(items.into_iter().map(|(_, tensor)| tensor));
    }
    let cfg = MAEConfig {
        image_size: args.image_size,
        mask_ratio: args.mask_ratio,
        encoder_dim: args.encoder_dim,
        ..MAEConfig::desk()
    };
    let opts = PretrainOptions {
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.common.seed,
        ..Default::default()
    };
    println!("corpus\t{}", corpus.len());
    let (model, losses) = pretrain(&corpus, cfg, opts)?;
    save_encoder(&args.common.out.join("encoder.ckpt"), &model)?;

    let mut log = String::from("epoch\tloss\n");
    for (epoch, loss) in losses.iter().enumerate() {
        let _ = writeln!(log, "{}\t{loss:.6}", epoch + 1);
        println!("epoch {}\tloss {loss:.6}", epoch + 1);
    }
    write_text(&args.common.out.join("pretrain_log.tsv"), &log)?;
    Ok(())
}

fn cmd_extract(args: ExtractArgs) -> Result<()> {
    let store_path =
        args.store.clone().unwrap_or_else(|| args.common.out.join("embeddings.bin"));
    prepare_out(
        &args.common,
        "extract",
        &[
            ("checkpoint", args.checkpoint.display().to_string()),
            ("manifest", args.manifest.display().to_string()),
            ("store", store_path.display().to_string()),
        ],
    )?;
    let encoder = load_encoder(&args.checkpoint)?;
    let cohort = read_cohort(&args.manifest)?;
    let items = load_visit_tensors(&args.manifest, &cohort, encoder.cfg.image_size)?;
    let store = extract_embeddings(&encoder, &items)?;
    store.write(&store_path)?;
    println!("embeddings\t{}", store.len());
    println!("dim\t{}", store.dim());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    prepare_out(
        &args.common,
        "train",
        &[
            ("manifest", args.manifest.display().to_string()),
            ("store", args.store.display().to_string()),
            ("folds", args.folds.to_string()),
            ("lambda1", args.lambda1.to_string()),
            ("lambda2", args.lambda2.to_string()),
            ("epochs", args.epochs.to_string()),
            ("patience", args.patience.to_string()),
        ],
    )?;
    let (cohort, store, examples) = load_examples(&args.manifest, &args.store)?;
    let cfg = AggregatorConfig {
        lambda1: args.lambda1,
        lambda2: args.lambda2,
        ..AggregatorConfig::for_dim(store.dim())
    };
    let opts = TrainOptions {
        max_epochs: args.epochs,
        patience: Some(args.patience),
        seed: args.common.seed,
        ..Default::default()
    };
    let (report, models, logs) = run_cv(&cohort, &examples, args.folds, cfg, opts, args.common.seed)?;
    for (i, (model, log)) in models.iter().zip(&logs).enumerate() {
        save_aggregator(&args.common.out.join(format!("fold{}.ckpt", i + 1)), model)?;
        write_text(
            &args.common.out.join(format!("fold{}_log.tsv", i + 1)),
            &epoch_log_table(log),
        )?;
    }
    let rendered = report.render();
    write_text(&args.common.out.join("report.txt"), &rendered)?;
    print!("{rendered}");
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    prepare_out(
        &args.common,
        "eval",
        &[
            ("checkpoint", args.checkpoint.display().to_string()),
            (
                "compare",
                args.compare
                    .as_ref()
                    .map_or_else(|| "-".to_string(), |p| p.display().to_string()),
            ),
            ("manifest", args.manifest.display().to_string()),
            ("store", args.store.display().to_string()),
            ("folds", args.folds.to_string()),
        ],
    )?;
    let (cohort, _, examples) = load_examples(&args.manifest, &args.store)?;
    let model = load_aggregator(&args.checkpoint)?;
    let all: Vec<usize> = (0..examples.len()).collect();
    let (acc, auc) = evaluate_split(&model, &examples, &all)?;

    let mut out = String::new();
    let _ = writeln!(out, "n_sequences\t{}", examples.len());
    let _ = writeln!(out, "acc\t{acc:.6}");
    let _ = writeln!(out, "auc\t{auc:.6}");
    if let Some(other_path) = &args.compare {
        let other = load_aggregator(other_path)?;
        let sig = compare_models(&model, &other, &cohort, &examples, args.folds, args.common.seed)?;
        let (other_acc, other_auc) = evaluate_split(&other, &examples, &all)?;
        let _ = writeln!(out, "compare_acc\t{other_acc:.6}");
        let _ = writeln!(out, "compare_auc\t{other_auc:.6}");
        let _ = writeln!(
            out,
            "significance ({}): U={:.4} p={:.6} mode={}",
            sig.unit,
            sig.u,
            sig.p,
            if sig.exact { "exact" } else { "normal" }
        );
    }
    write_text(&args.common.out.join("eval_report.txt"), &out)?;
    print!("{out}");
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    prepare_out(
        &args.common,
        "ablate",
        &[
            ("grid", args.grid.name().to_string()),
            ("manifest", args.manifest.display().to_string()),
            ("store", args.store.display().to_string()),
            ("max", args.max.to_string()),
            ("epochs", args.epochs.to_string()),
            ("patience", args.patience.to_string()),
        ],
    )?;
    let (cohort, store, examples) = load_examples(&args.manifest, &args.store)?;
    let cfg = AggregatorConfig::for_dim(store.dim());
    let opts = TrainOptions {
        max_epochs: args.epochs,
        patience: Some(args.patience),
        seed: args.common.seed,
        ..Default::default()
    };
    let seed = args.common.seed;
    let mut report = EvalReport::default();
    match args.grid {
        Grid::Lambda => {
            report.lambda_table = lambda_ablation(&cohort, &examples, cfg, opts, seed)?;
        }
        Grid::Width => {
            report.width_table = width_ablation(&cohort, &examples, store.dim(), opts, seed)?;
        }
        Grid::DeltaT => {
            report.delta_table = delta_t_sweep(&cohort, &store, args.max, cfg, opts, seed)?;
        }
    }
    let rendered = report.render();
    write_text(
        &args.common.out.join(format!("{}_table.txt", args.grid.name())),
        &rendered,
    )?;
    print!("{rendered}");
    Ok(())
}
