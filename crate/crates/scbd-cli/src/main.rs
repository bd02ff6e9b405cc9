//! `scbd` — dataset generation, training, and evaluation from one binary.
//!
//! Every option can come from three places, in order of precedence: a
//! command-line flag, a `key = value` config file passed with `--config`,
//! and the built-in default. Each run writes its artifacts plus a
//! `manifest.txt` recording the fully resolved configuration and a SHA-256
//! hash of every artifact, so runs can be compared byte for byte.
//!
//! Exit codes: 0 on success, 2 for bad arguments or missing input files,
//! 3 when training diverges (the last finite state is still checkpointed).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod config;
mod manifest;
mod run;

#[derive(Parser)]
#[command(name = "scbd", version, about = "Supervised contrastive block disentanglement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural dataset.
    #[command(subcommand)]
    GenData(Generator),
    /// Train one model and checkpoint it.
    Train(TrainArgs),
    /// Train over an α grid and tabulate in-distribution val accuracy
    /// against out-of-distribution test accuracy.
    SweepAlpha(SweepAlphaArgs),
    /// Train the ERM baseline over a hyperparameter grid and correlate
    /// val accuracy with test accuracy.
    ErmScan(ErmScanArgs),
    /// Score batch correction on a screen: well predictability of z_c and
    /// complex recovery of gene-level embeddings.
    EvalBatchcorr(BatchcorrArgs),
    /// Decode counterfactual style swaps from a trained checkpoint.
    Swap(SwapArgs),
}

#[derive(Subcommand)]
enum Generator {
    /// Colored digits whose palette depends on the environment.
    Cmnist(CmnistArgs),
    /// Pooled optical screen with per-well batch effects.
    OpsSim(OpsSimArgs),
}

/// Options shared by every subcommand.
#[derive(Args)]
struct CommonArgs {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory [default: $SCBD_OUT/<command>].
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed [file key: seed].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CmnistArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Training examples per environment [file key: gen.n_per_env].
    #[arg(long)]
    n_per_env: Option<usize>,
    /// Held-out examples per evaluation split [file key: gen.n_test].
    #[arg(long)]
    n_test: Option<usize>,
    /// IDX image file; replaces the builtin glyphs [file key: gen.mnist_images].
    #[arg(long, value_name = "FILE")]
    mnist_images: Option<PathBuf>,
    /// IDX label file, required alongside --mnist-images.
    #[arg(long, value_name = "FILE")]
    mnist_labels: Option<PathBuf>,
}

#[derive(Args)]
struct OpsSimArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Perturbed genes, excluding the non-targeting control [file key: gen.genes].
    #[arg(long)]
    genes: Option<usize>,
    /// Genes per protein complex [file key: gen.complex_size].
    #[arg(long)]
    complex_size: Option<usize>,
    /// Number of wells [file key: gen.wells].
    #[arg(long)]
    wells: Option<usize>,
    /// Guides per perturbed gene [file key: gen.guides_per_gene].
    #[arg(long)]
    guides_per_gene: Option<usize>,
    /// Guides for the non-targeting control [file key: gen.control_guides].
    #[arg(long)]
    control_guides: Option<usize>,
    /// Cells per guide [file key: gen.cells_per_guide].
    #[arg(long)]
    cells_per_guide: Option<usize>,
    /// Feature dimension of flat profiles [file key: gen.features].
    #[arg(long)]
    features: Option<usize>,
    /// Emit 4×16×16 pseudo-images instead of flat vectors [file key: gen.pseudo_image].
    #[arg(long)]
    pseudo_image: Option<bool>,
    /// Scale of the additive per-well shift [file key: gen.batch_strength].
    #[arg(long)]
    batch_strength: Option<f64>,
}

/// Model and optimizer options shared by the training-style commands.
#[derive(Args)]
struct TrainOpts {
    /// Invariance weight α [file key: objective.alpha].
    #[arg(long)]
    alpha: Option<f32>,
    /// Softmax temperature τ [file key: objective.tau].
    #[arg(long)]
    tau: Option<f32>,
    /// Style supervision: `e` or `(y,e)` [file key: objective.zs_key].
    #[arg(long)]
    zs_key: Option<String>,
    /// Self-match convention: `mask_diagonal` or `appendix_verbatim`
    /// [file key: objective.diag_mode].
    #[arg(long)]
    diag_mode: Option<String>,
    /// Add the reconstruction term [file key: objective.recon].
    #[arg(long)]
    recon: Option<bool>,
    /// Content embedding width [file key: arch.d_zc].
    #[arg(long)]
    d_zc: Option<usize>,
    /// Style embedding width [file key: arch.d_zs].
    #[arg(long)]
    d_zs: Option<usize>,
    /// Drop the style block (ablation) [file key: arch.single_block].
    #[arg(long)]
    single_block: Option<bool>,
    /// Build a decoder even without --recon [file key: arch.with_decoder].
    #[arg(long)]
    with_decoder: Option<bool>,
    /// Batch spec: `balanced:KxM` or `shuffle:N` [file key: train.batch].
    #[arg(long)]
    batch: Option<String>,
    /// Optimizer steps [file key: train.max_steps].
    #[arg(long)]
    steps: Option<u64>,
    /// Validation cadence in steps [file key: train.eval_every].
    #[arg(long)]
    eval_every: Option<u64>,
    /// AdamW learning rate [file key: train.lr].
    #[arg(long)]
    lr: Option<f64>,
    /// AdamW weight decay [file key: train.weight_decay].
    #[arg(long)]
    wd: Option<f64>,
    /// Score validation with α forced to zero
    /// [file key: train.val_excludes_invariance].
    #[arg(long)]
    val_excludes_invariance: Option<bool>,
    /// Re-derive each step's encoder gradients on a second tape and require
    /// a bit-identical match [file key: train.paranoid_checks].
    #[arg(long)]
    paranoid: Option<bool>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Training container(s); repeat or comma-separate to concatenate
    /// [file key: data.train].
    #[arg(long, value_name = "FILE", value_delimiter = ',')]
    train: Vec<PathBuf>,
    /// Validation container [file key: data.val].
    #[arg(long, value_name = "FILE")]
    val: Option<PathBuf>,
    /// Resume from an earlier checkpoint.
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct SweepAlphaArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Training container(s) [file key: data.train].
    #[arg(long, value_name = "FILE", value_delimiter = ',')]
    train: Vec<PathBuf>,
    /// In-distribution validation container [file key: data.val].
    #[arg(long, value_name = "FILE")]
    val: Option<PathBuf>,
    /// Out-of-distribution test container [file key: data.test].
    #[arg(long, value_name = "FILE")]
    test: Option<PathBuf>,
    /// Comma-separated α grid [file key: sweep.alphas].
    #[arg(long)]
    alphas: Option<String>,
    /// Seeds per α, counted up from --seed [file key: sweep.seeds].
    #[arg(long)]
    seeds: Option<u64>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct ErmScanArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Training container(s) [file key: data.train].
    #[arg(long, value_name = "FILE", value_delimiter = ',')]
    train: Vec<PathBuf>,
    /// In-distribution validation container [file key: data.val].
    #[arg(long, value_name = "FILE")]
    val: Option<PathBuf>,
    /// Out-of-distribution test container [file key: data.test].
    #[arg(long, value_name = "FILE")]
    test: Option<PathBuf>,
    /// Comma-separated learning-rate grid [file key: scan.lrs].
    #[arg(long)]
    lrs: Option<String>,
    /// Comma-separated weight-decay grid [file key: scan.weight_decays].
    #[arg(long)]
    wds: Option<String>,
    /// Comma-separated epoch grid [file key: scan.epochs].
    #[arg(long)]
    epochs: Option<String>,
    /// Minibatch size [file key: scan.batch_size].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seeds per cell, counted up from --seed [file key: scan.seeds].
    #[arg(long)]
    seeds: Option<u64>,
}

#[derive(Args)]
struct BatchcorrArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Screen container with gene/guide/well columns [file key: data.screen].
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Complex assignment file, as written by gen-data ops-sim
    /// [file key: data.graph].
    #[arg(long, value_name = "FILE")]
    graph: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct SwapArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained checkpoint with a decoder [file key: swap.ckpt].
    #[arg(long, value_name = "FILE")]
    ckpt: Option<PathBuf>,
    /// Image container(s) to draw pairs from [file key: data.train].
    #[arg(long, value_name = "FILE", value_delimiter = ',')]
    data: Vec<PathBuf>,
    /// Cross-environment pairs to decode [file key: swap.pairs].
    #[arg(long)]
    pairs: Option<usize>,
}

/// Failures that reach `main`, each mapped to a stable exit code.
#[derive(Debug)]
enum CliError {
    /// Bad arguments, unusable config, or a missing/corrupt input file.
    Usage { cmd: &'static str, message: String },
    /// Training hit a non-finite forward pass.
    Diverged { step: u64 },
    /// Unexpected failure, e.g. an artifact could not be written.
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage { .. } => ExitCode::from(2),
            CliError::Diverged { .. } => ExitCode::from(3),
            CliError::Runtime(_) => ExitCode::FAILURE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage { cmd, message } => {
                write!(f, "error: {message}\n\nFor usage run: scbd {cmd} --help")
            }
            CliError::Diverged { step } => write!(
                f,
                "error: training diverged at step {step}; the last finite state was saved"
            ),
            CliError::Runtime(message) => write!(f, "error: {message}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            err.exit_code()
        }
    }
}
