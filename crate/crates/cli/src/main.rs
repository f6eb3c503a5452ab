//! `corrdistill` command-line entry point.

mod commands;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};
use corrdistill::presets::PRESET_NAMES;
use corrdistill::{ProbeSettings, RepresentationKind, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "corrdistill", version, about = "Distill patch features with a correlation loss and evaluate representations with cluster and linear probes")]
struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Named configuration supplying defaults; individual flags override it.
    #[arg(long, global = true, default_value = "cocostuff", ignore_case = true,
          value_parser = PossibleValuesParser::new(PRESET_NAMES))]
    preset: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic feature/label dataset and its manifest.
    Synth(SynthArgs),
    /// Validate feature and label files and write a manifest.
    Ingest(IngestArgs),
    /// Build the nearest-neighbour table over the train split.
    Knn(KnnArgs),
    /// Train a segmentation head with the correlation loss.
    TrainHead(TrainHeadArgs),
    /// Fit PCA on train-split tokens.
    FitPca(FitPcaArgs),
    /// Draw an orthonormal random projection.
    FitRp(FitRpArgs),
    /// Fit and score both probes on one representation.
    Eval(EvalArgs),
    /// Evaluate a representation across dimensions and seeds.
    Sweep(SweepArgs),
    /// Merge metric CSVs and plot them.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory; receives features/, labels/ and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 160)]
    n_train: usize,
    #[arg(long, default_value_t = 40)]
    n_val: usize,
    #[arg(long, default_value_t = 28)]
    height: usize,
    #[arg(long, default_value_t = 28)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    /// Expected norm of each token's noise vector.
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Expected norm of the offset shared by all tokens of an image.
    #[arg(long, default_value_t = 0.0)]
    image_noise: f64,
    #[arg(long, default_value_t = 3)]
    min_regions: usize,
    #[arg(long, default_value_t = 6)]
    max_regions: usize,
    /// Label grid resolution relative to the token grid.
    #[arg(long, default_value_t = 1)]
    label_factor: usize,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Directory of train-split `.cdfm` feature files.
    #[arg(long)]
    features: PathBuf,
    /// Directory of `.cdlm` label files named like the train features.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    val_features: Option<PathBuf>,
    #[arg(long)]
    val_labels: Option<PathBuf>,
    /// Reject labels outside `0..classes` (255 is always allowed).
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct KnnArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = corrdistill::feature_store::DEFAULT_KNN)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Overrides for the preset's head training settings.
#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Head learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lambda_self: Option<f64>,
    #[arg(long)]
    lambda_knn: Option<f64>,
    #[arg(long)]
    lambda_rand: Option<f64>,
    #[arg(long)]
    b_self: Option<f64>,
    #[arg(long)]
    b_knn: Option<f64>,
    #[arg(long)]
    b_rand: Option<f64>,
    #[arg(long)]
    zero_clamp: Option<bool>,
    #[arg(long)]
    pointwise: Option<bool>,
    #[arg(long)]
    feature_samples: Option<usize>,
    #[arg(long)]
    negative_samples: Option<usize>,
}

impl TrainArgs {
    fn apply(&self, c: &mut TrainConfig) {
        set(&mut c.steps, self.steps);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.head_lr, self.lr);
        set(&mut c.dropout, self.dropout);
        set(&mut c.pair.lambda_self, self.lambda_self);
        set(&mut c.pair.lambda_knn, self.lambda_knn);
        set(&mut c.pair.lambda_rand, self.lambda_rand);
        set(&mut c.pair.b_self, self.b_self);
        set(&mut c.pair.b_knn, self.b_knn);
        set(&mut c.pair.b_rand, self.b_rand);
        set(&mut c.pair.zero_clamp, self.zero_clamp);
        set(&mut c.pair.pointwise_center, self.pointwise);
        set(&mut c.pair.feature_samples, self.feature_samples);
        set(&mut c.pair.negative_samples, self.negative_samples);
    }
}

/// Overrides for the probe settings.
#[derive(Args, Debug, Default)]
struct ProbeArgs {
    /// Number of classes; defaults to the preset's.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    kmeans_minibatch: Option<usize>,
    #[arg(long)]
    kmeans_steps: Option<usize>,
    #[arg(long)]
    kmeans_restarts: Option<usize>,
    #[arg(long)]
    linear_lr: Option<f64>,
    #[arg(long)]
    linear_steps: Option<usize>,
    #[arg(long)]
    linear_batch: Option<usize>,
    /// Upsample validation features when labels are this much finer (1: never).
    #[arg(long)]
    upsample_factor: Option<usize>,
}

impl ProbeArgs {
    fn apply(&self, s: &mut ProbeSettings) {
        set(&mut s.n_classes, self.classes);
        set(&mut s.kmeans_minibatch, self.kmeans_minibatch);
        set(&mut s.kmeans_steps, self.kmeans_steps);
        set(&mut s.kmeans_restarts, self.kmeans_restarts);
        set(&mut s.linear_lr, self.linear_lr);
        set(&mut s.linear_steps, self.linear_steps);
        set(&mut s.linear_batch, self.linear_batch);
        set(&mut s.upsample_factor, self.upsample_factor);
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

#[derive(Args, Debug)]
struct TrainHeadArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Neighbour table from `knn`; built from the train split when absent.
    #[arg(long)]
    knn: Option<PathBuf>,
    /// Output dimension; defaults to the preset's.
    #[arg(long)]
    dim: Option<usize>,
    /// Score the head on the val split every this many steps and keep the
    /// best checkpoint (0: keep the final head).
    #[arg(long, default_value_t = 0)]
    selection_interval: usize,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    probes: ProbeArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitPcaArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = corrdistill::dimred::PCA_MAX_IMAGES)]
    max_images: usize,
    #[arg(long, default_value_t = corrdistill::dimred::PCA_MAX_TOKENS)]
    max_tokens: usize,
    /// Also write the full explained-variance curve here.
    #[arg(long)]
    variance_csv: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitRpArgs {
    #[arg(long)]
    dim: usize,
    /// Input dimension; read from the manifest's first feature file if absent.
    #[arg(long, required_unless_present = "manifest")]
    input_dim: Option<usize>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "raw")]
    rep: RepresentationKind,
    /// Head, PCA or RP checkpoint for non-raw representations.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    probes: ProbeArgs,
    /// Directory for the fitted cluster and linear probes.
    #[arg(long)]
    probes_dir: Option<PathBuf>,
    /// Metrics CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Experiment JSON; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rep: Option<RepresentationKind>,
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    /// Seeds to run; defaults to `--seed`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    knn: Option<PathBuf>,
    #[arg(long)]
    selection_interval: Option<usize>,
    #[arg(long)]
    pca_max_images: Option<usize>,
    #[arg(long)]
    pca_max_tokens: Option<usize>,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    probes: ProbeArgs,
    /// Directory for per-entry checkpoints.
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Metrics CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Metric CSVs to merge.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Explained-variance CSVs from `fit-pca`.
    #[arg(long, num_args = 1..)]
    variance: Vec<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Failure classes that map to distinct exit codes.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(corrdistill::Error),
}

impl From<corrdistill::Error> for CliError {
    fn from(e: corrdistill::Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CORRDISTILL_LOG", "info"))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
