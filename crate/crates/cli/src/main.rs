//! Batch command-line surface for the pooling / fusion / classification
//! pipeline.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "dynafuse",
    version,
    about = "Rank-pool slice stacks into dynamic feature images, fuse two imaging modalities, train shallow classifiers, ensemble them, and evaluate"
)]
struct Cli {
    /// Pipeline configuration file (TOML); command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pool ordered slice stacks into dynamic feature images
    Pool(PoolArgs),
    /// Partition a manifest into patient-disjoint train/test folds
    Prep(PrepArgs),
    /// Extract feature maps for every manifest record
    Extract(ExtractArgs),
    /// Train one classifier on a feature fold
    Train(TrainArgs),
    /// Score a fold with a trained classifier
    Predict(PredictArgs),
    /// Combine prediction files by weighted majority vote
    Ensemble(EnsembleArgs),
    /// Compute the evaluation metric suite for a prediction file
    Evaluate(EvaluateArgs),
    /// One-shot synthetic end-to-end run of the whole pipeline
    Demo(DemoArgs),
}

/// Which classifier a command addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum WhichClassifier {
    /// Single-modality classifier on still-image feature maps
    Dm,
    /// Single-modality classifier on pooled-stack feature maps
    Dbt,
    /// Dual-modality classifier on fused feature maps
    Dual,
}

#[derive(Args)]
struct PoolArgs {
    /// Slice-stack directories to pool (named by directory)
    volumes: Vec<PathBuf>,
    /// Pool every record of this manifest instead (named s0000, s0001, ...)
    #[arg(long, conflicts_with = "volumes")]
    manifest: Option<PathBuf>,
    /// Output directory for PNG images and JSON sidecars
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    /// "backtracking" or "fixed"
    #[arg(long)]
    step_rule: Option<String>,
    #[arg(long)]
    fixed_step: Option<f64>,
    /// Use the closed-form approximate pooling instead of the exact solver
    #[arg(long)]
    approx: bool,
    /// Worker threads; volumes are pooled independently
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct PrepArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Split seed; defaults to the config value
    #[arg(long)]
    seed: Option<u64>,
    /// Output JSON listing patient ids per fold
    #[arg(long)]
    out: PathBuf,
    /// Train parts of the ratio (default 4)
    #[arg(long)]
    train_ratio: Option<u32>,
    /// Test parts of the ratio (default 1)
    #[arg(long)]
    test_ratio: Option<u32>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of pooled dynamic feature images (from `pool --manifest`)
    #[arg(long, required_unless_present = "import_dir")]
    dfi_dir: Option<PathBuf>,
    /// Output feature directory (TNSR files plus index.csv)
    #[arg(long)]
    out: PathBuf,
    /// Seed for the built-in extractor weights
    #[arg(long)]
    extractor_seed: Option<u64>,
    /// Extractor stage widths, e.g. "8,16,32"
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    /// Square side images are resized to before extraction
    #[arg(long)]
    target: Option<usize>,
    /// Emit the 5 augmentation variants per record
    #[arg(long)]
    augment: bool,
    /// Skip the built-in extractor; import precomputed maps named
    /// s0000.dm.tnsr / s0000.dbt.tnsr from this directory
    #[arg(long)]
    import_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Feature directory written by `extract`
    #[arg(long)]
    features: PathBuf,
    /// Split JSON written by `prep`
    #[arg(long)]
    split: PathBuf,
    #[arg(long, value_enum)]
    classifier: WhichClassifier,
    /// Output weight-container directory (loss trace goes to
    /// <out>/loss.csv)
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Weight-container directory written by `train`
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, value_enum)]
    classifier: WhichClassifier,
    /// Which fold to score
    #[arg(long, default_value = "test")]
    fold: Fold,
    /// Output prediction CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Fold {
    Train,
    Test,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Prediction CSVs, one per classifier, same samples in the same order
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Voter weights (default uniform); normalized automatically
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Prediction CSV with labels
    #[arg(long)]
    predictions: PathBuf,
    /// Write the report as JSON here as well
    #[arg(long)]
    out: Option<PathBuf>,
    /// Row name in the printed table
    #[arg(long, default_value = "model")]
    name: String,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory for the four reports and prediction files
    #[arg(long)]
    out: PathBuf,
    /// Synthetic patient count (default 500)
    #[arg(long)]
    patients: Option<usize>,
    /// Training epochs per classifier (default 150)
    #[arg(long)]
    epochs: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    let result = (|| -> anyhow::Result<()> {
        let config = config::PipelineConfig::load(cli.config.as_deref())?;
        match cli.command {
            Command::Pool(args) => commands::pool(&config, args),
            Command::Prep(args) => commands::prep(&config, args),
            Command::Extract(args) => commands::extract(&config, args),
            Command::Train(args) => commands::train(&config, args),
            Command::Predict(args) => commands::predict(&config, args),
            Command::Ensemble(args) => commands::ensemble(&config, args),
            Command::Evaluate(args) => commands::evaluate(&config, args),
            Command::Demo(args) => commands::demo(&config, args),
        }
    })();
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
