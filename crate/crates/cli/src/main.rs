mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use config::Usage;

#[derive(Parser)]
#[command(name = "protorefine", version, about = "Prototype-guided refinement of 1-D patterns")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate ideal and corrupted datasets with ground-truth pairing.
    GenData(Run<GenDataOpts>),
    /// Train the prototypical classifier on ideal data.
    TrainClassifier(Run<TrainClassifierOpts>),
    /// Train a refiner against a frozen classifier.
    TrainRefiner(Run<TrainRefinerOpts>),
    /// Score raw (and optionally refined) patterns.
    Evaluate(Run<EvaluateOpts>),
    /// Train the three loss-term ablation refiners and compare them.
    Ablate(Run<AblateOpts>),
    /// Write refined patterns and a side-by-side dump.
    Refine(Run<RefineOpts>),
    /// Write a 2-D PCA projection of classifier embeddings.
    ExportEmbeddings(Run<ExportOpts>),
}

#[derive(Args)]
struct Run<T: Args> {
    /// File of `key = value` lines; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    opts: T,
}

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataOpts {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub per_class_ideal: Option<usize>,
    #[arg(long)]
    pub per_class_imperfect: Option<usize>,
    /// Relative jitter of peak heights in ideal samples.
    #[arg(long)]
    pub height_jitter: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub drift: Option<f64>,
    #[arg(long)]
    pub shift: Option<f64>,
    #[arg(long)]
    pub split_prob: Option<f64>,
    #[arg(long)]
    pub amp_jitter: Option<f64>,
    /// Share of imperfect patterns that go to the training split.
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(default, deny_unknown_fields)]
pub struct TrainClassifierOpts {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Balanced batches per epoch.
    #[arg(long)]
    pub batches: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Samples drawn from each class per batch.
    #[arg(long)]
    pub nc: Option<usize>,
    /// adam | rmsprop
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Share of the ideal data held out for accuracy checks (0 disables).
    #[arg(long)]
    pub holdout: Option<f64>,
    /// Write an intermediate checkpoint every this many epochs (0 disables).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRefinerOpts {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// targeted | non-targeted
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Order of the edit penalty norm (1 or 2).
    #[arg(long)]
    pub p_norm: Option<u32>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateOpts {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refiner: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(default, deny_unknown_fields)]
pub struct AblateOpts {
    /// Imperfect training data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Imperfect test data; without it the training data is split in half.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub p_norm: Option<u32>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of consecutive seeds starting at --seed.
    #[arg(long)]
    pub seeds: Option<u64>,
}

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(default, deny_unknown_fields)]
pub struct RefineOpts {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub refiner: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(default, deny_unknown_fields)]
pub struct ExportOpts {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(r) => commands::gen_data(r.opts, r.config.as_deref()),
        Command::TrainClassifier(r) => commands::train_classifier(r.opts, r.config.as_deref()),
        Command::TrainRefiner(r) => commands::train_refiner(r.opts, r.config.as_deref()),
        Command::Evaluate(r) => commands::evaluate(r.opts, r.config.as_deref()),
        Command::Ablate(r) => commands::ablate(r.opts, r.config.as_deref()),
        Command::Refine(r) => commands::refine(r.opts, r.config.as_deref()),
        Command::ExportEmbeddings(r) => commands::export_embeddings(r.opts, r.config.as_deref()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<protorefine::Error>() {
        Some(
            protorefine::Error::Config(_)
            | protorefine::Error::MissingLabels
            | protorefine::Error::InvalidLabel { .. },
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
