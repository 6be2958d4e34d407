mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ssoc", version, about = "Open-world semi-supervised classification with cross-attention class centers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Gaussian mixture as an embedding file plus label sidecar.
    GenSynth(GenSynthArgs),
    /// Split a labeled embedding file into the open-world layout.
    Split(SplitArgs),
    /// Train on a labeled and an unlabeled embedding file.
    Train(TrainArgs),
    /// Score a checkpoint against ground-truth labels.
    Eval(EvalArgs),
    /// Finite-difference check of the training gradients.
    GradCheck(GradCheckArgs),
    /// Train one run per threshold or loss-weight setting.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    /// Minimum center distance in units of the within-class deviation.
    #[arg(long, default_value_t = 8.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    std: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SplitArgs {
    /// Embedding file whose `.lab` sidecar holds every row's class.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    label_ratio: f64,
    #[arg(long, default_value_t = 0.5)]
    novel_ratio: f64,
    /// Shuffle class ids before choosing which classes are novel.
    #[arg(long)]
    shuffle_classes: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    labeled: PathBuf,
    #[arg(long)]
    unlabeled: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    novel_classes: Option<usize>,
    /// Override one config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Alignment {
    Any,
    NovelOnly,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Embeddings to classify.
    #[arg(long)]
    unlabeled: PathBuf,
    /// Ground-truth labels of those rows.
    #[arg(long)]
    sidecar: PathBuf,
    /// Directory for eval.csv and predictions.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Alignment::Any)]
    novel_alignment: Alignment,
    /// Accepted for uniformity; evaluation is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Tau1,
    Weights,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    sidecar: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    kind: SweepKind,
    /// Comma-separated thresholds for a tau1 sweep.
    #[arg(long, default_value = "0.4,0.5,0.6,0.7,0.8,0.9")]
    taus: String,
    /// Weight grid such as `alpha=0.5,1;beta=0,0.5,1`; unnamed weights keep
    /// their config value.
    #[arg(long, default_value = "alpha=0.5,1;beta=0,0.5,1;gamma=1;delta=0.5,1")]
    grid: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = commands::threads().and_then(|threads| {
        ssoc_core::parallel::with_threads(threads, || match cli.command {
            Command::GenSynth(a) => commands::gen_synth(a),
            Command::Split(a) => commands::split(a),
            Command::Train(a) => commands::train(a),
            Command::Eval(a) => commands::eval(a),
            Command::GradCheck(a) => commands::grad_check(a),
            Command::Sweep(a) => commands::sweep(a),
        })
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
