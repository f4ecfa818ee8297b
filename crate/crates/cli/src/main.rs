use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "cadunet", version, about = "Capsule-attention U-Net for lung infection segmentation")]
struct Cli {
    /// Seed for every random choice the command makes (overrides config files).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic CT-like dataset with a JSON manifest.
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus the run record.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset; writes metrics CSV and overlays.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Score one predicted mask against a ground-truth mask.
    Metrics(MetricsArgs),
    /// Exact Wilcoxon rank-sum test between two runs' per-slice scores.
    Compare(CompareArgs),
    /// Grade every slice of a dataset by infection severity.
    Severity(SeverityArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of slices to generate.
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    /// Generator settings as JSON; unspecified fields keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Fraction of slices held out into `val.json`.
    #[arg(long, default_value_t = 0.0)]
    pub val_fraction: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Manifest of training slices.
    #[arg(long)]
    pub train: PathBuf,
    /// Manifest of validation slices; selects the `best/` checkpoint.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Run directory for checkpoints and records.
    #[arg(long)]
    pub out: PathBuf,
    /// Training configuration as JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Constant learning rate instead of the step-decay schedule.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Stop once validation F1 reaches this percentage.
    #[arg(long)]
    pub target_f1: Option<f64>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// 1 for infection vs background, 2 for ground-glass and consolidation.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,
    /// Drop non-infected training slices until they are at most 30% of the set.
    #[arg(long)]
    pub undersample: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory (for example `run/best`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest of slices to score.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for `metrics.csv` and `overlays/`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = cadunet::eval::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Fail unless the checkpoint predicts this many classes.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Run name written into the CSV; defaults to the checkpoint path.
    #[arg(long)]
    pub run: Option<String>,
    #[arg(long)]
    pub no_overlays: bool,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("which").required(true).args(["all", "op", "list"])))]
pub struct GradcheckArgs {
    /// Check every registered op and block.
    #[arg(long)]
    pub all: bool,
    /// Check a single registered op by name.
    #[arg(long)]
    pub op: Option<String>,
    /// Print the registered names and exit.
    #[arg(long)]
    pub list: bool,
    /// Number of consecutive seeds, starting at --seed (default 0).
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Predicted mask (8-bit PNG).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth mask (8-bit PNG).
    #[arg(long)]
    pub gt: PathBuf,
    /// With 2, pixel values 1 and 2 are scored as separate classes; with 1
    /// every non-zero pixel is positive.
    #[arg(long, default_value_t = 1)]
    pub classes: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AlternativeArg {
    TwoSided,
    Less,
    Greater,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// CSV with one row per slice (for example from `eval`).
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Column to compare.
    #[arg(long, default_value = "f1")]
    pub metric: String,
    /// Only rows whose `class` column equals this.
    #[arg(long)]
    pub class: Option<String>,
    #[arg(long, value_enum, default_value_t = AlternativeArg::TwoSided)]
    pub alternative: AlternativeArg,
}

#[derive(Args, Debug)]
pub struct SeverityArgs {
    /// Manifest of slices with lung masks.
    #[arg(long)]
    pub data: PathBuf,
    /// Optional CSV of per-slice grades.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a, cli.seed),
        Command::Train(a) => commands::train(&a, cli.seed),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a, cli.seed),
        Command::Metrics(a) => commands::metrics(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::Severity(a) => commands::severity(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
