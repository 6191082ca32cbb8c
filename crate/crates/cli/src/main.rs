//! `tup`: train classifiers, compute targeted universal perturbations, run
//! region adversarial training and evaluate attacks from the command line.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgAction, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tupcore::Dtype;

#[derive(Debug, Parser)]
#[command(name = "tup", version, about = "Targeted universal adversarial perturbations and region adversarial training")]
pub struct Cli {
    /// JSON config file. Top-level `seed`, `precision` and `data_dir`, plus one
    /// object per subcommand; flags override file values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub precision: Option<Dtype>,
    /// Dataset root holding `mnist/` and `cifar-10-batches-bin/`.
    /// Defaults to $TUP_DATA_DIR, then `./data`.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a classifier from scratch.
    Train(TrainArgs),
    /// Run a per-sample or universal untargeted attack.
    Attack(AttackArgs),
    /// Compute a targeted universal perturbation.
    Tup(TupArgs),
    /// Region adversarial training against one target class.
    Rat(RatArgs),
    /// Evaluate a model under attacks and write a report.
    Eval(EvalArgs),
    /// Sweep `k`, `eta` or the size of X and write a report.
    Sweep(SweepArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Attack(_) => "attack",
            Command::Tup(_) => "tup",
            Command::Rat(_) => "rat",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainArgs {
    /// mnist, cifar10 or synthetic.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Architecture: linear, mlp or cnn.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// adam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Train on the first N training images only.
    #[arg(long)]
    pub subset: Option<usize>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackArgs {
    /// fgsm, pgd, minimal or uni.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// L∞ budget (upper bound for `minimal`, η for `uni`).
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Target class for `minimal`; defaults to `(y + 1) mod K`.
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long)]
    pub dataset: Option<String>,
    /// train or test.
    #[arg(long)]
    pub split: Option<String>,
    /// Number of images attacked (or used to build `uni`).
    #[arg(long)]
    pub count: Option<usize>,
    /// Fooling-rate tolerance for `uni`.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Perturbation array path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct TupArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Projection interval; defaults to |X|.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub x_size: Option<usize>,
    #[arg(long)]
    pub max_passes: Option<usize>,
    /// Budget of the per-point minimal solver.
    #[arg(long)]
    pub solver_eps: Option<f64>,
    #[arg(long)]
    pub dataset: Option<String>,
    /// X is drawn from the first N training images.
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct RatArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Precomputed TUP; computed on the fly when omitted.
    #[arg(long)]
    pub tup: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long)]
    pub tup_subset: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    /// Split evaluated: test or train.
    #[arg(long)]
    pub testset: Option<String>,
    /// Evaluate the first N images only.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Comma-separated: identity, tup, uni, fgsm, pgd, minimal.
    #[arg(long, value_delimiter = ',')]
    pub attacks: Option<Vec<String>>,
    /// TUP files (repeatable).
    #[arg(long)]
    pub tup: Option<Vec<PathBuf>>,
    /// Untargeted universal perturbation file.
    #[arg(long)]
    pub uni: Option<PathBuf>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Source–target heatmaps with N images per pair.
    #[arg(long)]
    pub heatmap: Option<usize>,
    /// Edge cosine similarity over N images of each TUP's target class.
    #[arg(long)]
    pub edges: Option<usize>,
    /// Further models the TUPs are transferred to (repeatable).
    #[arg(long)]
    pub transfer_to: Option<Vec<PathBuf>>,
    /// Output directory.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// json or csv.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub experiment: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepArgs {
    /// k, eta or xsize.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Target for k and eta sweeps; xsize draws random targets.
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub x_size: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long)]
    pub val_size: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub experiment: Option<String>,
}

fn exit_code(category: &str) -> u8 {
    match category {
        "usage" => 2,
        "artifact-not-found" => 3,
        "format" => 4,
        "config" => 5,
        "training-diverged" => 6,
        "precondition" | "infeasible" | "budget-exceeded" => 7,
        _ => 1,
    }
}

fn fail(category: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": { "category": category, "message": message } }));
    ExitCode::from(exit_code(category))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let _ = e.print();
            return fail("usage", e.kind().as_str().unwrap_or("invalid arguments"));
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(summary) => {
            // A closed pipe downstream is not a failure of the run.
            let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.category(), &e.to_string()),
    }
}
