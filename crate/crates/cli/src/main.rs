//! `varnn`: train, evaluate and run recurrent slot-filling taggers.
//!
//! Exit codes: 0 ok, 2 I/O or usage, 3 numeric failure, 4 schema mismatch,
//! 5 gradient check failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use varnn::cells::CellKind;
use varnn::network::{Direction, Regime};

#[derive(Parser, Debug)]
#[command(
    name = "varnn",
    version,
    about = "Recurrent slot-filling taggers with variational dropout"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one or more seeded runs and write a checkpoint per run.
    Train(Box<TrainArgs>),
    /// Score a checkpoint on a labelled CoNLL file.
    Eval(EvalArgs),
    /// Tag whitespace-tokenized sentences, one per line.
    Tag(TagArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Write the bundled synthetic train/val/test corpora.
    Synth(SynthArgs),
}

/// Hyperparameters settable from the command line or a JSON config file.
/// Flags override the file.
#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Hyper {
    /// vanilla | lstm | gru [default: gru]
    #[arg(long)]
    pub cell: Option<CellKind>,
    /// uni | bi [default: bi]
    #[arg(long)]
    pub direction: Option<Direction>,
    /// none | naive | variational [default: variational]
    #[arg(long)]
    pub regime: Option<Regime>,
    /// Drop probability of every mask [default: 0.5]
    #[arg(long)]
    pub p: Option<f64>,
    /// [default: 100]
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// [default: 100]
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Decoder rows [default: number of labels in the training data]
    #[arg(long)]
    pub label_count: Option<usize>,
    /// Also mask the GRU candidate's hidden path
    #[arg(long)]
    pub mask_gru_candidate_hidden: bool,
    /// [default: 0.1]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Squared-weight penalty coefficient [default: 1e-5]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Global-norm clipping threshold, 0 disables [default: 5]
    #[arg(long)]
    pub clip: Option<f64>,
    /// [default: 50]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Epochs without validation improvement before stopping [default: 5]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Words seen fewer times map to <unk> [default: 1]
    #[arg(long)]
    pub min_count: Option<usize>,
    /// Lowercase words before lookup
    #[arg(long)]
    pub lowercase: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training data (CoNLL: word and label per line, blank line between sentences)
    #[arg(long)]
    pub train: PathBuf,
    /// Validation data; without it a fraction of --train is held out
    #[arg(long, conflicts_with = "split")]
    pub val: Option<PathBuf>,
    /// Fraction of --train kept for training when --val is absent
    #[arg(long)]
    pub split: Option<f64>,
    /// Optional test data, scored after each run
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Output directory for checkpoints, histories and the summary
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// JSON file with hyperparameters (keys as the long flags)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Independent runs with seeds seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    #[command(flatten)]
    pub hyper: Hyper,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
}

#[derive(Args, Debug)]
pub struct TagArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Input text; standard input when absent
    #[arg(long)]
    pub input: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Restrict to one cell kind
    #[arg(long)]
    pub cell: Option<CellKind>,
    /// Restrict to one direction
    #[arg(long)]
    pub direction: Option<Direction>,
    /// Restrict to one regime
    #[arg(long)]
    pub regime: Option<Regime>,
    #[arg(long, default_value_t = 0.5)]
    pub p: f64,
    #[arg(long, default_value_t = 4)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 5)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 5)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 3)]
    pub label_count: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Directory receiving train.conll, val.conll and test.conll
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    #[arg(long, default_value_t = 500)]
    pub val: usize,
    #[arg(long, default_value_t = 500)]
    pub test: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Chance of a filler word before each token
    #[arg(long, default_value_t = 0.1)]
    pub filler_rate: f64,
    /// Chance per training sentence of swapped dept/arr labels
    #[arg(long, default_value_t = 0.1)]
    pub swap_rate: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(*a),
        Command::Eval(a) => commands::eval(a),
        Command::Tag(a) => commands::tag(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
