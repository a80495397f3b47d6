use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};

mod commands;
mod config;
mod data;
mod manifest;

use config::{ModelArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "cuenmt", version, about = "Contextual NMT with a context encoder: data, training, evaluation and probes")]
pub struct Cli {
    /// JSON config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Fill the seconds column of metrics.csv (breaks byte-identical reruns).
    #[arg(long, global = true)]
    pub log_wall_time: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build documents, samples, splits and vocabularies from raw pairs.
    Prepare(PrepareArgs),
    /// Vectorize contexts into per-split embedding stores.
    Embed(EmbedArgs),
    Train(TrainCmd),
    /// Translate sentences with inline contexts.
    Translate(TranslateArgs),
    /// BLEU and marker accuracy of a checkpoint on a data split.
    Evaluate(EvaluateArgs),
    /// Train and score ablated variants.
    Ablate(AblateArgs),
    /// Generate the synthetic attribute-control task, optionally running the
    /// supervision ladder.
    ControlTask(ControlTaskArgs),
    /// Neighbor purity of context-encoder outputs.
    Probe(ProbeArgs),
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Pairs JSONL.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Metadata JSONL keyed by doc_key.
    #[arg(long)]
    pub meta: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Preceding sentences kept as document context.
    #[arg(long, default_value_t = cuenmt::corpus::MAX_DOC_CONTEXTS)]
    pub t: usize,
    /// Fraction of document keys held out for each of valid and test.
    #[arg(long, default_value_t = 0.1)]
    pub heldout_fraction: f64,
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
    #[arg(long)]
    pub max_vocab: Option<usize>,
    /// Leave the source sentence out of its own document contexts.
    #[arg(long)]
    pub exclude_current: bool,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// hash, discrete or precomputed; defaults to the data dir's vectorizer.
    #[arg(long)]
    pub backend: Option<String>,
    /// Embedding table for the precomputed backend.
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Add the source sentence as a context at distance 0; defaults to the
    /// data dir's setting.
    #[arg(long, conflicts_with = "exclude_current")]
    pub include_current: bool,
    #[arg(long)]
    pub exclude_current: bool,
    #[arg(long)]
    pub max_distance: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint dir whose source encoder and decoder initialize the model.
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    #[arg(long)]
    pub freeze_src_encoder: bool,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    /// Checkpoint dir.
    #[arg(long)]
    pub model: PathBuf,
    /// Source sentence; repeatable.
    #[arg(long, required_unless_present = "input")]
    pub src: Vec<String>,
    /// File with one source sentence per line.
    #[arg(long, conflicts_with = "src")]
    pub input: Option<PathBuf>,
    /// Metadata context; repeatable.
    #[arg(long)]
    pub meta: Vec<String>,
    /// Document context, nearest first; repeatable.
    #[arg(long)]
    pub doc: Vec<String>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated ablation flags, or "full".
    #[arg(long, required_unless_present = "table")]
    pub flags: Option<String>,
    /// Run the full setting and every single-flag ablation.
    #[arg(long, conflicts_with = "flags")]
    pub table: bool,
    /// Output dir; defaults to the data dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct ControlTaskArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// eamt (38 combinations) or formality (2 classes); defaults to the
    /// config file's control section.
    #[arg(long)]
    pub preset: Option<String>,
    /// Annotated training samples; "full" annotates all.
    #[arg(long)]
    pub supervision: Option<String>,
    /// Train every variant at every supervision level.
    #[arg(long)]
    pub ladder: bool,
    /// Comma-separated levels for --ladder.
    #[arg(long, requires = "ladder")]
    pub levels: Option<String>,
    /// Comma-separated variants for --ladder.
    #[arg(long, requires = "ladder", default_value = "mtcue,tagging")]
    pub variants: String,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Splits whose context strings are probed.
    #[arg(long, default_value = "test,zero_shot")]
    pub splits: String,
    #[arg(long, default_value_t = 400)]
    pub max_contexts: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn subcommand_help(argv: &[String]) -> Option<String> {
    let mut cmd = Cli::command();
    let name = argv.iter().skip(1).find(|a| cmd.find_subcommand(a.as_str()).is_some())?;
    let mut sub = cmd.find_subcommand_mut(name.as_str())?.clone().bin_name(format!("cuenmt {name}"));
    Some(sub.render_help().to_string())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            if let Some(help) = subcommand_help(&argv) {
                eprintln!("\n{help}");
            }
            return ExitCode::from(1);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
