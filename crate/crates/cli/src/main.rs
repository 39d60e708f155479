//! `lchd`: synthesize, train, evaluate, score and benchmark the long-context
//! hallucination detector.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};


#[derive(Parser, Debug)]
#[command(name = "lchd", version, about = "Long-context hallucination detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Inject hallucinations into document/summary pairs.
    Synth(SynthArgs),
    /// Train a detector and write the best checkpoint.
    Train(TrainArgs),
    /// Compute a metrics report for a labeled dataset.
    Eval(EvalArgs),
    /// Score one context/response pair or a dataset.
    Score(ScoreArgs),
    /// Measure inference throughput in samples per second.
    Bench(BenchArgs),
    /// Run the prompted LLM judge baseline.
    Judge(JudgeArgs),
    /// Compare perplexity of original and injected summaries.
    Verify(VerifyArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum InjectorArg {
    Rule,
    Llm,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// JSONL of {id, context, reference}.
    #[arg(long, conflicts_with = "toy_corpus", required_unless_present = "toy_corpus")]
    pairs: Option<PathBuf>,
    /// Generate N toy pairs instead of reading --pairs.
    #[arg(long, value_name = "N")]
    toy_corpus: Option<usize>,
    /// Approximate context length of toy pairs, in tokens.
    #[arg(long, default_value_t = 2000, requires = "toy_corpus")]
    context_tokens: usize,
    #[arg(long)]
    out: PathBuf,
    /// Corruption probability.
    #[arg(long, default_value_t = 0.5)]
    p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = InjectorArg::Rule)]
    injector: InjectorArg,
    /// Client config JSON, required for the llm injector.
    #[arg(long, required_if_eq("injector", "llm"))]
    client_config: Option<PathBuf>,
    /// Also write train/dev/test splits (5653:854:950) to this directory.
    #[arg(long)]
    split_dir: Option<PathBuf>,
    /// Write the statistics JSON here as well as to stdout.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Labeled JSONL training data.
    #[arg(long)]
    data: PathBuf,
    /// Dev data; defaults to a seeded hold-out of --data.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Training config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Write the ROC curve as CSV.
    #[arg(long)]
    roc_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    batch: usize,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Plain-text context file.
    #[arg(long, requires = "response", required_unless_present = "data")]
    context: Option<PathBuf>,
    /// Plain-text response file.
    #[arg(long, requires = "context")]
    response: Option<PathBuf>,
    /// Score every example of a JSONL dataset instead.
    #[arg(long, conflicts_with_all = ["context", "response", "dump_attention"])]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Emit the predicted-hallucinated set at thresholds 0.05, 0.10, …, 0.95.
    #[arg(long)]
    sweep: bool,
    /// Write the head-averaged chunk attention matrix as JSON.
    #[arg(long)]
    dump_attention: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct JudgeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    client_config: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Per-example verdicts as JSONL.
    #[arg(long)]
    verdicts: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// JSONL of {id, context, reference}; the contexts train the n-gram model.
    #[arg(long)]
    originals: PathBuf,
    /// Labeled JSONL; hallucinated responses form the injected group.
    #[arg(long)]
    injected: PathBuf,
    #[arg(long, default_value_t = 3)]
    order: usize,
    #[arg(long, default_value_t = 0.01)]
    k: f64,
    #[arg(long)]
    report: Option<PathBuf>,
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
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Score(a) => commands::score(a),
        Command::Bench(a) => commands::bench(a),
        Command::Judge(a) => commands::judge(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::error!("{f}");
            ExitCode::from(f.code())
        }
    }
}
