mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::Profile;

/// Patch-based multimodal transformer pretraining, evaluation and
/// benchmarking on a synthetic product corpus.
#[derive(Parser, Debug)]
#[command(name = "patchbert", version)]
pub struct Cli {
    /// Flat `key = value` settings file (flags override it).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Default scale preset.
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic product corpus into --out.
    GenData {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Build a vocabulary from a corpus's training descriptions.
    BuildVocab {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        max_size: Option<usize>,
    },
    /// Pretrain on MLM, MPM and alignment; writes a checkpoint and logs.
    Pretrain {
        #[command(flatten)]
        inputs: CorpusInputs,
        #[arg(long, value_parser = ["adaptive", "fixed"])]
        weighting: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Matching accuracy and Rank@K in both directions.
    Eval {
        #[command(flatten)]
        inputs: CorpusInputs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        distractors: Option<usize>,
    },
    /// Padded vs variable-length scoring latency.
    BenchVsl {
        #[command(flatten)]
        inputs: CorpusInputs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Worker threads; timings above 1 depend on machine load.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Closed-form loss weights for signals in [0, 1).
    SolveWeights {
        #[arg(required = true, allow_negative_numbers = true)]
        signals: Vec<f64>,
        /// Also run the iterative QP solver and compare.
        #[arg(long)]
        verify: bool,
    },
}

#[derive(Args, Debug, Clone)]
pub struct CorpusInputs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let rendered = e.render().to_string();
            eprintln!("{}", rendered.lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::from(2);
        }
        Err(e) => e.exit(),
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
