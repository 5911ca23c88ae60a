//! `einspace`: command-line workbench for the architecture grammar.
//!
//! Exit codes: 0 success, 1 usage error (nothing written), 2 runtime failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "einspace", version, about = "Sample, mutate, evaluate and search architectures from a parameterised grammar")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Grammar selection shared by most verbs.
#[derive(Args, Debug, Clone)]
pub struct GrammarArgs {
    /// Grammar variant: 2d (images) or 1d (sequences). Defaults to 2d for image inputs, 1d for sequences.
    #[arg(long)]
    pub variant: Option<String>,
    /// Stop probability p(M -> C).
    #[arg(long = "p", default_value_t = 0.32)]
    pub stop_probability: f64,
}

/// Network input and head.
#[derive(Args, Debug, Clone)]
pub struct BlueprintArgs {
    /// Input state, `im:C,H,W` or `col:S,D`. Defaults to the task input when --task is given, else im:3,32,32.
    #[arg(long)]
    pub input: Option<String>,
    /// Classification head with this many classes (default 10).
    #[arg(long, conflicts_with = "dense")]
    pub classes: Option<usize>,
    /// Dense head `C,H,W` instead of classification.
    #[arg(long)]
    pub dense: Option<String>,
    /// Take input and head from a built-in task (im-patterns, col-motifs, 1d-waves).
    #[arg(long, conflicts_with_all = ["input", "classes", "dense"])]
    pub task: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Branching rate, criticality and expected string length of a grammar.
    Analyze {
        #[command(flatten)]
        grammar: GrammarArgs,
        /// Also write the grammar's rule table as JSON.
        #[arg(long)]
        grammar_json: Option<PathBuf>,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Draw random architectures.
    Sample {
        #[command(flatten)]
        grammar: GrammarArgs,
        #[command(flatten)]
        blueprint: BlueprintArgs,
        /// Sampling seed; architecture i uses stream i of it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of architectures; more than one is written as JSON lines.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Output file (tree JSON, or JSON lines when --count > 1).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Mutate an architecture by resampling one subtree.
    Mutate {
        /// Tree JSON file.
        tree: PathBuf,
        #[command(flatten)]
        grammar: GrammarArgs,
        /// Mutation seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Resample this node instead of a uniformly chosen one.
        #[arg(long)]
        node: Option<usize>,
        /// Write the child tree here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Run a search from a TOML config.
    Search {
        /// Search configuration (TOML).
        config: PathBuf,
        /// Output directory (overrides the config and EINSPACE_OUT_DIR).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Worker threads (overrides the config and EINSPACE_WORKERS; 0 = all cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Stop after this many steps (a checkpoint is written); resume later with --resume.
        #[arg(long)]
        stop_after: Option<u64>,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Score one architecture with an evaluator.
    Eval {
        /// Tree JSON file.
        tree: PathBuf,
        #[command(flatten)]
        grammar: GrammarArgs,
        /// validity, param-surrogate or toy-train.
        #[arg(long, default_value = "toy-train")]
        evaluator: String,
        /// Task for toy-train (default: the one matching the tree's input).
        #[arg(long)]
        task: Option<String>,
        /// Training epochs for toy-train.
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        /// Seed of the synthetic dataset.
        #[arg(long, default_value_t = 0)]
        task_seed: u64,
        /// Evaluator seed (weight init and batch order).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// List, show or export the built-in seed architectures.
    Seeds {
        #[command(subcommand)]
        action: SeedsAction,
    },
    /// Complexity statistics of sampled architectures.
    Stats {
        #[command(flatten)]
        grammar: GrammarArgs,
        #[command(flatten)]
        blueprint: BlueprintArgs,
        /// Number of architectures to sample.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Sampling seed; architecture i uses stream i of it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for stats.csv and histogram.csv.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Also write histogram.svg (needs --out-dir).
        #[arg(long, requires = "out_dir")]
        plot: bool,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Count architecture strings by length.
    Count {
        #[command(flatten)]
        grammar: GrammarArgs,
        /// Count the one-bracket Dyck skeleton instead of the grammar.
        #[arg(long)]
        dyck: bool,
        /// Largest string length.
        #[arg(long, default_value_t = 10)]
        max_len: usize,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand, Debug)]
enum SeedsAction {
    /// Names, default inputs and parameter counts.
    List {
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Leaf string of one seed.
    Show {
        /// Seed name, as printed by `seeds list`.
        name: String,
        #[command(flatten)]
        blueprint: BlueprintArgs,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Write one seed as tree JSON.
    Export {
        /// Seed name, as printed by `seeds list`.
        name: String,
        #[command(flatten)]
        blueprint: BlueprintArgs,
        /// Output file (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
