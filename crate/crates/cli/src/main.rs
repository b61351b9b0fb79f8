//! `looptune` command-line tool.

mod commands;
mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Misuse of the command line or configuration.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A broken internal guarantee.
#[derive(Debug)]
pub struct InvariantError(pub String);

impl fmt::Display for InvariantError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvariantError {}

#[derive(Parser, Debug)]
#[command(name = "looptune", version, about = "Predict and rank speedups of C loop transformations")]
struct Cli {
    #[command(flatten)]
    settings: Settings,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by all subcommands; each also reads from `--config`.
#[derive(Args, Debug, Default)]
struct Settings {
    /// Flat `key = value` config file; command-line flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Token encoding: fixed, basic, type_based, renaming, complex or fasttext [default: fasttext]
    #[arg(long, global = true)]
    method: Option<String>,
    /// Number of one-hot tokens for the fixed encoding [default: 1000]
    #[arg(long, global = true)]
    n: Option<String>,
    /// Identifier slots for the renaming encoding [default: 40]
    #[arg(long, global = true)]
    m: Option<String>,
    /// Identifier coverage percentage for the complex encoding [default: 80]
    #[arg(long, global = true)]
    c: Option<String>,
    /// Transformation encoding: compact or onehot [default: compact]
    #[arg(long, global = true)]
    transform: Option<String>,
    /// Vocabulary size of the one-hot transformation encoding [default: 50]
    #[arg(long, global = true)]
    onehot_size: Option<String>,
    /// Speedup threshold t in [1, 2) [default: 1.0]
    #[arg(long, global = true)]
    threshold: Option<String>,
    /// Number of ranked transformations to report or measure [default: 3]
    #[arg(long, global = true)]
    top_k: Option<String>,
    /// Compiler command with {flags}, {src} and {out} placeholders [default: "gcc {flags} {src} -o {out} -lm"]
    #[arg(long, global = true)]
    compiler: Option<String>,
    /// Compiler flags [default: -O3]
    #[arg(long, global = true, allow_hyphen_values = true)]
    flags: Option<String>,
    /// Timed runs per program after one warm-up run [default: 5]
    #[arg(long, global = true)]
    reps: Option<String>,
    /// Accepted |1 - s| when timing a loop against itself [default: 0.1]
    #[arg(long, global = true)]
    noise_bound: Option<String>,
    /// Seed for the split, initialization and shuffling [default: 42]
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Comma-separated tile sizes [default: 8,16,32]
    #[arg(long, global = true)]
    tile_sizes: Option<String>,
    /// Longest admitted token sequence [default: 250]
    #[arg(long, global = true)]
    max_len: Option<String>,
    /// Training epochs [default: 300]
    #[arg(long, global = true)]
    epochs: Option<String>,
    /// Mini-batch size [default: 256]
    #[arg(long, global = true)]
    batch_size: Option<String>,
    /// Initial learning rate [default: 0.001]
    #[arg(long, global = true)]
    lr: Option<String>,
    /// Channels of the first convolution [default: 64]
    #[arg(long, global = true)]
    init_channels: Option<String>,
    /// Number of dense blocks [default: 4]
    #[arg(long, global = true)]
    blocks: Option<String>,
    /// Channels added by each dense block [default: 32]
    #[arg(long, global = true)]
    growth: Option<String>,
    /// Width of the hidden fully connected layer [default: 128]
    #[arg(long, global = true)]
    hidden: Option<String>,
    /// Embedding dimension for the fasttext encoding [default: 100]
    #[arg(long, global = true)]
    embed_dim: Option<String>,
    /// Embedding training epochs [default: 100]
    #[arg(long, global = true)]
    embed_epochs: Option<String>,
}

impl Settings {
    fn overrides(&self) -> BTreeMap<&'static str, String> {
        let pairs: [(&'static str, &Option<String>); 24] = [
            ("method", &self.method),
            ("n", &self.n),
            ("m", &self.m),
            ("c", &self.c),
            ("transform", &self.transform),
            ("onehot_size", &self.onehot_size),
            ("threshold", &self.threshold),
            ("top_k", &self.top_k),
            ("compiler", &self.compiler),
            ("flags", &self.flags),
            ("reps", &self.reps),
            ("noise_bound", &self.noise_bound),
            ("seed", &self.seed),
            ("tile_sizes", &self.tile_sizes),
            ("max_len", &self.max_len),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("init_channels", &self.init_channels),
            ("blocks", &self.blocks),
            ("growth", &self.growth),
            ("hidden", &self.hidden),
            ("embed_dim", &self.embed_dim),
            ("embed_epochs", &self.embed_epochs),
        ];
        pairs.into_iter().filter_map(|(k, v)| v.clone().map(|v| (k, v))).collect()
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the tokens of a loop region as `kind<TAB>text` lines
    Tokenize {
        /// Corpus loop file
        #[arg(long = "loop")]
        loop_file: PathBuf,
    },
    /// List, or write, transformed variants of a loop
    Mutate {
        #[arg(long = "loop")]
        loop_file: PathBuf,
        /// Apply only this transformation sequence
        #[arg(long)]
        descriptor: Option<String>,
        /// Output file (with --descriptor) or directory (for all variants)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Only print the legal descriptors
        #[arg(long)]
        list: bool,
        /// Print the transformed loop region instead of the whole program
        #[arg(long)]
        region_only: bool,
    },
    /// Dump the encoded token matrix of a loop and optionally a transformation vector
    Encode {
        #[arg(long = "loop")]
        loop_file: PathBuf,
        /// Take the encoders from a trained model
        #[arg(long)]
        model: Option<PathBuf>,
        /// Build frequency maps from every loop of this directory
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Embedding table for the fasttext encoding
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Also print the encoded transformation vector
        #[arg(long)]
        descriptor: Option<String>,
    },
    /// Train subword embeddings on the training loops
    Embed {
        #[arg(long)]
        corpus: PathBuf,
        /// Restrict training to this dataset's training split
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure every legal transformation of every corpus loop
    BuildDataset {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip log path [default: <out>.skips]
        #[arg(long)]
        skip_log: Option<PathBuf>,
        /// Also time each original against itself
        #[arg(long)]
        symmetry: bool,
    },
    /// Train the speedup regressor
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint path; metadata goes to <out>.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the speedup of one transformation of one loop
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "loop")]
        loop_file: PathBuf,
        #[arg(long)]
        descriptor: String,
    },
    /// Rank the legal transformations of a loop by predicted speedup
    Rank {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "loop")]
        loop_file: PathBuf,
    },
    /// Select and measure transformations in the static and dynamic scenarios
    Bench {
        #[arg(long)]
        model: PathBuf,
        /// One loop file; repeat for several
        #[arg(long = "loop", required = true)]
        loop_files: Vec<PathBuf>,
        /// Also measure every legal transformation
        #[arg(long)]
        exhaustive: bool,
    },
    /// Evaluate a model on a dataset's validation split
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Print the report as JSON
        #[arg(long)]
        json: bool,
    },
    /// Speedup precision and recall over a range of thresholds
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        from: f64,
        #[arg(long, default_value_t = 1.5)]
        to: f64,
        #[arg(long, default_value_t = 0.05)]
        step: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            report(1, "usage", &e.kind().to_string());
            return ExitCode::from(1);
        }
    };
    let result = config::resolve(&cli.settings.overrides(), cli.settings.config.as_deref())
        .and_then(|cfg| commands::run(cli.command, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = commands::classify(&e);
            report(code, kind, &format!("{e:#}"));
            ExitCode::from(code)
        }
    }
}

/// Output closed early, as in `looptune tokenize ... | head`.
fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .any(|c| c.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe))
}

fn report(code: u8, kind: &str, message: &str) {
    let line = serde_json::json!({ "error": { "code": code, "kind": kind, "message": message } });
    eprintln!("{line}");
}
