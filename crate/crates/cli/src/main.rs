mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{parse_override, ConfigError, KEYS};

#[derive(Parser, Debug)]
#[command(
    name = "mildnet",
    version,
    about = "Train and run a multi-layer descriptor network for visual search",
    arg_required_else_help = true,
    after_help = config_help()
)]
pub struct Cli {
    /// Print the result as one JSON document on stdout
    #[arg(long, global = true)]
    pub json: bool,

    /// Root seed for every random stream
    #[arg(long, global = true, env = "MILDNET_SEED", default_value_t = 0)]
    pub seed: u64,

    /// Worker threads; results do not depend on this
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Config file, or a preset name (default, tiny)
    #[arg(long, global = true, value_name = "PATH|PRESET", default_value = "default")]
    pub config: String,

    /// Override one config key; repeatable, later wins
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_override)]
    pub overrides: Vec<(String, String)>,

    #[command(subcommand)]
    pub command: Command,
}

fn config_help() -> String {
    let defaults = config::RunConfig::default();
    let tiny = config::RunConfig::tiny();
    let mut s = String::from("Config keys (file lines `key = value`, or --set key=value); default [tiny]:\n");
    for (k, doc) in KEYS {
        let d = defaults.get(k).unwrap_or_default();
        let t = tiny.get(k).unwrap_or_default();
        let preset = if d == t { String::new() } else { format!(" [{t}]") };
        s.push_str(&format!("  {k:<20} {d}{preset}  {doc}\n"));
    }
    s.push_str("\nExit status: 0 success, 1 usage or config error, 2 runtime error.");
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Triplets,
    Catalog,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

/// Training overrides shared by `train` and `ablate`; each maps onto the
/// config key of the same name.
#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    /// Tapped block pools, e.g. b1,b2,b3,b4,b5 [default: config skip_taps]
    #[arg(long)]
    pub taps: Option<String>,
    /// hinge | contrastive [default: config loss]
    #[arg(long)]
    pub loss: Option<String>,
    /// [default: config epochs]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: config batch_size]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: config lr]
    #[arg(long)]
    pub lr: Option<f64>,
    /// sgd_momentum | rmsprop [default: config optimizer]
    #[arg(long)]
    pub optimizer: Option<String>,
}

impl TrainFlags {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("skip_taps", self.taps.clone());
        push("loss", self.loss.clone());
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        push("optimizer", self.optimizer.clone());
        out
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic triplet set or product catalog
    Synth {
        #[arg(long, value_enum, default_value = "triplets")]
        kind: SynthKind,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Catalog only: index of the first generated item
        #[arg(long, default_value_t = 0)]
        start: usize,
        /// Catalog only: append to an existing catalog.jsonl in --out
        #[arg(long)]
        append: bool,
    },
    /// Train on a triplet manifest
    Train {
        /// Triplet manifest (TSV)
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
        /// Continue from OUT/checkpoints/last.mldc
        #[arg(long)]
        resume: bool,
        /// Record wall-clock time in metrics (logs then differ between runs)
        #[arg(long)]
        wall_time: bool,
    },
    /// Triplet accuracy of saved weights
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Weights file (MLDW)
        #[arg(long)]
        weights: PathBuf,
        /// Records to score [default: val when present, else all]
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
    /// Train the five tap configurations and tabulate their accuracy
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory, one subdirectory per configuration
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Embed catalog items or manifest images with trained weights
    Embed {
        #[arg(long)]
        weights: PathBuf,
        /// Catalog (JSON lines); ids are item ids
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        catalog: Option<PathBuf>,
        /// Triplet manifest; ids are image paths as written in it
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output embedding store (MLDE)
        #[arg(long)]
        out: PathBuf,
    },
    /// Build an ANN forest over an embedding store
    IndexBuild {
        /// Embedding store (MLDE)
        #[arg(long)]
        embeddings: PathBuf,
        /// Output index (MLDI)
        #[arg(long)]
        out: PathBuf,
    },
    /// Query an ANN forest
    IndexQuery {
        /// Index (MLDI)
        #[arg(long)]
        index: PathBuf,
        /// Query with the stored vector of this id (or of this id in --embeddings)
        #[arg(long)]
        id: Option<String>,
        /// Query vectors (MLDE); every entry is queried unless --id is given
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Neighbours per query [default: config top_k]
        #[arg(long)]
        top_k: Option<usize>,
        /// Compare against exact search and report recall
        #[arg(long)]
        exact: bool,
    },
    /// Incremental nearest-neighbour batch over a partitioned catalog
    PipelineRun {
        /// Catalog (JSON lines); image paths are relative to its directory
        #[arg(long)]
        catalog: PathBuf,
        /// Output directory (results.jsonl, state.json)
        #[arg(long)]
        out: PathBuf,
        /// Feature cache [default: OUT/cache.mlde]
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Mine training triplets from pipeline results
    MineTriplets {
        #[arg(long)]
        catalog: PathBuf,
        /// Pipeline results
        #[arg(long)]
        results: PathBuf,
        /// Output manifest (TSV)
        #[arg(long)]
        out: PathBuf,
        /// Feature cache [default: cache.mlde next to --results]
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Count trainable parameters
    Params {
        /// Tap set [default: config skip_taps]
        #[arg(long, conflicts_with = "ablation")]
        taps: Option<String>,
        /// Count all five ablation configurations
        #[arg(long)]
        ablation: bool,
    },
    /// Finite-difference gradient checks of every op and the whole network
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Sampled coordinates per parameter tensor
        #[arg(long, default_value_t = 4)]
        per_tensor: usize,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        /// Largest accepted relative error
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

/// The error and its causes, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}
