mod commands;
mod data;
mod error;
mod load;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stori_core::sweep::SweepMethod;

use crate::error::CliResult;
use crate::settings::{load_config, Overrides, Settings, DATA_DIR_VAR};

/// Semantic token reweighting for CLIP-style text encoders.
///
/// Exit status: 0 on success, 2 on invalid input, 1 on internal errors.
#[derive(Debug, Parser)]
#[command(name = "stori", version)]
struct Cli {
    /// TOML file with defaults for any of the global flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct PromptArgs {
    #[arg(long)]
    prompt: String,
    /// Span weights: a JSON file or inline JSON,
    /// {"default": 1.0, "entries": [{"text": "...", "weight": w}]}.
    #[arg(long)]
    spans: Option<String>,
    /// Extra span entry TEXT=WEIGHT; repeatable.
    #[arg(long = "span", value_name = "TEXT=WEIGHT")]
    span: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Method {
    Reweight,
    PromptWeighting,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    prompt: PromptArgs,
    /// Attribute whose items count as relevant; defaults to the first of --attrs.
    #[arg(long)]
    positives: Option<String>,
    /// Evaluate a seeded sample of at most this many items per category.
    #[arg(long)]
    sample_per_category: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Encode one prompt with span weights and print the token weights.
    Encode {
        #[command(flatten)]
        prompt: PromptArgs,
    },
    /// Train per-token log-weights of class prompts on few-shot image embeddings.
    Train {
        /// {"classes": [{"label": "...", "prompts": ["..."]}]}
        #[arg(long)]
        prompts: PathBuf,
        /// JSONL, one {"label": "...", "embedding": [...]} per line.
        #[arg(long)]
        data: PathBuf,
        /// Held-out JSONL in the same format.
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Trained weights file; defaults to <out-dir>/weights.json.
        #[arg(long)]
        weights_out: Option<PathBuf>,
    },
    /// Show each trained prompt's token weights and their share of the total.
    Inspect {
        /// Weights file written by `train`.
        #[arg(long)]
        weights: PathBuf,
    },
    /// Rank the store for one weighted prompt.
    Retrieve {
        #[command(flatten)]
        prompt: PromptArgs,
    },
    /// Retrieval metrics over a grid of span weights.
    EvalRetrieval {
        #[command(flatten)]
        sweep: SweepArgs,
        #[arg(long, value_enum, default_value = "reweight")]
        method: Method,
        /// Block whose input the prompt-weighting baseline blends; defaults to --reweight-start.
        #[arg(long)]
        inject_block: Option<usize>,
    },
    /// Weight sweeps for every reweighting start block, in both modes.
    Ablate {
        #[command(flatten)]
        sweep: SweepArgs,
        /// Start blocks to run, comma separated; defaults to all.
        #[arg(long, value_delimiter = ',')]
        starts: Option<Vec<usize>>,
    },
    /// Runtime of reweighted encoding relative to the plain encoder.
    Bench {
        #[command(flatten)]
        prompt: PromptArgs,
        /// Time the plain encoder against itself.
        #[arg(long)]
        plain_vs_plain: bool,
    },
    /// Serve the HTTP API (and static assets with --static-dir).
    Serve,
    /// Write a toy model, vocabulary, planted store and few-shot data.
    Fixture {
        /// Target directory; defaults to $STORI_DATA_DIR, then ./stori-fixture.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Encode { .. } => "encode",
            Command::Train { .. } => "train",
            Command::Inspect { .. } => "inspect",
            Command::Retrieve { .. } => "retrieve",
            Command::EvalRetrieval { .. } => "eval-retrieval",
            Command::Ablate { .. } => "ablate",
            Command::Bench { .. } => "bench",
            Command::Serve => "serve",
            Command::Fixture { .. } => "fixture",
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(path) => {
            let mut o = load_config(path)?;
            settings::rebase(&mut o, path.parent().unwrap_or(std::path::Path::new(".")));
            o
        }
        None => Overrides::default(),
    };
    let data_dir = std::env::var_os(DATA_DIR_VAR).map(PathBuf::from);
    let s = Settings::resolve(&cli.overrides, &file, data_dir);
    let name = cli.command.name();
    match cli.command {
        Command::Encode { prompt } => commands::encode(&s, name, &prompt),
        Command::Train {
            prompts,
            data,
            eval,
            weights_out,
        } => commands::train(&s, name, &prompts, &data, eval.as_deref(), weights_out),
        Command::Inspect { weights } => commands::inspect(&s, name, &weights),
        Command::Retrieve { prompt } => commands::retrieve(&s, name, &prompt),
        Command::EvalRetrieval {
            sweep,
            method,
            inject_block,
        } => {
            let method = match method {
                Method::Reweight => SweepMethod::Reweight,
                Method::PromptWeighting => SweepMethod::PromptWeighting {
                    inject_block: inject_block.unwrap_or(s.reweight_start),
                },
            };
            commands::eval_retrieval(&s, name, &sweep, method)
        }
        Command::Ablate { sweep, starts } => commands::ablate(&s, name, &sweep, starts),
        Command::Bench {
            prompt,
            plain_vs_plain,
        } => commands::bench(&s, name, &prompt, plain_vs_plain),
        Command::Serve => commands::serve(&s),
        Command::Fixture { dir } => commands::fixture(&s, name, dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stori: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
