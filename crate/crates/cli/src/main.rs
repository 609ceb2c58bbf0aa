//! `hoprag`: ingest a corpus, answer questions, and run evaluations and
//! ablation matrices with the multi-hop engine.

mod commands;
mod error;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

#[derive(Parser, Debug)]
#[command(
    name = "hoprag",
    version,
    about = "Multi-hop retrieval-augmented question answering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a BM25 index from a JSONL corpus of {doc_id, title, text} lines
    Ingest {
        corpus: PathBuf,
        /// Where to write the index (default: <out-dir>/index.json)
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long, default_value = "hoprag-out")]
        out_dir: PathBuf,
    },
    /// Answer one question and write its trace
    Ask {
        question: String,
        /// Question id used for the trace file name
        #[arg(long, default_value = "ask")]
        id: String,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate one configuration on a JSONL dataset
    Eval {
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate every configuration of an ablation matrix (given with --config)
    Ablate {
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Render the report written by the last eval or ablate run
    Report {
        #[arg(long, default_value = "hoprag-out")]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
        format: ReportFormat,
    },
}

/// Flags shared by the commands that run the pipeline. Flags win over the
/// config file, which wins over built-in defaults.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Pipeline config TOML (an ablation matrix for `ablate`)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "hoprag-out")]
    pub out_dir: PathBuf,
    /// Questions solved concurrently
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[arg(long)]
    pub max_reflections: Option<u32>,
    /// Backend for every module, overriding the config
    #[arg(long, value_enum)]
    pub backend: Option<Backend>,
    /// Script JSON for the scripted backend
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// BM25 index (default: config's retrieval.index_path, then <out-dir>/index.json)
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Directory of prompt template overrides
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Scripted,
    Http,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
    Json,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_env("HOPRAG_LOG").unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .without_time()
        .init();

    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest {
            corpus,
            index,
            out_dir,
        } => commands::ingest(&corpus, index, &out_dir),
        Command::Ask {
            question,
            id,
            common,
        } => commands::ask(&question, &id, &common),
        Command::Eval { dataset, common } => commands::eval(&dataset, &common),
        Command::Ablate { dataset, common } => commands::ablate(&dataset, &common),
        Command::Report { out_dir, format } => commands::report(&out_dir, format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hoprag: {e}");
            e.exit_code()
        }
    }
}
