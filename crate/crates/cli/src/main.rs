mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{FileConfig, LlmArgs};

/// Exit status 2: bad flags, missing inputs, invalid settings.
/// Exit status 1: anything that went wrong while running.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Op(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Op(e.into())
    }
}

pub type CmdResult = Result<(), Failure>;

pub fn existing(path: &Path) -> Result<PathBuf, Failure> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(Failure::Usage(format!("path does not exist: {}", path.display())))
    }
}

#[derive(Debug, Parser)]
#[command(name = "rulesmith", version, about = "Develop keyword NER rules with LLM help, then match and evaluate them")]
pub struct Cli {
    /// TOML config file. Flags override environment, which overrides the file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory holding pipeline inputs and outputs.
    #[arg(long, global = true, default_value = "run")]
    pub run_dir: PathBuf,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a corpus file and write notes.jsonl and annotations.jsonl.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Split notes into snippets (snippets.jsonl).
    Segment,
    /// Label snippets from annotation overlap (labels.jsonl).
    Label,
    /// Note-grouped train/test split (train.jsonl, test.jsonl).
    Split {
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Classify snippets by repeated reasoning/verification chains and vote.
    Triage(TriageArgs),
    /// Extract keywords from positive snippets and synthesize rules.
    Extract(ExtractArgs),
    /// Build or inspect rule files.
    #[command(subcommand)]
    Rules(RulesCommand),
    /// Match a rule file against text or snippets.
    Match {
        #[arg(long)]
        rules: PathBuf,
        /// Match this text and print the matches.
        #[arg(long, conflicts_with = "snippets")]
        text: Option<String>,
        /// Snippet file; defaults to the run directory's snippets.jsonl.
        #[arg(long)]
        snippets: Option<PathBuf>,
    },
    /// Metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Sample false positives and false negatives for manual review.
    ExportErrors {
        /// Triage transcripts (defaults to triage/transcripts.jsonl).
        #[arg(long)]
        transcripts: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        snippets: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        sample_size: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to <run-dir>/errors).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Start the curation service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TriageArgs {
    #[command(flatten)]
    pub llm: LlmArgs,
    /// Independent chain runs per snippet; must be odd.
    #[arg(long)]
    pub votes: Option<usize>,
    /// combined or per_expert.
    #[arg(long)]
    pub expert_mode: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Task guideline document (markdown).
    #[arg(long)]
    pub guideline: Option<PathBuf>,
    /// Annotation guideline document (markdown).
    #[arg(long)]
    pub annotation_guideline: Option<PathBuf>,
    #[arg(long)]
    pub snippets: Option<PathBuf>,
    /// Output directory (defaults to <run-dir>/triage).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Stop after this many snippets complete; rerun to resume.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub llm: LlmArgs,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub annotation_guideline: Option<PathBuf>,
    #[arg(long)]
    pub snippets: Option<PathBuf>,
    /// Only snippets labeled positive here are used.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Concept class given to synthesized rules.
    #[arg(long)]
    pub concept: Option<String>,
    /// Output directory (defaults to <run-dir>/keywords).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum RulesCommand {
    /// Synthesize a rule file from a keyword run directory.
    Build {
        #[arg(long)]
        keywords: Option<PathBuf>,
        #[arg(long)]
        concept: Option<String>,
        /// Defaults to <run-dir>/generated_rules.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a rule file as a table.
    Show {
        #[arg(long)]
        rules: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Precision, recall and F1 of triage predictions.
    Prf {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Share of reference-matched snippets also matched by generated rules.
    Coverage {
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        snippets: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub keywords: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub snippets: Option<PathBuf>,
    #[arg(long)]
    pub concept: Option<String>,
    /// Listen address (env RULESMITH_ADDR).
    #[arg(long)]
    pub addr: Option<String>,
    /// Static UI bundle to serve at /.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .try_init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    init_logging(cli.verbose);
    let file = match &cli.config {
        Some(path) => FileConfig::load(path),
        None => Ok(FileConfig::default()),
    };
    match file.and_then(|file| commands::run(&cli, &file)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
        Err(Failure::Op(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
