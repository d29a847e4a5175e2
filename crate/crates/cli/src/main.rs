mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Incomplete-token analysis and improbable-bigram experiments for byte-level
/// BPE tokenizers.
///
/// Exit status: 0 success, 1 usage error, 2 input or validation error,
/// 3 endpoint failure.
#[derive(Debug, Parser, Serialize)]
#[command(name = "improbable", version)]
pub struct Cli {
    /// Worker threads for analysis (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// In-flight requests for `run` (default 4).
    #[arg(long, global = true)]
    pub max_parallel: Option<usize>,
    /// Report errors on stderr as one JSON line.
    #[arg(long, global = true)]
    pub json_errors: bool,
    /// JSON file whose keys mirror the long flags; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Convert a tokenizer file into a bundle.
    Import(ImportArgs),
    /// Count tokens by UTF-8 role.
    Census(CensusArgs),
    /// Count or sample improbable bigrams.
    Forge(ForgeArgs),
    /// Rank tokens by how well trained their embeddings look.
    Rank(RankArgs),
    /// Build complete-token baselines for forged bigrams.
    Baseline(BaselineArgs),
    /// Pre-segment forged bigrams into character-aligned encodings.
    Preseg(PresegArgs),
    /// Assemble the experiment suite for all three conditions.
    GenSuite(GenSuiteArgs),
    /// Run a suite against a chat endpoint.
    Run(RunArgs),
    /// Re-judge saved responses offline.
    Judge(JudgeArgs),
    /// Summarize verdict files per model.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum PatternPreset {
    Gpt2,
    Llama3,
    Qwen,
}

#[derive(Debug, Args, Serialize)]
pub struct TokenizerArgs {
    /// Bundle, tokenizer.json, tiktoken ranks or tekken JSON.
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Special tokens appended after a tiktoken rank file.
    #[arg(long, default_value_t = 0)]
    pub extra_specials: usize,
    /// Pre-tokenizer regex for rank files that do not carry one.
    #[arg(long, conflicts_with = "pattern_preset")]
    pub pattern: Option<String>,
    #[arg(long, value_enum)]
    pub pattern_preset: Option<PatternPreset>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
pub enum ModeArg {
    MergeOnly,
    Pretokenized,
    Both,
}

#[derive(Debug, Args, Serialize)]
pub struct ImportArgs {
    #[command(flatten)]
    pub tok: TokenizerArgs,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CensusArgs {
    #[command(flatten)]
    pub tok: TokenizerArgs,
    /// Count non-ASCII single-byte tokens as incomplete.
    #[arg(long)]
    pub include_single_byte: bool,
    /// Count malformed tokens as incomplete.
    #[arg(long)]
    pub include_malformed: bool,
    /// Also write every incomplete token as JSON lines.
    #[arg(long)]
    pub list: Option<PathBuf>,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ForgeArgs {
    #[command(flatten)]
    pub tok: TokenizerArgs,
    /// Only count legal bigrams.
    #[arg(long)]
    pub count_only: bool,
    /// Encoding used by the decode-encode test; `both` is for counting.
    #[arg(long, value_enum, default_value = "merge-only")]
    pub mode: ModeArg,
    /// Ranking from `rank`; required unless --all-tokens.
    #[arg(long)]
    pub ranking: Option<PathBuf>,
    /// Do not restrict to well-trained tokens.
    #[arg(long)]
    pub all_tokens: bool,
    /// Keep single-script bigrams too.
    #[arg(long)]
    pub no_multilingual: bool,
    #[arg(long, default_value_t = 100)]
    pub sample_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum MethodArg {
    Cosine,
    L2,
}

#[derive(Debug, Args, Serialize)]
pub struct RankArgs {
    #[command(flatten)]
    pub tok: TokenizerArgs,
    /// Input embeddings: raw little-endian f32 with a rows/dims header, or CSV.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, value_enum, default_value = "cosine")]
    pub method: MethodArg,
    /// JSON array of reference token ids; defaults to unreachable tokens.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub tok: TokenizerArgs,
    #[arg(long)]
    pub ranking: PathBuf,
    /// Forge output (JSON lines).
    #[arg(long)]
    pub forge: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub radius: usize,
    /// Accept baseline pairs that do not encode back to themselves.
    #[arg(long)]
    pub allow_unstable: bool,
    #[arg(long, value_enum, default_value = "merge-only")]
    pub mode: ModeArg,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PresegArgs {
    #[command(flatten)]
    pub tok: TokenizerArgs,
    #[arg(long)]
    pub forge: PathBuf,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenSuiteArgs {
    #[arg(long)]
    pub forge: PathBuf,
    #[arg(long)]
    pub preseg: Option<PathBuf>,
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Keep flagged alternatives in the suite.
    #[arg(long)]
    pub include_flagged: bool,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum MockArg {
    Echo,
    Scrambler,
    OneOfThree,
}

#[derive(Debug, Args, Serialize)]
pub struct JudgeFlags {
    /// Compare without Unicode composition.
    #[arg(long)]
    pub no_nfc: bool,
    /// Keep surrounding quote characters.
    #[arg(long)]
    pub keep_quotes: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct RunArgs {
    #[arg(long)]
    pub suite: PathBuf,
    /// JSON array of three prompt templates.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Replace the username prompt text.
    #[arg(long)]
    pub usernames_template: Option<String>,
    #[arg(long, default_value = "http://127.0.0.1:8000/v1/chat/completions")]
    pub url: String,
    #[arg(long, default_value = "")]
    pub model: String,
    #[arg(long, default_value_t = 256)]
    pub max_new_tokens: u32,
    /// Seconds per request.
    #[arg(long, default_value_t = 60)]
    pub timeout: u64,
    #[arg(long, default_value_t = 2)]
    pub retries: u32,
    #[arg(long, default_value = "choices.0.message.content")]
    pub response_path: String,
    /// Environment variable holding a bearer token.
    #[arg(long)]
    pub api_key_env: Option<String>,
    /// Request field that carries phrase token ids.
    #[arg(long)]
    pub token_ids_field: Option<String>,
    /// Answer locally instead of calling the endpoint.
    #[arg(long, value_enum)]
    pub mock: Option<MockArg>,
    #[command(flatten)]
    pub judge: JudgeFlags,
    /// Verdicts as JSON lines. The summary goes to stdout, the table to stderr.
    #[arg(long, short)]
    pub output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct JudgeArgs {
    #[arg(long)]
    pub suite: PathBuf,
    /// Responses as JSON lines: run output or one record per trial.
    #[arg(long)]
    pub responses: PathBuf,
    #[command(flatten)]
    pub judge: JudgeFlags,
    /// Verdicts as JSON lines. The summary goes to stdout, the table to stderr.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Verdict file, optionally labelled as NAME=PATH. Repeatable.
    #[arg(long, required = true)]
    pub verdicts: Vec<String>,
    /// Print JSON instead of tables.
    #[arg(long)]
    pub json: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<_> = std::env::args_os().collect();
    let json_errors = argv.iter().any(|a| a == "--json-errors");
    let cmd = Cli::command();
    let argv = match config::merge_config(&cmd, argv) {
        Ok(a) => a,
        Err(e) => return commands::report_error(&commands::CliError::usage(e), json_errors),
    };
    let cli = match cmd.try_get_matches_from(argv).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            if json_errors {
                return commands::report_error(&commands::CliError::usage(anyhow::anyhow!(e.to_string())), true);
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => commands::report_error(&e, cli.json_errors),
    }
}
