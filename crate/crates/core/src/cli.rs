//! Command-line entry point.
//!
//! Exit statuses: 0 success, 1 per-item failures (run still produced its
//! artifacts, or an item aborted the run), 2 usage, configuration or
//! authentication errors.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use crate::cider::CiderConfig;
use crate::corpus::{corpus_stats, filter_split, parse_corpus, Corpus, CorpusFormat, ParseOptions, Split};
use crate::evalrunner::{
    self, merge_reports, parse_line_records, prepare, render, run_eval, score_candidates, write_atomic, BudgetSettings,
    ReportFormat, RunConfig, RunError, ScoredRun,
};
use crate::finetune::{export_pairs, sample_training_subset};
use crate::genclient::Backend;
use crate::promptgen::PromptTemplate;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ITEM_FAILURES: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "capeval", version, about = "Generate image captions from description + context and score them with CIDEr")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Table,
    LineRecords,
}

impl From<OutputFormat> for ReportFormat {
    fn from(f: OutputFormat) -> Self {
        match f {
            OutputFormat::Table => ReportFormat::Table,
            OutputFormat::LineRecords => ReportFormat::LineRecords,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Per-split counts and mean token lengths.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long, default_value = "canonical-jsonl")]
        format: CorpusFormat,
        /// Skip invalid records with a warning.
        #[arg(long, conflicts_with = "strict")]
        lenient: bool,
        /// Fail on the first invalid record (default).
        #[arg(long)]
        strict: bool,
    },
    /// Score pre-generated candidates (`{"image_id", "caption"}` lines) offline.
    Score {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long = "max-n")]
        max_n: Option<usize>,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long, default_value = "canonical-jsonl")]
        format: CorpusFormat,
        #[arg(long)]
        label: Option<String>,
        #[arg(long, value_enum, default_value = "table")]
        output: OutputFormat,
        /// Also write line records to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate captions only.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dry_run: bool,
    },
    /// Generate and score.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dry_run: bool,
    },
    /// Sample training entries and write prompt/completion lines.
    ExportFinetune {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Run config supplying corpus, template and budget; flags win.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        seed: u64,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        format: Option<CorpusFormat>,
    },
    /// Combine line-record reports into one table.
    MergeReports {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Stats { corpus: PathBuf, split: Option<Split>, format: CorpusFormat, strict: bool },
    Score {
        corpus: PathBuf,
        candidates: PathBuf,
        split: Option<Split>,
        format: CorpusFormat,
        metric: CiderConfig,
        label: String,
        output: OutputFormat,
        out: Option<PathBuf>,
    },
    Generate { config: PathBuf },
    Eval { config: PathBuf },
    ExportFinetune {
        corpus: Option<PathBuf>,
        format: CorpusFormat,
        template: String,
        budget: BudgetSettings,
        k: usize,
        seed: u64,
        out: Option<PathBuf>,
    },
    MergeReports { files: Vec<PathBuf> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommandPlan {
    pub command: Command,
    pub dry_run: bool,
}

/// A usage problem; `message` already carries clap's usage text when relevant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError {
    pub message: String,
    /// `--help` / `--version` were requested; print and exit 0.
    pub informational: bool,
}

/// Parses argv (without the program name) into a plan, merging a run config
/// where the command accepts one. Path existence is checked by
/// [`CommandPlan::validate`].
pub fn parse_invocation<I, S>(argv: I) -> Result<CommandPlan, UsageError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args = std::iter::once(std::ffi::OsString::from("capeval")).chain(argv.into_iter().map(Into::into));
    let cli = Cli::try_parse_from(args).map_err(|e| UsageError {
        informational: matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion),
        message: e.render().to_string(),
    })?;
    let usage = |m: String| UsageError { message: m, informational: false };

    let plan = match cli.command {
        Cmd::Stats { corpus, split, format, lenient, strict: _ } => {
            CommandPlan { command: Command::Stats { corpus, split, format, strict: !lenient }, dry_run: false }
        }
        Cmd::Score { corpus, candidates, sigma, max_n, split, format, label, output, out } => {
            let metric = CiderConfig::uniform(max_n.unwrap_or(crate::textnorm::DEFAULT_MAX_N), sigma.unwrap_or(crate::cider::DEFAULT_SIGMA));
            metric.validate().map_err(|e| usage(e.to_string()))?;
            let label = label.unwrap_or_else(|| {
                candidates.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "candidates".into())
            });
            CommandPlan {
                command: Command::Score { corpus, candidates, split, format, metric, label, output, out },
                dry_run: false,
            }
        }
        Cmd::Generate { config, dry_run } => CommandPlan { command: Command::Generate { config }, dry_run },
        Cmd::Eval { config, dry_run } => CommandPlan { command: Command::Eval { config }, dry_run },
        Cmd::ExportFinetune { corpus, config, k, seed, out, format } => {
            let base = match &config {
                Some(path) => Some(RunConfig::load(path).map_err(|e| usage(e.to_string()))?),
                None => None,
            };
            CommandPlan {
                command: Command::ExportFinetune {
                    corpus: corpus.or_else(|| base.as_ref().map(|c| c.corpus.clone())),
                    format: format.or(base.as_ref().map(|c| c.corpus_format)).unwrap_or_default(),
                    template: base.as_ref().map(|c| c.template.clone()).unwrap_or_else(|| "default".into()),
                    budget: base.as_ref().map(|c| c.budget).unwrap_or_default(),
                    k,
                    seed,
                    out,
                },
                dry_run: false,
            }
        }
        Cmd::MergeReports { files } => CommandPlan { command: Command::MergeReports { files }, dry_run: false },
    };
    Ok(plan)
}

impl CommandPlan {
    /// Checks that every input path is present; all problems are returned together.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        let mut missing_corpus = false;
        let mut need = |label: &str, p: &Path| {
            if !p.is_file() {
                problems.push(format!("{label} {} does not exist", p.display()));
            }
        };
        match &self.command {
            Command::Stats { corpus, .. } => need("corpus", corpus),
            Command::Score { corpus, candidates, .. } => {
                need("corpus", corpus);
                need("candidates file", candidates);
            }
            Command::Generate { config } | Command::Eval { config } => need("config", config),
            Command::ExportFinetune { corpus, template, .. } => {
                match corpus {
                    Some(c) => need("corpus", c),
                    None => missing_corpus = true,
                }
                if template != crate::promptgen::DEFAULT_TEMPLATE_NAME {
                    need("template", Path::new(template));
                }
            }
            Command::MergeReports { files } => {
                for f in files {
                    need("report", f);
                }
            }
        }
        if missing_corpus {
            problems.push("export-finetune needs --corpus or --config".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}

/// Parses, validates and runs one invocation, writing human output to `out`
/// and diagnostics to `err`.
pub fn run<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    match parse_invocation(argv) {
        Ok(plan) => execute(&plan, None, out, err),
        Err(e) if e.informational => {
            let _ = write!(out, "{}", e.message);
            EXIT_OK
        }
        Err(e) => {
            let _ = write!(err, "{}", e.message);
            EXIT_CONFIG
        }
    }
}

/// Runs a plan. `backend` replaces the configured generation backend (tests use counting mocks).
pub fn execute(plan: &CommandPlan, backend: Option<Arc<dyn Backend>>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    if let Err(problems) = plan.validate() {
        for p in problems {
            let _ = writeln!(err, "error: {p}");
        }
        return EXIT_CONFIG;
    }
    match dispatch(plan, backend, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &RunError) -> i32 {
    match e {
        RunError::ItemFailed { .. } => EXIT_ITEM_FAILURES,
        _ => EXIT_CONFIG,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_owned(), source }
}

fn load_corpus(path: &Path, format: CorpusFormat, strict: bool) -> Result<(Corpus, Vec<String>), RunError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let parsed = parse_corpus(&bytes, ParseOptions { format, strict })?;
    Ok((parsed.corpus, parsed.warnings))
}

fn dispatch(plan: &CommandPlan, backend: Option<Arc<dyn Backend>>, out: &mut dyn Write) -> Result<i32, RunError> {
    match &plan.command {
        Command::Stats { corpus, split, format, strict } => {
            let (corpus, warnings) = load_corpus(corpus, *format, *strict)?;
            let _ = writeln!(out, "{:<6} {:>8} {:>9} {:>13} {:>17}", "split", "entries", "articles", "mean_caption", "mean_description");
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
            for s in corpus_stats(&corpus).into_iter().filter(|s| split.is_none_or(|sp| sp == s.split)) {
                let _ = writeln!(
                    out,
                    "{:<6} {:>8} {:>9} {:>13} {:>17}",
                    s.split.as_str(),
                    s.n_entries,
                    s.n_articles,
                    fmt(s.mean_caption_tokens),
                    fmt(s.mean_description_tokens)
                );
            }
            let _ = writeln!(out, "# tokenizer={} corpus={}", crate::textnorm::TOKENIZER_ID, corpus.source_digest());
            if !warnings.is_empty() {
                let _ = writeln!(out, "# {} warning(s)", warnings.len());
            }
            Ok(EXIT_OK)
        }
        Command::Score { corpus, candidates, split, format, metric, label, output, out: out_file } => {
            let (mut corpus, _) = load_corpus(corpus, *format, true)?;
            if let Some(s) = split {
                corpus = filter_split(&corpus, *s);
            }
            let cands = read_candidates(candidates)?;
            let report = score_candidates(&cands, &corpus, None, metric)?;
            let run = ScoredRun::new(&report, label, corpus.source_digest(), vec![]);
            if let Some(path) = out_file {
                write_atomic(path, render(std::slice::from_ref(&run), ReportFormat::LineRecords).as_bytes())?;
            }
            let _ = write!(out, "{}", render(&[run], (*output).into()));
            Ok(EXIT_OK)
        }
        Command::Generate { config } | Command::Eval { config } => {
            let score = matches!(plan.command, Command::Eval { .. });
            let cfg = RunConfig::load(config)?;
            let prepared = prepare(&cfg)?;
            let backend = match backend {
                Some(b) => b,
                None => prepared.backend()?,
            };
            if plan.dry_run {
                let prompts = prepared.prompts();
                let over = prompts.iter().filter(|(_, p)| p.is_err()).count();
                let truncated = prompts.iter().filter(|(_, p)| matches!(p, Ok(f) if f.truncation.is_some())).count();
                let _ = writeln!(
                    out,
                    "dry run: {} {} item(s) from split {}, backend {:?}, {} over budget, {} truncated; nothing written",
                    if score { "eval" } else { "generate" },
                    prepared.corpus.len(),
                    cfg.split,
                    cfg.generation.backend,
                    over,
                    truncated
                );
                return Ok(EXIT_OK);
            }
            let outcome = run_eval(&prepared, backend, score)?;
            let c = outcome.manifest.counts;
            if let Some(report) = &outcome.report {
                let _ = write!(out, "{}", evalrunner::emit_report(report, &outcome.manifest, ReportFormat::Table));
            }
            let _ = writeln!(out, "generated={} cached={} failed={}", c.generated, c.cached, c.failed);
            Ok(if outcome.has_failures() { EXIT_ITEM_FAILURES } else { EXIT_OK })
        }
        Command::ExportFinetune { corpus, format, template, budget, k, seed, out: out_file } => {
            let corpus_path = corpus.as_ref().expect("validated");
            let (corpus, _) = load_corpus(corpus_path, *format, true)?;
            let template = PromptTemplate::resolve(template, Path::new("")).map_err(|e| RunError::Config(vec![e.to_string()]))?;
            let policy = budget.policy().map_err(|e| RunError::Config(vec![e.to_string()]))?;
            let entries = sample_training_subset(&corpus, *k, *seed).map_err(|e| RunError::Config(vec![e.to_string()]))?;
            let bytes = export_pairs(&entries, &template, &policy).map_err(|e| RunError::Config(vec![e.to_string()]))?;
            match out_file {
                Some(p) if p.as_os_str() != "-" => write_atomic(p, &bytes)?,
                _ => out.write_all(&bytes).map_err(io_err(Path::new("<stdout>")))?,
            }
            Ok(EXIT_OK)
        }
        Command::MergeReports { files } => {
            let mut runs = Vec::new();
            for f in files {
                let text = std::fs::read_to_string(f).map_err(io_err(f))?;
                runs.extend(parse_line_records(&text)?);
            }
            let _ = write!(out, "{}", merge_reports(&runs)?);
            Ok(EXIT_OK)
        }
    }
}

#[derive(serde::Deserialize)]
struct CandidateLine {
    image_id: String,
    caption: String,
}

fn read_candidates(path: &Path) -> Result<Vec<(String, String)>, RunError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut cands = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let c: CandidateLine = serde_json::from_str(line)
            .map_err(|e| RunError::Config(vec![format!("{} line {}: {e}", path.display(), i + 1)]))?;
        cands.push((c.image_id, c.caption));
    }
    let dups = evalrunner::duplicate_ids(cands.iter().map(|(id, _)| id.as_str()));
    if !dups.is_empty() {
        return Err(RunError::Config(vec![format!("duplicate candidate ids: {}", dups.join(", "))]));
    }
    Ok(cands)
}
