//! Generate → post-process → score over one corpus split.

use std::collections::{BTreeMap, HashSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cider::{build_df_table, corpus_cider_with_df, CiderConfig, CiderError, CiderReport, ScoringPair};
use crate::corpus::{filter_split, parse_corpus, Corpus, CorpusError, CorpusFormat, ParseOptions, Split};
use crate::digest::sha256_hex;
use crate::genclient::{
    fixed_answers, Backend, BackendKind, Client, DiskCache, EchoBackend, FixedMapBackend, GenError, GenerationRecord,
    GenerationRequest, HttpBackend, HttpMapping, RetryPolicy, TokenBucket, API_KEY_ENV,
};
use crate::promptgen::{fit_budget, BudgetPolicy, FittedPrompt, PromptError, PromptTemplate, Truncation};
use crate::textnorm::{tokenize, DEFAULT_MAX_N};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration error:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("authentication failed for {image_id}: {message}; check {API_KEY_ENV} or the configured api_key_env")]
    Auth { image_id: String, message: String },
    #[error("item {image_id} failed and failure_policy is abort: {reason}")]
    ItemFailed { image_id: String, reason: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metric(#[from] CiderError),
    #[error("candidate for unknown image id {0:?}")]
    UnknownImage(String),
    #[error("reports are not comparable: {0}")]
    Incomparable(String),
    #[error("malformed report record {line}: {reason}")]
    MalformedReport { line: usize, reason: String },
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl RunError {
    fn config(msg: impl Into<String>) -> Self {
        RunError::Config(vec![msg.into()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailurePolicy {
    Abort,
    #[default]
    SkipAndFlag,
}

fn default_template() -> String {
    crate::promptgen::DEFAULT_TEMPLATE_NAME.to_owned()
}

fn default_split() -> Split {
    Split::Test
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Model label printed in the results table.
    pub label: String,
    pub corpus: PathBuf,
    #[serde(default)]
    pub corpus_format: CorpusFormat,
    #[serde(default = "default_split")]
    pub split: Split,
    /// `"default"` or a template file path.
    #[serde(default = "default_template")]
    pub template: String,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub failure_policy: FailurePolicy,
    pub generation: GenerationSettings,
    #[serde(default)]
    pub budget: BudgetSettings,
    #[serde(default)]
    pub metric: MetricSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSettings {
    pub backend: BackendKind,
    pub model_id: String,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_stop")]
    pub stop: Vec<String>,
    /// JSON-lines file of `{"image_id", "completion"}` for the fixed-map backend.
    #[serde(default)]
    pub fixed_map: Option<PathBuf>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub rate_per_sec: Option<f64>,
    #[serde(default = "default_burst")]
    pub burst: u32,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub http: Option<HttpSettings>,
}

fn default_max_tokens() -> u32 {
    64
}
fn default_stop() -> Vec<String> {
    vec!["\n".to_owned()]
}
fn default_in_flight() -> usize {
    4
}
fn default_burst() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpSettings {
    pub endpoint: String,
    /// Environment variable holding the key; `COMPLETION_API_KEY` when unset.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub mapping: HttpMapping,
}

fn default_timeout() -> u64 {
    60
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetSettings {
    pub window_tokens: usize,
    pub chars_per_token: f64,
    pub reserve_for_completion: usize,
}

impl Default for BudgetSettings {
    fn default() -> Self {
        Self { window_tokens: 2048, chars_per_token: 4.0, reserve_for_completion: 64 }
    }
}

impl BudgetSettings {
    pub fn policy(&self) -> Result<BudgetPolicy, PromptError> {
        BudgetPolicy::for_window(self.window_tokens, self.chars_per_token, self.reserve_for_completion)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSettings {
    pub max_n: usize,
    pub sigma: f64,
    /// Uniform `1/max_n` when absent.
    pub weights: Option<Vec<f64>>,
    /// Corpus whose captions (all splits) form the DF table instead of the evaluated split.
    pub df_corpus: Option<PathBuf>,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self { max_n: DEFAULT_MAX_N, sigma: crate::cider::DEFAULT_SIGMA, weights: None, df_corpus: None }
    }
}

impl MetricSettings {
    pub fn cider_config(&self) -> CiderConfig {
        let mut cfg = CiderConfig::uniform(self.max_n, self.sigma);
        if let Some(w) = &self.weights {
            cfg.weights = w.clone();
        }
        cfg
    }
}

impl RunConfig {
    /// Reads a TOML run config. Relative paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| RunError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.output_dir);
        if let Some(p) = self.cache_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.generation.fixed_map.as_mut() {
            fix(p);
        }
        if let Some(p) = self.metric.df_corpus.as_mut() {
            fix(p);
        }
        if self.template != crate::promptgen::DEFAULT_TEMPLATE_NAME {
            let t = PathBuf::from(&self.template);
            if t.is_relative() {
                self.template = base.join(t).display().to_string();
            }
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }
}

/// Everything a run needs, checked before any item is processed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub corpus: Corpus,
    pub template: PromptTemplate,
    pub policy: BudgetPolicy,
    pub cider: CiderConfig,
    pub fixed_map: Option<BTreeMap<String, String>>,
    pub df_corpus: Option<Corpus>,
}

/// Loads and validates every asset a run references; all problems are reported together.
/// Reads files only.
pub fn prepare(config: &RunConfig) -> Result<Prepared, RunError> {
    let mut problems = Vec::new();

    let template = PromptTemplate::resolve(&config.template, Path::new(""))
        .map_err(|e| problems.push(e.to_string()))
        .ok();
    let policy = config.budget.policy().map_err(|e| problems.push(e.to_string())).ok();
    let cider = config.metric.cider_config();
    if let Err(e) = cider.validate() {
        problems.push(e.to_string());
    }
    if let Err(e) = request_template(config, String::new()).validate() {
        problems.push(e.to_string());
    }
    if config.generation.max_in_flight == 0 {
        problems.push("generation.max_in_flight must be at least 1".into());
    }
    if matches!(config.generation.rate_per_sec, Some(r) if !(r.is_finite() && r > 0.0)) {
        problems.push("generation.rate_per_sec must be positive".into());
    }

    let corpus = read_corpus(&config.corpus, config.corpus_format)
        .map_err(|e| problems.push(e))
        .ok()
        .map(|c| filter_split(&c, config.split));
    let df_corpus = match &config.metric.df_corpus {
        Some(p) => read_corpus(p, config.corpus_format).map_err(|e| problems.push(e)).ok(),
        None => None,
    };

    let fixed_map = match (config.generation.backend, &config.generation.fixed_map) {
        (BackendKind::FixedMap, Some(p)) => read_fixed_map(p).map_err(|e| problems.push(e)).ok(),
        (BackendKind::FixedMap, None) => {
            problems.push("fixed-map backend needs generation.fixed_map".into());
            None
        }
        _ => None,
    };
    if config.generation.backend == BackendKind::CompletionHttp && config.generation.http.is_none() {
        problems.push("completion-http backend needs a [generation.http] table".into());
    }

    match (corpus, template, policy) {
        (Some(corpus), Some(template), Some(policy)) if problems.is_empty() => Ok(Prepared {
            config: config.clone(),
            corpus,
            template,
            policy,
            cider,
            fixed_map,
            df_corpus,
        }),
        _ => Err(RunError::Config(problems)),
    }
}

fn read_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("cannot read corpus {}: {e}", path.display()))?;
    parse_corpus(&bytes, ParseOptions { format, strict: true })
        .map(|p| p.corpus)
        .map_err(|e| format!("{}: {e}", path.display()))
}

#[derive(Deserialize)]
struct FixedLine {
    image_id: String,
    completion: String,
}

fn read_fixed_map(path: &Path) -> Result<BTreeMap<String, String>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read fixed map {}: {e}", path.display()))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: FixedLine =
            serde_json::from_str(line).map_err(|e| format!("{} line {}: {e}", path.display(), i + 1))?;
        map.insert(rec.image_id, rec.completion);
    }
    Ok(map)
}

fn request_template(config: &RunConfig, prompt: String) -> GenerationRequest {
    let g = &config.generation;
    GenerationRequest {
        backend: g.backend,
        model_id: g.model_id.clone(),
        prompt,
        max_tokens: g.max_tokens,
        temperature: g.temperature,
        stop: g.stop.clone(),
    }
}

impl Prepared {
    /// Budget-fitted prompt for every entry of the split, in corpus order.
    pub fn prompts(&self) -> Vec<(&str, Result<FittedPrompt, PromptError>)> {
        self.corpus
            .entries()
            .iter()
            .map(|e| (e.image_id.as_str(), fit_budget(e, &self.template, &self.policy)))
            .collect()
    }

    /// The request sent for one prompt. Fixed-map runs fold the map's digest
    /// into the model id so that different maps never share cache entries.
    pub fn request(&self, prompt: String) -> GenerationRequest {
        let mut req = request_template(&self.config, prompt);
        if let Some(map) = &self.fixed_map {
            let digest = sha256_hex(serde_json::to_vec(map).expect("map serializes"));
            req.model_id = format!("{}@{}", req.model_id, &digest[..16]);
        }
        req
    }

    /// The backend named by the config. Remote backends need their API key in the environment.
    pub fn backend(&self) -> Result<Arc<dyn Backend>, RunError> {
        match self.config.generation.backend {
            BackendKind::Echo => Ok(Arc::new(EchoBackend::new(self.template.clone()))),
            BackendKind::FixedMap => {
                let completions = self.fixed_map.as_ref().expect("checked in prepare");
                let fitted = self.prompts();
                let prompts = fitted
                    .iter()
                    .filter_map(|(id, f)| f.as_ref().ok().map(|f| (*id, f.text.as_str())));
                Ok(Arc::new(FixedMapBackend::new(fixed_answers(completions, prompts))))
            }
            BackendKind::CompletionHttp => {
                let http = self.config.generation.http.as_ref().expect("checked in prepare");
                let var = http.api_key_env.as_deref().unwrap_or(API_KEY_ENV);
                let key = std::env::var(var)
                    .ok()
                    .filter(|k| !k.is_empty())
                    .ok_or_else(|| RunError::config(format!("environment variable {var} is not set")))?;
                let backend = HttpBackend::new(
                    http.endpoint.clone(),
                    key,
                    http.mapping.clone(),
                    Duration::from_secs(http.timeout_secs),
                )
                .map_err(|e| RunError::config(e.to_string()))?;
                Ok(Arc::new(backend))
            }
        }
    }

    pub fn client(&self, backend: Arc<dyn Backend>) -> Client {
        let g = &self.config.generation;
        let client = Client::new(backend, DiskCache::new(self.config.cache_dir()), g.retry);
        match g.rate_per_sec {
            Some(rate) => client.with_rate_limit(TokenBucket::new(rate, g.burst)),
            None => client,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub image_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncatedItem {
    pub image_id: String,
    #[serde(flatten)]
    pub truncation: Truncation,
}

#[derive(Debug, Clone, Default)]
pub struct GenerationOutcome {
    /// Successful records in corpus order.
    pub records: Vec<GenerationRecord>,
    pub failures: Vec<ItemFailure>,
    pub truncations: Vec<TruncatedItem>,
}

impl GenerationOutcome {
    pub fn counts(&self) -> Counts {
        let cached = self.records.iter().filter(|r| r.from_cache).count();
        Counts {
            generated: self.records.len() - cached,
            cached,
            failed: self.failures.len(),
            scored: None,
        }
    }
}

enum Slot {
    Done(GenerationRecord),
    Failed(String),
}

/// Generates a caption for every entry of the prepared split with up to
/// `max_in_flight` concurrent requests. Each completion is cached as soon as
/// it arrives, so an interrupted run resumes from where it stopped.
pub fn run_generation(prepared: &Prepared, client: &Client) -> Result<GenerationOutcome, RunError> {
    let prompts = prepared.prompts();
    let mut outcome = GenerationOutcome::default();
    let mut work = Vec::new();
    for (idx, (id, fitted)) in prompts.into_iter().enumerate() {
        match fitted {
            Ok(f) => {
                if let Some(t) = f.truncation {
                    outcome.truncations.push(TruncatedItem { image_id: id.to_owned(), truncation: t });
                }
                work.push((idx, id, prepared.request(f.text)));
            }
            Err(e) => {
                if prepared.config.failure_policy == FailurePolicy::Abort {
                    return Err(RunError::ItemFailed { image_id: id.to_owned(), reason: e.to_string() });
                }
                outcome.failures.push(ItemFailure { image_id: id.to_owned(), reason: e.to_string() });
            }
        }
    }

    let slots: Mutex<BTreeMap<usize, Slot>> = Mutex::new(BTreeMap::new());
    let fatal: Mutex<Option<RunError>> = Mutex::new(None);
    let stop = AtomicBool::new(false);
    let next = AtomicUsize::new(0);
    let workers = prepared.config.generation.max_in_flight.min(work.len()).max(1);
    let abort = prepared.config.failure_policy == FailurePolicy::Abort;

    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((idx, id, req)) = work.get(i) else { break };
                let slot = match client.complete(id, req) {
                    Ok(rec) => Slot::Done(rec),
                    Err(GenError::Auth(message)) => {
                        stop.store(true, Ordering::SeqCst);
                        fatal.lock().expect("lock").get_or_insert(RunError::Auth { image_id: id.to_string(), message });
                        break;
                    }
                    Err(e) if abort => {
                        stop.store(true, Ordering::SeqCst);
                        fatal
                            .lock()
                            .expect("lock")
                            .get_or_insert(RunError::ItemFailed { image_id: id.to_string(), reason: e.to_string() });
                        break;
                    }
                    Err(e) => {
                        log::warn!("generation failed for {id}: {e}");
                        Slot::Failed(e.to_string())
                    }
                };
                slots.lock().expect("lock").insert(*idx, slot);
            });
        }
    });

    if let Some(err) = fatal.into_inner().expect("lock") {
        return Err(err);
    }
    let ids: BTreeMap<usize, &str> = work.iter().map(|(idx, id, _)| (*idx, *id)).collect();
    for (idx, slot) in slots.into_inner().expect("lock") {
        match slot {
            Slot::Done(rec) => outcome.records.push(rec),
            Slot::Failed(reason) => outcome.failures.push(ItemFailure { image_id: ids[&idx].to_owned(), reason }),
        }
    }
    let order: BTreeMap<&str, usize> =
        prepared.corpus.entries().iter().enumerate().map(|(i, e)| (e.image_id.as_str(), i)).collect();
    outcome.failures.sort_by_key(|f| order[f.image_id.as_str()]);
    Ok(outcome)
}

/// Scores `(image_id, caption)` candidates against the corpus gold captions
/// (one reference per image). The DF table comes from every caption of
/// `corpus`, or of `df_corpus` when given.
pub fn score_candidates(
    candidates: &[(String, String)],
    corpus: &Corpus,
    df_corpus: Option<&Corpus>,
    config: &CiderConfig,
) -> Result<CiderReport, RunError> {
    config.validate()?;
    let gold: BTreeMap<&str, &str> = corpus.entries().iter().map(|e| (e.image_id.as_str(), e.caption.as_str())).collect();
    let mut pairs = Vec::with_capacity(candidates.len());
    for (id, caption) in candidates {
        let reference = gold.get(id.as_str()).ok_or_else(|| RunError::UnknownImage(id.clone()))?;
        pairs.push(ScoringPair {
            image_id: id.clone(),
            candidate: tokenize(caption),
            references: vec![tokenize(reference)],
        });
    }
    let df_source = df_corpus.unwrap_or(corpus);
    let refs: Vec<(String, [crate::textnorm::TokenSeq; 1])> = df_source
        .entries()
        .iter()
        .map(|e| (e.image_id.clone(), [tokenize(&e.caption)]))
        .collect();
    let df = build_df_table(refs.iter().map(|(id, r)| (id.as_str(), r.iter())), config.max_n)?;
    Ok(corpus_cider_with_df(&pairs, &df, config)?)
}

pub fn run_scoring(records: &[GenerationRecord], prepared: &Prepared) -> Result<CiderReport, RunError> {
    let candidates: Vec<(String, String)> = records.iter().map(|r| (r.image_id.clone(), r.caption.clone())).collect();
    score_candidates(&candidates, &prepared.corpus, prepared.df_corpus.as_ref(), &prepared.cider)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub generated: usize,
    pub cached: usize,
    pub failed: usize,
    /// Absent for generation-only runs.
    pub scored: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub corpus_digest: String,
    pub counts: Counts,
    pub failed_items: Vec<ItemFailure>,
    pub truncated_items: Vec<TruncatedItem>,
    pub wall_time_ms: u64,
    pub report_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    LineRecords,
}

/// Summary line of the line-records report format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub label: String,
    pub corpus_digest: String,
    pub n_items: usize,
    pub corpus_mean: f64,
    pub per_order_means: Vec<f64>,
    pub config: CiderConfig,
    pub tokenizer: String,
    pub df_provenance: String,
    pub empty_candidates: Vec<String>,
    pub failed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum ReportLine {
    Summary(ReportSummary),
    Item { image_id: String, score: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRun {
    pub summary: ReportSummary,
    pub per_item: BTreeMap<String, f64>,
}

impl ScoredRun {
    pub fn new(report: &CiderReport, label: &str, corpus_digest: &str, failed: Vec<String>) -> Self {
        Self {
            summary: ReportSummary {
                label: label.to_owned(),
                corpus_digest: corpus_digest.to_owned(),
                n_items: report.per_item.len(),
                corpus_mean: report.corpus_mean,
                per_order_means: report.per_order_means.clone(),
                config: report.config.clone(),
                tokenizer: report.tokenizer.clone(),
                df_provenance: report.df_provenance.clone(),
                empty_candidates: report.empty_candidates.clone(),
                failed,
            },
            per_item: report.per_item.clone(),
        }
    }
}

pub fn emit_report(report: &CiderReport, manifest: &RunManifest, format: ReportFormat) -> String {
    let failed = manifest.failed_items.iter().map(|f| f.image_id.clone()).collect();
    let run = ScoredRun::new(report, &manifest.config.label, &manifest.corpus_digest, failed);
    render(&[run], format)
}

pub fn render(runs: &[ScoredRun], format: ReportFormat) -> String {
    match format {
        ReportFormat::Table => render_table(runs),
        ReportFormat::LineRecords => runs.iter().map(line_records).collect(),
    }
}

fn line_records(run: &ScoredRun) -> String {
    let mut out = serde_json::to_string(&ReportLine::Summary(run.summary.clone())).expect("serializes");
    out.push('\n');
    for (id, score) in &run.per_item {
        let line = ReportLine::Item { image_id: id.clone(), score: *score };
        out.push_str(&serde_json::to_string(&line).expect("serializes"));
        out.push('\n');
    }
    out
}

/// Rows sorted by descending score, then a provenance footer.
fn render_table(runs: &[ScoredRun]) -> String {
    let mut rows: Vec<&ScoredRun> = runs.iter().collect();
    rows.sort_by(|a, b| {
        b.summary
            .corpus_mean
            .total_cmp(&a.summary.corpus_mean)
            .then_with(|| a.summary.label.cmp(&b.summary.label))
    });
    let width = rows.iter().map(|r| r.summary.label.chars().count()).max().unwrap_or(0).max("Model".len());
    let mut out = format!("{:<width$}  CIDEr\n", "Model");
    for r in &rows {
        out.push_str(&format!("{:<width$}  {:.2}\n", r.summary.label, r.summary.corpus_mean));
    }
    if let Some(first) = rows.first() {
        let c = &first.summary.config;
        let weights: Vec<String> = c.weights.iter().map(|w| format!("{w}")).collect();
        out.push_str(&format!(
            "\n# sigma={} max_n={} weights=[{}] log={} tokenizer={}\n",
            c.sigma,
            c.max_n,
            weights.join(","),
            serde_json::to_value(c.log_base).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(),
            first.summary.tokenizer
        ));
        out.push_str(&format!("# df={}\n", first.summary.df_provenance));
        for r in &rows {
            out.push_str(&format!(
                "# {}: corpus={} items={} failed={} empty={}\n",
                r.summary.label,
                r.summary.corpus_digest,
                r.summary.n_items,
                r.summary.failed.len(),
                r.summary.empty_candidates.len()
            ));
        }
    }
    out
}

/// Parses the line-records format back. A file may hold several runs, each
/// introduced by its summary line.
pub fn parse_line_records(text: &str) -> Result<Vec<ScoredRun>, RunError> {
    let mut runs: Vec<ScoredRun> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parsed: ReportLine = serde_json::from_str(line)
            .map_err(|e| RunError::MalformedReport { line: i + 1, reason: e.to_string() })?;
        match parsed {
            ReportLine::Summary(summary) => runs.push(ScoredRun { summary, per_item: BTreeMap::new() }),
            ReportLine::Item { image_id, score } => {
                let run = runs.last_mut().ok_or_else(|| RunError::MalformedReport {
                    line: i + 1,
                    reason: "item before any summary".into(),
                })?;
                run.per_item.insert(image_id, score);
            }
        }
    }
    Ok(runs)
}

/// Combines runs into one table. Runs must share metric config, tokenizer and DF table.
pub fn merge_reports(runs: &[ScoredRun]) -> Result<String, RunError> {
    let Some(first) = runs.first() else {
        return Err(RunError::Incomparable("no reports given".into()));
    };
    for r in &runs[1..] {
        let (a, b) = (&first.summary, &r.summary);
        if a.config != b.config {
            return Err(RunError::Incomparable(format!("metric config of {:?} differs from {:?}", b.label, a.label)));
        }
        if a.tokenizer != b.tokenizer {
            return Err(RunError::Incomparable(format!("tokenizer of {:?} differs from {:?}", b.label, a.label)));
        }
        if a.df_provenance != b.df_provenance {
            return Err(RunError::Incomparable(format!("DF table of {:?} differs from {:?}", b.label, a.label)));
        }
    }
    Ok(render(runs, ReportFormat::Table))
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let io = |source| RunError::Io { path: path.to_owned(), source };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub const GENERATIONS_FILE: &str = "generations.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const TABLE_FILE: &str = "report.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug)]
pub struct EvalOutcome {
    pub report: Option<CiderReport>,
    pub manifest: RunManifest,
}

impl EvalOutcome {
    pub fn has_failures(&self) -> bool {
        self.manifest.counts.failed > 0
    }
}

/// Runs generation and, when `score` is set, scoring; writes all artifacts
/// into the output directory. Nothing is written on configuration or
/// authentication errors.
pub fn run_eval(prepared: &Prepared, backend: Arc<dyn Backend>, score: bool) -> Result<EvalOutcome, RunError> {
    let started = Instant::now();
    let client = prepared.client(backend);
    let generation = run_generation(prepared, &client)?;
    let out = &prepared.config.output_dir;

    let mut generations = String::new();
    for rec in &generation.records {
        generations.push_str(&serde_json::to_string(rec).expect("record serializes"));
        generations.push('\n');
    }
    write_atomic(&out.join(GENERATIONS_FILE), generations.as_bytes())?;

    let mut counts = generation.counts();
    let mut manifest = RunManifest {
        config: prepared.config.clone(),
        corpus_digest: prepared.corpus.source_digest().to_owned(),
        counts,
        failed_items: generation.failures.clone(),
        truncated_items: generation.truncations.clone(),
        wall_time_ms: 0,
        report_path: None,
    };

    let report = if score && !generation.records.is_empty() {
        let report = run_scoring(&generation.records, prepared)?;
        counts.scored = Some(report.per_item.len());
        manifest.counts = counts;
        write_atomic(&out.join(SCORES_FILE), emit_report(&report, &manifest, ReportFormat::LineRecords).as_bytes())?;
        write_atomic(&out.join(TABLE_FILE), emit_report(&report, &manifest, ReportFormat::Table).as_bytes())?;
        manifest.report_path = Some(out.join(SCORES_FILE));
        Some(report)
    } else {
        if score {
            counts.scored = Some(0);
            manifest.counts = counts;
        }
        None
    };

    manifest.wall_time_ms = started.elapsed().as_millis() as u64;
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&out.join(MANIFEST_FILE), &json)?;
    Ok(EvalOutcome { report, manifest })
}

/// Ids that appear more than once; used to reject candidate files.
pub fn duplicate_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut seen = HashSet::new();
    ids.into_iter().filter(|id| !seen.insert(*id)).map(str::to_owned).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genclient::BackendError;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn corpus_text() -> String {
        [
            ("t1", "alpha bravo charlie delta", "Alpha desc."),
            ("t2", "echo foxtrot golf hotel", "Echo desc."),
            ("t3", "india juliet kilo lima", "India desc."),
        ]
        .iter()
        .map(|(id, cap, desc)| {
            serde_json::json!({"image_id": id, "article_id": "a", "description": desc,
                "context": "Some context.", "caption": cap, "split": "test"})
            .to_string()
                + "\n"
        })
        .collect()
    }

    fn config(dir: &Path, backend: BackendKind) -> RunConfig {
        write(dir, "c.jsonl", &corpus_text());
        let text = format!(
            "label = \"m\"\ncorpus = \"c.jsonl\"\noutput_dir = \"out\"\n[generation]\nbackend = \"{}\"\nmodel_id = \"m\"\nretry = {{ max_attempts = 2, base_delay_ms = 0 }}\n",
            serde_json::to_value(backend).unwrap().as_str().unwrap()
        );
        let path = write(dir, "run.toml", &text);
        RunConfig::load(&path).unwrap()
    }

    struct FailOn(&'static str, BackendError);

    impl Backend for FailOn {
        fn complete(&self, r: &GenerationRequest) -> Result<String, BackendError> {
            if r.prompt.contains(self.0) {
                Err(self.1.clone())
            } else {
                Ok("a caption\n".into())
            }
        }
    }

    #[test]
    fn echo_generation_and_rerun_cached() {
        let dir = tempfile::tempdir().unwrap();
        let prepared = prepare(&config(dir.path(), BackendKind::Echo)).unwrap();
        let first = run_eval(&prepared, prepared.backend().unwrap(), true).unwrap();
        assert_eq!(first.manifest.counts, Counts { generated: 3, cached: 0, failed: 0, scored: Some(3) });
        let second = run_eval(&prepared, prepared.backend().unwrap(), true).unwrap();
        assert_eq!(second.manifest.counts, Counts { generated: 0, cached: 3, failed: 0, scored: Some(3) });
        assert_eq!(first.report, second.report);
    }

    #[test]
    fn skip_and_flag_counts_failures() {
        let dir = tempfile::tempdir().unwrap();
        let prepared = prepare(&config(dir.path(), BackendKind::Echo)).unwrap();
        let backend = Arc::new(FailOn("Echo desc.", BackendError::Transient("503".into())));
        let out = run_eval(&prepared, backend, true).unwrap();
        assert_eq!(out.manifest.counts, Counts { generated: 2, cached: 0, failed: 1, scored: Some(2) });
        assert_eq!(out.manifest.failed_items[0].image_id, "t2");
        assert!(out.report.unwrap().per_item.keys().eq(["t1", "t3"]));
    }

    #[test]
    fn abort_policy_stops_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path(), BackendKind::Echo);
        cfg.failure_policy = FailurePolicy::Abort;
        let prepared = prepare(&cfg).unwrap();
        let backend = Arc::new(FailOn("Echo desc.", BackendError::Permanent("bad".into())));
        assert!(matches!(run_eval(&prepared, backend, true), Err(RunError::ItemFailed { .. })));
    }

    #[test]
    fn auth_failure_aborts_without_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let prepared = prepare(&config(dir.path(), BackendKind::Echo)).unwrap();
        let backend = Arc::new(FailOn("desc.", BackendError::Auth("401".into())));
        assert!(matches!(run_eval(&prepared, backend, true), Err(RunError::Auth { .. })));
        assert!(!prepared.config.output_dir.join(SCORES_FILE).exists());
        assert!(!prepared.config.output_dir.join(MANIFEST_FILE).exists());
    }

    #[test]
    fn prepare_reports_all_problems() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path(), BackendKind::FixedMap);
        cfg.corpus = dir.path().join("missing.jsonl");
        cfg.metric.sigma = 0.0;
        let Err(RunError::Config(problems)) = prepare(&cfg) else { panic!() };
        assert_eq!(problems.len(), 3, "{problems:?}");
    }

    #[test]
    fn http_backend_needs_key() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path(), BackendKind::CompletionHttp);
        cfg.generation.http = Some(HttpSettings {
            endpoint: "http://127.0.0.1:9/".into(),
            api_key_env: Some("CAPEVAL_TEST_UNSET_KEY".into()),
            timeout_secs: 1,
            mapping: HttpMapping::default(),
        });
        let prepared = prepare(&cfg).unwrap();
        assert!(matches!(prepared.backend(), Err(RunError::Config(_))));
    }

    #[test]
    fn table_rows() {
        let dir = tempfile::tempdir().unwrap();
        let prepared = prepare(&config(dir.path(), BackendKind::Echo)).unwrap();
        let mut report = score_candidates(
            &[("t1".into(), "alpha bravo charlie delta".into())],
            &prepared.corpus,
            None,
            &prepared.cider,
        )
        .unwrap();
        report.corpus_mean = 7.5;
        let run = ScoredRun::new(&report, "model-label", "digest", vec![]);
        let table = render(std::slice::from_ref(&run), ReportFormat::Table);
        assert!(table.lines().any(|l| l == "model-label  7.50"), "{table}");

        let mut other = run.clone();
        other.summary.label = "b".into();
        other.summary.corpus_mean = 9.0;
        let merged = merge_reports(&[run.clone(), other.clone()]).unwrap();
        let rows: Vec<&str> = merged.lines().skip(1).take(2).collect();
        assert_eq!(rows, ["b            9.00", "model-label  7.50"]);

        other.summary.config.sigma = 1.0;
        assert!(matches!(merge_reports(&[run.clone(), other]), Err(RunError::Incomparable(_))));

        let text = render(std::slice::from_ref(&run), ReportFormat::LineRecords);
        assert_eq!(parse_line_records(&text).unwrap(), vec![run]);
    }

    #[test]
    fn unknown_candidate_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let prepared = prepare(&config(dir.path(), BackendKind::Echo)).unwrap();
        let err = score_candidates(&[("nope".into(), "x".into())], &prepared.corpus, None, &prepared.cider).unwrap_err();
        assert!(matches!(err, RunError::UnknownImage(id) if id == "nope"));
    }
}
