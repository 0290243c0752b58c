//! Corpora of `(description, context, caption)` records.
//!
//! The canonical on-disk format is UTF-8 JSON lines with the fields
//! `image_id`, `article_id`, `description`, `context`, `caption`, `split`.
//! [`CorpusFormat::ConcadiaAdapter`] reads the upstream Concadia release
//! (a single JSON document with an `images` array) into the same records.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::textnorm::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub image_id: String,
    pub article_id: String,
    pub description: String,
    pub context: String,
    pub caption: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    entries: Vec<CorpusEntry>,
    source_digest: String,
}

impl Corpus {
    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn source_digest(&self) -> &str {
        &self.source_digest
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&CorpusEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    /// Canonical JSON-lines serialization, one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    #[default]
    CanonicalJsonl,
    ConcadiaAdapter,
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "canonical-jsonl" => Ok(Self::CanonicalJsonl),
            "concadia-adapter" => Ok(Self::ConcadiaAdapter),
            other => Err(format!("unknown corpus format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordProblem {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("duplicate image_id {0:?}")]
    DuplicateId(String),
    #[error("{0}")]
    UnknownSplit(String),
    #[error("empty {0}")]
    EmptyField(&'static str),
}

/// A problem with one record; `line` is 1-based (the array index + 1 for the adapter).
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("record {line}: {problem}")]
pub struct RecordError {
    pub line: usize,
    pub problem: RecordProblem,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus is not valid UTF-8: {0}")]
    Encoding(#[from] std::str::Utf8Error),
    #[error("corpus document is malformed: {0}")]
    Document(String),
    #[error("{} invalid record(s); first: {}", .0.len(), .0[0])]
    Invalid(Vec<RecordError>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParseOptions {
    pub format: CorpusFormat,
    /// Fail on any invalid record instead of skipping it.
    pub strict: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self { format: CorpusFormat::CanonicalJsonl, strict: true }
    }
}

#[derive(Debug, Clone)]
pub struct Parsed {
    pub corpus: Corpus,
    /// Records skipped in lenient mode, plus notices such as an empty input.
    pub warnings: Vec<String>,
}

pub fn parse_corpus(source: &[u8], options: ParseOptions) -> Result<Parsed, CorpusError> {
    let text = std::str::from_utf8(source)?;
    let raw = match options.format {
        CorpusFormat::CanonicalJsonl => canonical_records(text),
        CorpusFormat::ConcadiaAdapter => concadia_records(text)?,
    };

    let mut entries = Vec::with_capacity(raw.len());
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    for (line, rec) in raw {
        match rec.and_then(validate) {
            Ok(entry) => {
                if seen.insert(entry.image_id.clone()) {
                    entries.push(entry);
                } else {
                    errors.push(RecordError { line, problem: RecordProblem::DuplicateId(entry.image_id) });
                }
            }
            Err(problem) => errors.push(RecordError { line, problem }),
        }
    }

    if options.strict && !errors.is_empty() {
        return Err(CorpusError::Invalid(errors));
    }
    let mut warnings: Vec<String> = errors.iter().map(|e| format!("skipped {e}")).collect();
    if entries.is_empty() && errors.is_empty() {
        warnings.push("corpus contains no records".to_owned());
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(Parsed {
        corpus: Corpus { entries, source_digest: sha256_hex(source) },
        warnings,
    })
}

#[derive(Deserialize)]
struct RawRecord {
    image_id: String,
    article_id: String,
    description: String,
    #[serde(default)]
    context: String,
    caption: String,
    split: String,
}

type Numbered = Vec<(usize, Result<RawRecord, RecordProblem>)>;

fn canonical_records(text: &str) -> Numbered {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let rec = serde_json::from_str::<RawRecord>(l).map_err(|e| RecordProblem::Malformed(e.to_string()));
            (i + 1, rec)
        })
        .collect()
}

/// Concadia text fields appear either as plain strings or as `{"raw": ..., "tokens": [...]}`.
#[derive(Deserialize)]
#[serde(untagged)]
enum ConcadiaText {
    Plain(String),
    Annotated { raw: String },
}

impl ConcadiaText {
    fn into_string(self) -> String {
        match self {
            ConcadiaText::Plain(s) | ConcadiaText::Annotated { raw: s } => s,
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum IdValue {
    Text(String),
    Number(serde_json::Number),
}

impl IdValue {
    fn into_string(self) -> String {
        match self {
            IdValue::Text(s) => s,
            IdValue::Number(n) => n.to_string(),
        }
    }
}

#[derive(Deserialize)]
struct ConcadiaImage {
    #[serde(alias = "image_id")]
    filename: String,
    article_id: IdValue,
    split: String,
    description: ConcadiaText,
    caption: ConcadiaText,
    #[serde(default)]
    context: Option<ConcadiaText>,
}

#[derive(Deserialize)]
struct ConcadiaDocument {
    images: Vec<serde_json::Value>,
}

fn concadia_records(text: &str) -> Result<Numbered, CorpusError> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let doc: ConcadiaDocument = serde_json::from_str(text).map_err(|e| CorpusError::Document(e.to_string()))?;
    Ok(doc
        .images
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let rec = serde_json::from_value::<ConcadiaImage>(v)
                .map(|img| RawRecord {
                    image_id: img.filename,
                    article_id: img.article_id.into_string(),
                    description: img.description.into_string(),
                    context: img.context.map(ConcadiaText::into_string).unwrap_or_default(),
                    caption: img.caption.into_string(),
                    split: match img.split.as_str() {
                        "dev" | "valid" | "validation" => "val".to_owned(),
                        _ => img.split,
                    },
                })
                .map_err(|e| RecordProblem::Malformed(e.to_string()));
            (i + 1, rec)
        })
        .collect())
}

fn validate(raw: RawRecord) -> Result<CorpusEntry, RecordProblem> {
    let split = raw.split.parse().map_err(RecordProblem::UnknownSplit)?;
    if raw.image_id.trim().is_empty() {
        return Err(RecordProblem::EmptyField("image_id"));
    }
    if raw.caption.trim().is_empty() {
        return Err(RecordProblem::EmptyField("caption"));
    }
    if raw.description.trim().is_empty() {
        return Err(RecordProblem::EmptyField("description"));
    }
    Ok(CorpusEntry {
        image_id: raw.image_id,
        article_id: raw.article_id,
        description: raw.description,
        context: raw.context,
        caption: raw.caption,
        split,
    })
}

/// Entries of one split, in corpus order. The digest gains a `#<split>` tag
/// unless it already ends with that tag.
pub fn filter_split(corpus: &Corpus, split: Split) -> Corpus {
    let tag = format!("#{split}");
    let source_digest = if corpus.source_digest.ends_with(&tag) {
        corpus.source_digest.clone()
    } else {
        format!("{}{}", corpus.source_digest, tag)
    };
    Corpus {
        entries: corpus.entries.iter().filter(|e| e.split == split).cloned().collect(),
        source_digest,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitStats {
    pub split: Split,
    pub n_entries: usize,
    pub n_articles: usize,
    /// `None` for an empty split.
    pub mean_caption_tokens: Option<f64>,
    pub mean_description_tokens: Option<f64>,
}

/// Per-split counts and mean token lengths, for all three splits in
/// train/val/test order. Lengths use [`tokenize`].
pub fn corpus_stats(corpus: &Corpus) -> Vec<SplitStats> {
    #[derive(Default)]
    struct Acc<'a> {
        n: usize,
        articles: BTreeSet<&'a str>,
        caption_tokens: usize,
        description_tokens: usize,
    }
    let mut acc: BTreeMap<Split, Acc> = BTreeMap::new();
    for e in &corpus.entries {
        let a = acc.entry(e.split).or_default();
        a.n += 1;
        a.articles.insert(&e.article_id);
        a.caption_tokens += tokenize(&e.caption).len();
        a.description_tokens += tokenize(&e.description).len();
    }
    Split::ALL
        .iter()
        .map(|&split| match acc.get(&split) {
            Some(a) => SplitStats {
                split,
                n_entries: a.n,
                n_articles: a.articles.len(),
                mean_caption_tokens: Some(a.caption_tokens as f64 / a.n as f64),
                mean_description_tokens: Some(a.description_tokens as f64 / a.n as f64),
            },
            None => SplitStats {
                split,
                n_entries: 0,
                n_articles: 0,
                mean_caption_tokens: None,
                mean_description_tokens: None,
            },
        })
        .collect()
}
