//! CIDEr consensus metric.
//!
//! For a sentence `s` and an n-gram `w` of order `n`, the TF-IDF weight is
//!
//! ```text
//! g_w(s) = h_w(s) / sum_l h_l(s) * ln(|I| / df(w))
//! ```
//!
//! where `h` counts occurrences at that order, `|I|` is the number of images
//! contributing reference sets and `df(w)` the number of images whose
//! references contain `w` at least once. `CIDEr_n` is the mean cosine between
//! the candidate vector and each reference vector, and the combined score is
//! `sigma * sum_n w_n * CIDEr_n`.
//!
//! Conventions that are not pinned by the metric's definition:
//! - natural logarithm;
//! - an n-gram missing from the DF table is treated as `df = 1`;
//! - a cosine involving a zero-magnitude vector is 0;
//! - no CIDEr-D clipping or length penalty.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::textnorm::{ngram_profile, NGramProfile, TokenSeq, DEFAULT_MAX_N, TOKENIZER_ID};

pub const DEFAULT_SIGMA: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum CiderError {
    #[error("no images supplied for the document-frequency table")]
    NoImages,
    #[error("image {0:?} has an empty reference set")]
    EmptyReferences(String),
    #[error("duplicate image id {0:?}")]
    DuplicateImage(String),
    #[error("nothing to score")]
    NoPairs,
    #[error("document-frequency table covers orders up to {table}, metric needs {needed}")]
    OrderMismatch { table: usize, needed: usize },
    #[error("invalid metric configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LogBase {
    #[default]
    Natural,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiderConfig {
    pub max_n: usize,
    pub weights: Vec<f64>,
    pub sigma: f64,
    pub log_base: LogBase,
    /// Reserved for the CIDEr-D variant; must stay `false`.
    pub cider_d: bool,
}

impl Default for CiderConfig {
    fn default() -> Self {
        Self::uniform(DEFAULT_MAX_N, DEFAULT_SIGMA)
    }
}

impl CiderConfig {
    /// Uniform weights `1/max_n`.
    pub fn uniform(max_n: usize, sigma: f64) -> Self {
        let w = if max_n == 0 { 0.0 } else { 1.0 / max_n as f64 };
        Self {
            max_n,
            weights: vec![w; max_n],
            sigma,
            log_base: LogBase::Natural,
            cider_d: false,
        }
    }

    pub fn validate(&self) -> Result<(), CiderError> {
        if self.max_n == 0 {
            return Err(CiderError::InvalidConfig("max_n must be at least 1".into()));
        }
        if self.weights.len() != self.max_n {
            return Err(CiderError::InvalidConfig(format!(
                "{} weights given for max_n = {}",
                self.weights.len(),
                self.max_n
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(CiderError::InvalidConfig("weights must be finite and nonnegative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if total > 1.0 + 1e-9 {
            return Err(CiderError::InvalidConfig(format!("weights sum to {total}, above 1")));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(CiderError::InvalidConfig("sigma must be positive".into()));
        }
        if self.cider_d {
            return Err(CiderError::InvalidConfig("the CIDEr-D variant is not implemented".into()));
        }
        Ok(())
    }
}

/// Document frequencies over reference sets, one entry per order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DfTable {
    n_images: usize,
    by_order: Vec<BTreeMap<String, u32>>,
}

impl DfTable {
    pub fn n_images(&self) -> usize {
        self.n_images
    }

    pub fn max_n(&self) -> usize {
        self.by_order.len()
    }

    /// Stored document frequency, 0 when the n-gram never occurs in a reference.
    pub fn df(&self, n: usize, gram: &str) -> u32 {
        n.checked_sub(1)
            .and_then(|i| self.by_order.get(i))
            .and_then(|m| m.get(gram))
            .copied()
            .unwrap_or(0)
    }

    /// `ln(|I| / max(df, 1))`.
    pub fn idf(&self, n: usize, gram: &str) -> f64 {
        let df = self.df(n, gram).max(1);
        (self.n_images as f64 / f64::from(df)).ln()
    }

    pub fn entries(&self, n: usize) -> impl Iterator<Item = (&str, u32)> {
        n.checked_sub(1)
            .and_then(|i| self.by_order.get(i))
            .into_iter()
            .flat_map(|m| m.iter().map(|(k, v)| (k.as_str(), *v)))
    }

    /// Content digest identifying the table in reports.
    pub fn digest(&self) -> String {
        let mut buf = format!("df-table/v1\nimages {}\n", self.n_images);
        for (i, m) in self.by_order.iter().enumerate() {
            for (gram, count) in m {
                let _ = writeln!(buf, "{}\t{}\t{}", i + 1, gram, count);
            }
        }
        sha256_hex(buf)
    }
}

/// Builds document frequencies for orders `1..=max_n`. Each image counts at
/// most once per n-gram no matter how many of its references contain it.
pub fn build_df_table<'a, I, R>(reference_sets: I, max_n: usize) -> Result<DfTable, CiderError>
where
    I: IntoIterator<Item = (&'a str, R)>,
    R: IntoIterator<Item = &'a TokenSeq>,
{
    if max_n == 0 {
        return Err(CiderError::InvalidConfig("max_n must be at least 1".into()));
    }
    let mut by_order = vec![BTreeMap::<String, u32>::new(); max_n];
    let mut n_images = 0usize;
    for (image_id, refs) in reference_sets {
        let mut seen: Vec<BTreeSet<String>> = vec![BTreeSet::new(); max_n];
        let mut n_refs = 0usize;
        for r in refs {
            n_refs += 1;
            let profile = ngram_profile(r, max_n);
            for (n, grams) in seen.iter_mut().enumerate() {
                if let Some(counts) = profile.order(n + 1) {
                    grams.extend(counts.keys().cloned());
                }
            }
        }
        if n_refs == 0 {
            return Err(CiderError::EmptyReferences(image_id.to_owned()));
        }
        n_images += 1;
        for (table, grams) in by_order.iter_mut().zip(seen) {
            for g in grams {
                *table.entry(g).or_insert(0) += 1;
            }
        }
    }
    if n_images == 0 {
        return Err(CiderError::NoImages);
    }
    Ok(DfTable { n_images, by_order })
}

/// Sparse TF-IDF weights for one sentence at one order.
#[derive(Debug, Clone, PartialEq)]
pub struct TfIdfVector {
    pub order: usize,
    pub weights: BTreeMap<String, f64>,
}

impl TfIdfVector {
    pub fn norm_sq(&self) -> f64 {
        self.weights.values().map(|w| w * w).sum()
    }

    pub fn get(&self, gram: &str) -> f64 {
        self.weights.get(gram).copied().unwrap_or(0.0)
    }
}

pub fn tfidf_vector(profile: &NGramProfile, n: usize, df: &DfTable) -> TfIdfVector {
    let total = profile.total(n);
    let weights = match profile.order(n) {
        Some(counts) if total > 0 => counts
            .iter()
            .map(|(gram, &h)| {
                let tf = f64::from(h) / total as f64;
                (gram.clone(), tf * df.idf(n, gram))
            })
            .collect(),
        _ => BTreeMap::new(),
    };
    TfIdfVector { order: n, weights }
}

/// Cosine similarity, 0 when either side has zero magnitude.
pub fn cosine(a: &TfIdfVector, b: &TfIdfVector) -> f64 {
    let na = a.norm_sq();
    let nb = b.norm_sq();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let (small, large) = if a.weights.len() <= b.weights.len() { (a, b) } else { (b, a) };
    let dot: f64 = small
        .weights
        .iter()
        .filter_map(|(g, w)| large.weights.get(g).map(|v| w * v))
        .sum();
    // sqrt(x * x) == x for IEEE doubles, so identical vectors give exactly 1.
    (dot / (na * nb).sqrt()).clamp(0.0, 1.0)
}

/// Mean cosine between the candidate and each reference; 0 with no references.
pub fn cider_n(candidate: &TfIdfVector, references: &[TfIdfVector]) -> f64 {
    if references.is_empty() {
        return 0.0;
    }
    let sum: f64 = references.iter().map(|r| cosine(candidate, r)).sum();
    sum / references.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CiderScore {
    /// `sigma * sum_n w_n * CIDEr_n`.
    pub combined: f64,
    /// Unscaled `CIDEr_n` for `n = 1..=max_n`.
    pub per_order: Vec<f64>,
    /// The candidate had no tokens; its score is 0.
    pub empty_candidate: bool,
}

pub fn cider_score(
    candidate: &TokenSeq,
    references: &[TokenSeq],
    df: &DfTable,
    config: &CiderConfig,
) -> Result<CiderScore, CiderError> {
    config.validate()?;
    if df.max_n() < config.max_n {
        return Err(CiderError::OrderMismatch { table: df.max_n(), needed: config.max_n });
    }
    if references.is_empty() {
        return Err(CiderError::EmptyReferences(String::new()));
    }
    Ok(score_unchecked(candidate, references, df, config))
}

fn score_unchecked(
    candidate: &TokenSeq,
    references: &[TokenSeq],
    df: &DfTable,
    config: &CiderConfig,
) -> CiderScore {
    let cand = ngram_profile(candidate, config.max_n);
    let refs: Vec<NGramProfile> = references.iter().map(|r| ngram_profile(r, config.max_n)).collect();
    let per_order: Vec<f64> = (1..=config.max_n)
        .map(|n| {
            let c = tfidf_vector(&cand, n, df);
            let rs: Vec<TfIdfVector> = refs.iter().map(|p| tfidf_vector(p, n, df)).collect();
            cider_n(&c, &rs)
        })
        .collect();
    let weighted: f64 = per_order.iter().zip(&config.weights).map(|(c, w)| c * w).sum();
    CiderScore {
        combined: config.sigma * weighted,
        per_order,
        empty_candidate: candidate.is_empty(),
    }
}

/// One candidate and its references.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringPair {
    pub image_id: String,
    pub candidate: TokenSeq,
    pub references: Vec<TokenSeq>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiderReport {
    pub per_item: BTreeMap<String, f64>,
    pub per_order_means: Vec<f64>,
    pub corpus_mean: f64,
    pub config: CiderConfig,
    pub df_provenance: String,
    pub tokenizer: String,
    /// Items whose candidate had no tokens (scored 0).
    pub empty_candidates: Vec<String>,
}

/// Scores every pair with a DF table built from the pairs' own references.
pub fn corpus_cider(pairs: &[ScoringPair], config: &CiderConfig) -> Result<CiderReport, CiderError> {
    config.validate()?;
    check_unique(pairs)?;
    let df = build_df_table(
        pairs.iter().map(|p| (p.image_id.as_str(), p.references.iter())),
        config.max_n,
    )?;
    corpus_cider_with_df(pairs, &df, config)
}

/// Scores every pair against a caller-supplied DF table.
pub fn corpus_cider_with_df(
    pairs: &[ScoringPair],
    df: &DfTable,
    config: &CiderConfig,
) -> Result<CiderReport, CiderError> {
    config.validate()?;
    check_unique(pairs)?;
    if df.max_n() < config.max_n {
        return Err(CiderError::OrderMismatch { table: df.max_n(), needed: config.max_n });
    }
    if let Some(p) = pairs.iter().find(|p| p.references.is_empty()) {
        return Err(CiderError::EmptyReferences(p.image_id.clone()));
    }

    let scores: Vec<CiderScore> = pairs
        .par_iter()
        .map(|p| score_unchecked(&p.candidate, &p.references, df, config))
        .collect();

    let mut keyed: BTreeMap<&str, &CiderScore> = BTreeMap::new();
    for (p, s) in pairs.iter().zip(&scores) {
        keyed.insert(p.image_id.as_str(), s);
    }
    let count = keyed.len() as f64;
    let mut order_sums = vec![0.0; config.max_n];
    let mut total = 0.0;
    for s in keyed.values() {
        total += s.combined;
        for (acc, v) in order_sums.iter_mut().zip(&s.per_order) {
            *acc += v;
        }
    }
    Ok(CiderReport {
        per_item: keyed.iter().map(|(k, s)| ((*k).to_owned(), s.combined)).collect(),
        per_order_means: order_sums.into_iter().map(|s| s / count).collect(),
        corpus_mean: total / count,
        config: config.clone(),
        df_provenance: df.digest(),
        tokenizer: TOKENIZER_ID.to_owned(),
        empty_candidates: keyed
            .iter()
            .filter(|(_, s)| s.empty_candidate)
            .map(|(k, _)| (*k).to_owned())
            .collect(),
    })
}

fn check_unique(pairs: &[ScoringPair]) -> Result<(), CiderError> {
    if pairs.is_empty() {
        return Err(CiderError::NoPairs);
    }
    let mut seen = BTreeSet::new();
    for p in pairs {
        if !seen.insert(p.image_id.as_str()) {
            return Err(CiderError::DuplicateImage(p.image_id.clone()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textnorm::tokenize;

    fn two_image_df(max_n: usize) -> DfTable {
        let a = [tokenize("the cat sat")];
        let b = [tokenize("a dog ran")];
        build_df_table([("A", a.iter()), ("B", b.iter())], max_n).unwrap()
    }

    #[test]
    fn df_counts_images_not_occurrences() {
        let df = two_image_df(4);
        assert_eq!(df.n_images(), 2);
        assert_eq!(df.df(1, "the"), 1);
        assert_eq!(df.df(1, "cat"), 1);
        assert_eq!(df.df(1, "dog"), 1);
        assert_eq!(df.df(2, "the cat"), 1);
        assert_eq!(df.df(1, "zebra"), 0);

        let refs_a = [tokenize("the the cat"), tokenize("the dog")];
        let refs_b = [tokenize("the end")];
        let df = build_df_table([("A", refs_a.iter()), ("B", refs_b.iter())], 2).unwrap();
        assert_eq!(df.df(1, "the"), 2);
        assert_eq!(df.idf(1, "the"), 0.0);
    }

    #[test]
    fn single_image_everything_is_ubiquitous() {
        let r = [tokenize("one lonely caption")];
        let df = build_df_table([("only", r.iter())], 4).unwrap();
        assert!(df.entries(1).all(|(_, c)| c == 1));
        let v = tfidf_vector(&ngram_profile(&r[0], 4), 1, &df);
        assert!(v.weights.values().all(|&w| w == 0.0));
    }

    #[test]
    fn df_errors() {
        let empty: [TokenSeq; 0] = [];
        assert_eq!(
            build_df_table([("img-7", empty.iter())], 4).unwrap_err(),
            CiderError::EmptyReferences("img-7".into())
        );
        let none: Vec<(&str, std::slice::Iter<TokenSeq>)> = vec![];
        assert_eq!(build_df_table(none, 4).unwrap_err(), CiderError::NoImages);
    }

    #[test]
    fn zero_vector_contributes_nothing() {
        let df = two_image_df(4);
        let short = ngram_profile(&tokenize("the cat"), 4);
        let v3 = tfidf_vector(&short, 3, &df);
        assert!(v3.weights.is_empty());
        let full = tfidf_vector(&ngram_profile(&tokenize("the cat sat"), 4), 3, &df);
        assert_eq!(cosine(&v3, &full), 0.0);
        assert_eq!(cosine(&full, &v3), 0.0);
    }

    #[test]
    fn unknown_candidate_ngram_is_maximally_rare() {
        let df = two_image_df(1);
        assert_eq!(df.idf(1, "zebra"), 2f64.ln());
    }

    #[test]
    fn score_examples() {
        let df = two_image_df(4);
        let cfg = CiderConfig::default();
        let cand = tokenize("the cat sat");
        let s = cider_score(&cand, &[tokenize("the cat sat")], &df, &cfg).unwrap();
        assert_eq!(s.per_order, vec![1.0, 1.0, 1.0, 0.0]);
        assert_eq!(s.combined, 7.5);

        let s1 = cider_score(&cand, &[tokenize("the cat sat")], &df, &CiderConfig::uniform(4, 1.0)).unwrap();
        assert_eq!(s1.combined, 0.75);

        let d = cider_score(&tokenize("a dog ran"), &[tokenize("the cat sat")], &df, &cfg).unwrap();
        assert_eq!(d.combined, 0.0);

        let e = cider_score(&TokenSeq::default(), &[tokenize("the cat sat")], &df, &cfg).unwrap();
        assert!(e.empty_candidate);
        assert_eq!(e.combined, 0.0);
    }

    #[test]
    fn score_rejects_short_table_and_bad_config() {
        let df = two_image_df(2);
        let t = tokenize("the cat");
        assert!(matches!(
            cider_score(&t, std::slice::from_ref(&t), &df, &CiderConfig::default()),
            Err(CiderError::OrderMismatch { table: 2, needed: 4 })
        ));
        let mut cfg = CiderConfig::uniform(2, 10.0);
        cfg.cider_d = true;
        assert!(matches!(cider_score(&t, std::slice::from_ref(&t), &df, &cfg), Err(CiderError::InvalidConfig(_))));
        cfg = CiderConfig::uniform(2, -1.0);
        assert!(cfg.validate().is_err());
        cfg = CiderConfig::uniform(2, 10.0);
        cfg.weights.pop();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn corpus_mean_and_duplicates() {
        let pair = |id: &str, c: &str, r: &str| ScoringPair {
            image_id: id.into(),
            candidate: tokenize(c),
            references: vec![tokenize(r)],
        };
        let pairs = vec![
            pair("a", "alpha beta gamma delta", "alpha beta gamma delta"),
            pair("b", "nothing shared here", "epsilon zeta eta theta"),
        ];
        let report = corpus_cider(&pairs, &CiderConfig::default()).unwrap();
        assert_eq!(report.per_item["a"], 10.0);
        assert_eq!(report.per_item["b"], 0.0);
        assert_eq!(report.corpus_mean, 5.0);
        assert_eq!(report.per_order_means, vec![0.5; 4]);

        let dup = vec![pairs[0].clone(), pairs[0].clone()];
        assert_eq!(
            corpus_cider(&dup, &CiderConfig::default()).unwrap_err(),
            CiderError::DuplicateImage("a".into())
        );
        assert_eq!(corpus_cider(&[], &CiderConfig::default()).unwrap_err(), CiderError::NoPairs);
    }
}
