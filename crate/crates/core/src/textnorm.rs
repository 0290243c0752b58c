//! Tokenization and n-gram profiles.
//!
//! One normalization is used everywhere (metric, corpus statistics, exports):
//! lowercase, every Unicode punctuation character becomes a separator, then
//! split on whitespace. Hyphens and apostrophes are punctuation, so
//! `"re-entry"` yields `re`, `entry`. Numerals are kept as tokens.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;

/// Identifier of the tokenizer rule, recorded in report provenance.
pub const TOKENIZER_ID: &str = "lower+unicode-punct-sep+ws/v1";

/// Default maximum n-gram order.
pub const DEFAULT_MAX_N: usize = 4;

static PUNCT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\p{P}").expect("valid regex"));

/// A sequence of lowercase tokens. Tokens never contain whitespace and are never empty.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Tokens joined by single spaces.
    pub fn joined(&self) -> String {
        self.0.join(" ")
    }
}

impl AsRef<[String]> for TokenSeq {
    fn as_ref(&self) -> &[String] {
        &self.0
    }
}

pub fn tokenize(text: &str) -> TokenSeq {
    let lowered = text.to_lowercase();
    let separated = PUNCT.replace_all(&lowered, " ");
    TokenSeq(separated.split_whitespace().map(str::to_owned).collect())
}

/// Counts of contiguous n-grams for every order `1..=max_n`.
///
/// An n-gram is keyed by its tokens joined with a single space; tokens carry
/// no whitespace so the key is unambiguous.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramProfile {
    by_order: Vec<BTreeMap<String, u32>>,
}

impl NGramProfile {
    /// Builds a profile from explicit per-order counts (index 0 is order 1).
    /// Zero counts are dropped.
    pub fn from_counts(by_order: Vec<BTreeMap<String, u32>>) -> Self {
        let by_order = by_order
            .into_iter()
            .map(|m| m.into_iter().filter(|(_, c)| *c > 0).collect())
            .collect();
        Self { by_order }
    }

    pub fn max_n(&self) -> usize {
        self.by_order.len()
    }

    /// Counts at order `n` (1-based). Orders beyond `max_n` are empty.
    pub fn order(&self, n: usize) -> Option<&BTreeMap<String, u32>> {
        n.checked_sub(1).and_then(|i| self.by_order.get(i))
    }

    /// Total number of n-gram occurrences at order `n`.
    pub fn total(&self, n: usize) -> u64 {
        self.order(n)
            .map(|m| m.values().map(|&c| u64::from(c)).sum())
            .unwrap_or(0)
    }

    /// Removes one n-gram at order `n`, returning its former count.
    pub fn remove(&mut self, n: usize, gram: &str) -> Option<u32> {
        n.checked_sub(1)
            .and_then(|i| self.by_order.get_mut(i))
            .and_then(|m| m.remove(gram))
    }
}

/// Extracts contiguous n-grams of every order in `1..=max_n`.
///
/// # Panics
///
/// Panics if `max_n` is zero.
pub fn ngram_profile(tokens: &TokenSeq, max_n: usize) -> NGramProfile {
    assert!(max_n >= 1, "n-gram order must be at least 1");
    let toks = tokens.tokens();
    let by_order = (1..=max_n)
        .map(|n| {
            let mut counts = BTreeMap::new();
            if n <= toks.len() {
                for window in toks.windows(n) {
                    *counts.entry(window.join(" ")).or_insert(0u32) += 1;
                }
            }
            counts
        })
        .collect();
    NGramProfile { by_order }
}
