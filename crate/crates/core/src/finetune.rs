//! Training-subset sampling and prompt/completion export.

use serde::Serialize;
use thiserror::Error;

use crate::corpus::{Corpus, CorpusEntry, Split};
use crate::promptgen::{fit_budget, BudgetPolicy, PromptTemplate};

/// Stop marker appended to every exported completion; generation stops on it too.
pub const STOP_MARKER: &str = "\n";

#[derive(Debug, Error, PartialEq)]
pub enum FinetuneError {
    #[error("requested {k} examples but the training split has {available}")]
    TooMany { k: usize, available: usize },
    #[error("prompts exceed the budget for: {}", .0.join(", "))]
    OverBudget(Vec<String>),
}

/// splitmix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform-ish index in `0..bound` from the high half of a 128-bit product.
    pub fn below(&mut self, bound: usize) -> usize {
        ((u128::from(self.next_u64()) * bound as u128) >> 64) as usize
    }
}

/// Draws `k` training entries: sort by `image_id`, Fisher–Yates with
/// [`SplitMix64`] seeded by `seed`, keep the first `k`.
pub fn sample_training_subset(corpus: &Corpus, k: usize, seed: u64) -> Result<Vec<CorpusEntry>, FinetuneError> {
    let mut pool: Vec<&CorpusEntry> = corpus.entries().iter().filter(|e| e.split == Split::Train).collect();
    if k > pool.len() {
        return Err(FinetuneError::TooMany { k, available: pool.len() });
    }
    pool.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let mut rng = SplitMix64::new(seed);
    for i in (1..pool.len()).rev() {
        let j = rng.below(i + 1);
        pool.swap(i, j);
    }
    Ok(pool.into_iter().take(k).cloned().collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FinetunePair {
    pub prompt: String,
    pub completion: String,
}

pub fn finetune_pair(entry: &CorpusEntry, template: &PromptTemplate, policy: &BudgetPolicy) -> Result<FinetunePair, String> {
    let fitted = fit_budget(entry, template, policy).map_err(|_| entry.image_id.clone())?;
    Ok(FinetunePair {
        prompt: fitted.text,
        completion: format!(" {}{STOP_MARKER}", entry.caption.trim()),
    })
}

/// One JSON object per line with `prompt` and `completion`, in input order.
pub fn export_pairs(entries: &[CorpusEntry], template: &PromptTemplate, policy: &BudgetPolicy) -> Result<Vec<u8>, FinetuneError> {
    let mut out = Vec::new();
    let mut offenders = Vec::new();
    for entry in entries {
        match finetune_pair(entry, template, policy) {
            Ok(pair) => {
                serde_json::to_writer(&mut out, &pair).expect("pair serializes");
                out.push(b'\n');
            }
            Err(id) => offenders.push(id),
        }
    }
    if offenders.is_empty() {
        Ok(out)
    } else {
        Err(FinetuneError::OverBudget(offenders))
    }
}
