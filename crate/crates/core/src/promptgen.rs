//! Prompt rendering and context budgeting.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusEntry;

/// The default caption prompt. Newlines are real newline characters and the
/// `" \n. "` spacing after the context is intentional.
pub const DEFAULT_TEMPLATE_TEXT: &str = include_str!("../assets/default_prompt.txt");
pub const DEFAULT_TEMPLATE_NAME: &str = "default";

const DESCRIPTION: &str = "{description}";
const CONTEXT: &str = "{context}";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template {name:?} must contain {placeholder} exactly once (found {found})")]
    Placeholder { name: String, placeholder: &'static str, found: usize },
    #[error("cannot read template {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("invalid budget policy: {0}")]
    Policy(String),
    #[error("prompt for {image_id:?} needs {needed} characters without context, budget is {max_chars}")]
    OverBudget { image_id: String, needed: usize, max_chars: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Description,
    Context,
}

/// A template with exactly one `{description}` and one `{context}` placeholder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    text: String,
    // literals[0] slot[0] literals[1] slot[1] literals[2]
    literals: [String; 3],
    slots: [Slot; 2],
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Result<Self, PromptError> {
        let name = name.into();
        let text = text.into();
        for placeholder in [DESCRIPTION, CONTEXT] {
            let found = text.matches(placeholder).count();
            if found != 1 {
                return Err(PromptError::Placeholder { name, placeholder, found });
            }
        }
        let d = text.find(DESCRIPTION).expect("checked");
        let c = text.find(CONTEXT).expect("checked");
        let (first, first_len, second, second_len, slots) = if d < c {
            (d, DESCRIPTION.len(), c, CONTEXT.len(), [Slot::Description, Slot::Context])
        } else {
            (c, CONTEXT.len(), d, DESCRIPTION.len(), [Slot::Context, Slot::Description])
        };
        let literals = [
            text[..first].to_owned(),
            text[first + first_len..second].to_owned(),
            text[second + second_len..].to_owned(),
        ];
        Ok(Self { name, text, literals, slots })
    }

    pub fn default_template() -> Self {
        Self::new(DEFAULT_TEMPLATE_NAME, DEFAULT_TEMPLATE_TEXT).expect("default template is valid")
    }

    pub fn from_file(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::new(path.display().to_string(), text)
    }

    /// `"default"` selects the built-in template; anything else is a file path.
    pub fn resolve(name_or_path: &str, base: &Path) -> Result<Self, PromptError> {
        if name_or_path == DEFAULT_TEMPLATE_NAME {
            Ok(Self::default_template())
        } else {
            Self::from_file(&base.join(name_or_path))
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Literal text after the last placeholder.
    pub fn trailing_literal(&self) -> &str {
        &self.literals[2]
    }

    /// Recovers the description from a prompt rendered with this template.
    /// Ambiguous when the inserted texts contain the template's literals.
    pub fn description_span<'p>(&self, prompt: &'p str) -> Option<&'p str> {
        let body = prompt.strip_prefix(self.literals[0].as_str())?;
        let body = body.strip_suffix(self.literals[2].as_str())?;
        match self.slots[0] {
            Slot::Description => body.find(self.literals[1].as_str()).map(|i| &body[..i]),
            Slot::Context => body
                .rfind(self.literals[1].as_str())
                .map(|i| &body[i + self.literals[1].len()..]),
        }
    }

    pub(crate) fn render_parts(&self, description: &str, context: &str) -> String {
        let fill = |slot: Slot| match slot {
            Slot::Description => description,
            Slot::Context => context,
        };
        let mut out = String::with_capacity(self.text.len() + description.len() + context.len());
        out.push_str(&self.literals[0]);
        out.push_str(fill(self.slots[0]));
        out.push_str(&self.literals[1]);
        out.push_str(fill(self.slots[1]));
        out.push_str(&self.literals[2]);
        out
    }
}

/// Substitutes the entry's description and context. Inserted text is never re-scanned.
pub fn render_prompt(entry: &CorpusEntry, template: &PromptTemplate) -> String {
    template.render_parts(&entry.description, &entry.context)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetPolicy {
    pub window_tokens: usize,
    pub chars_per_token: f64,
    pub reserve_for_completion: usize,
    /// `floor((window_tokens - reserve_for_completion) * chars_per_token)`.
    pub max_chars: usize,
}

impl BudgetPolicy {
    pub fn for_window(window_tokens: usize, chars_per_token: f64, reserve_for_completion: usize) -> Result<Self, PromptError> {
        if !(chars_per_token.is_finite() && chars_per_token > 0.0) {
            return Err(PromptError::Policy("chars_per_token must be positive".into()));
        }
        if reserve_for_completion >= window_tokens {
            return Err(PromptError::Policy(format!(
                "completion reserve {reserve_for_completion} does not fit a {window_tokens}-token window"
            )));
        }
        let max_chars = ((window_tokens - reserve_for_completion) as f64 * chars_per_token).floor() as usize;
        if max_chars == 0 {
            return Err(PromptError::Policy("budget allows zero characters".into()));
        }
        Ok(Self { window_tokens, chars_per_token, reserve_for_completion, max_chars })
    }
}

impl Default for BudgetPolicy {
    fn default() -> Self {
        Self::for_window(2048, 4.0, 64).expect("valid default")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    pub original_context_chars: usize,
    pub kept_context_chars: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FittedPrompt {
    pub text: String,
    pub truncation: Option<Truncation>,
}

/// Renders the prompt, cutting the context from its end at a whitespace
/// boundary until the prompt fits `policy.max_chars` (counted in chars).
/// The description is never shortened.
pub fn fit_budget(entry: &CorpusEntry, template: &PromptTemplate, policy: &BudgetPolicy) -> Result<FittedPrompt, PromptError> {
    let full = render_prompt(entry, template);
    if full.chars().count() <= policy.max_chars {
        return Ok(FittedPrompt { text: full, truncation: None });
    }
    let fixed = template.render_parts(&entry.description, "").chars().count();
    if fixed > policy.max_chars {
        return Err(PromptError::OverBudget {
            image_id: entry.image_id.clone(),
            needed: fixed,
            max_chars: policy.max_chars,
        });
    }
    let kept = truncate_at_token(&entry.context, policy.max_chars - fixed);
    let truncation = Truncation {
        original_context_chars: entry.context.chars().count(),
        kept_context_chars: kept.chars().count(),
    };
    log::info!(
        "truncated context of {}: {} -> {} chars",
        entry.image_id,
        truncation.original_context_chars,
        truncation.kept_context_chars
    );
    Ok(FittedPrompt {
        text: template.render_parts(&entry.description, kept),
        truncation: Some(truncation),
    })
}

/// Longest whitespace-delimited prefix of `text` with at most `limit` chars,
/// without trailing whitespace.
fn truncate_at_token(text: &str, limit: usize) -> &str {
    let Some((cut, next)) = text.char_indices().nth(limit) else {
        return text.trim_end();
    };
    let head = &text[..cut];
    if next.is_whitespace() {
        return head.trim_end();
    }
    match head.rfind(char::is_whitespace) {
        Some(ws) => head[..ws].trim_end(),
        None => "",
    }
}
