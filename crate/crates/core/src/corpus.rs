//! Corpus ingestion: normalization, document filtering, sentence splitting,
//! and packing tokenized documents into fixed-length training examples.
//!
//! Normalization follows the preprocessing recipe for Arabic web text:
//! URLs/emails/user mentions become atomic substitution tokens, diacritics
//! and tatweel are deleted, punctuation is padded with spaces, and whitespace
//! is collapsed. English letters pass through without case folding.

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

/// Substitution token for URLs ("link").
pub const URL_TOKEN: &str = "[رابط]";
/// Substitution token for email addresses ("mail").
pub const EMAIL_TOKEN: &str = "[بريد]";
/// Substitution token for user mentions ("user").
pub const MENTION_TOKEN: &str = "[مستخدم]";
/// End-of-document marker appended when packing.
pub const END_OF_TEXT: &str = "<|endoftext|>";

/// One normalized text unit flowing from raw corpus to training stream.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub source: String,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub min_sentences: usize,
    pub max_repeat_fraction: f64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            min_sentences: 3,
            max_repeat_fraction: 0.20,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.min_sentences < 1 {
            return Err(Error::InvalidConfig("min_sentences must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.max_repeat_fraction) {
            return Err(Error::InvalidConfig(
                "max_repeat_fraction must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectReason {
    TooShort,
    Repetitive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterDecision {
    Keep,
    Reject(RejectReason),
}

/// Fixed-length slice of the packed token stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub token_ids: Vec<u32>,
}

// Sentinels (private-use area) protect substitution tokens from the
// punctuation-padding pass.
const URL_SENTINEL: char = '\u{E000}';
const EMAIL_SENTINEL: char = '\u{E001}';
const MENTION_SENTINEL: char = '\u{E002}';

static URL_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?:https?://|www\.)\S+").unwrap());
static EMAIL_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"[\w.+-]+@[\w-]+(?:\.[\w-]+)+").unwrap());
static MENTION_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"@\w+").unwrap());

pub(crate) fn is_diacritic(c: char) -> bool {
    // Arabic tashkeel U+064B..=U+065F, superscript alef U+0670, tatweel U+0640.
    matches!(c, '\u{064B}'..='\u{065F}' | '\u{0670}' | '\u{0640}')
}

/// Apply the full normalization pipeline. Idempotent.
pub fn normalize_text(raw: &str) -> String {
    // Drop private-use sentinels from the input so the protection pass below
    // cannot be spoofed, then shield already-substituted tokens.
    let mut text: String = raw
        .chars()
        .filter(|c| !('\u{E000}'..='\u{F8FF}').contains(c))
        .collect();
    text = text
        .replace(URL_TOKEN, &URL_SENTINEL.to_string())
        .replace(EMAIL_TOKEN, &EMAIL_SENTINEL.to_string())
        .replace(MENTION_TOKEN, &MENTION_SENTINEL.to_string());

    text = URL_RE.replace_all(&text, URL_SENTINEL.to_string()).into_owned();
    text = EMAIL_RE
        .replace_all(&text, EMAIL_SENTINEL.to_string())
        .into_owned();
    text = MENTION_RE
        .replace_all(&text, MENTION_SENTINEL.to_string())
        .into_owned();

    let mut out = String::with_capacity(text.len() + 16);
    for c in text.chars() {
        if is_diacritic(c) {
            continue;
        }
        if c.is_whitespace() {
            out.push(' ');
        } else if matches!(c, URL_SENTINEL | EMAIL_SENTINEL | MENTION_SENTINEL)
            || c.is_alphanumeric()
        {
            out.push(c);
        } else {
            // Pad punctuation and symbols with spaces.
            out.push(' ');
            out.push(c);
            out.push(' ');
        }
    }

    let collapsed: String = out.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .replace(URL_SENTINEL, URL_TOKEN)
        .replace(EMAIL_SENTINEL, EMAIL_TOKEN)
        .replace(MENTION_SENTINEL, MENTION_TOKEN)
}

/// Split on terminal punctuation { . ؟ ! ؛ } and newlines; terminators stay
/// attached to their sentence, empty segments are dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        match c {
            '.' | '؟' | '!' | '؛' => {
                current.push(c);
                push_sentence(&mut sentences, &mut current);
            }
            '\n' => push_sentence(&mut sentences, &mut current),
            _ => current.push(c),
        }
    }
    push_sentence(&mut sentences, &mut current);
    sentences
}

fn push_sentence(sentences: &mut Vec<String>, current: &mut String) {
    let trimmed = current.trim();
    // A bare terminator is not a sentence.
    if !trimmed.is_empty() && trimmed.chars().any(|c| !matches!(c, '.' | '؟' | '!' | '؛')) {
        sentences.push(trimmed.to_string());
    }
    current.clear();
}

/// Fraction of sentences whose exact string occurs more than once.
pub fn repeated_sentence_fraction(sentences: &[String]) -> f64 {
    if sentences.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::HashMap::new();
    for s in sentences {
        *counts.entry(s.as_str()).or_insert(0usize) += 1;
    }
    let repeated = sentences.iter().filter(|s| counts[s.as_str()] > 1).count();
    repeated as f64 / sentences.len() as f64
}

/// Keep-or-reject decision; expects `doc.text` to be normalized already.
pub fn filter_document(doc: &Document, policy: &FilterPolicy) -> FilterDecision {
    let sentences = split_sentences(&doc.text);
    if sentences.len() < policy.min_sentences {
        return FilterDecision::Reject(RejectReason::TooShort);
    }
    if repeated_sentence_fraction(&sentences) > policy.max_repeat_fraction {
        return FilterDecision::Reject(RejectReason::Repetitive);
    }
    FilterDecision::Keep
}

/// Concatenate each document's ids followed by `eot_id` into one stream and
/// emit consecutive non-overlapping chunks of exactly `context` ids. A final
/// partial chunk is dropped.
pub fn pack_examples<I>(docs: I, context: usize, eot_id: u32) -> Vec<TrainingExample>
where
    I: IntoIterator<Item = Vec<u32>>,
{
    assert!(context >= 2, "context must be >= 2");
    let mut examples = Vec::new();
    let mut buf: Vec<u32> = Vec::with_capacity(context);
    for doc in docs {
        for id in doc.into_iter().chain(std::iter::once(eot_id)) {
            buf.push(id);
            if buf.len() == context {
                examples.push(TrainingExample {
                    token_ids: std::mem::take(&mut buf),
                });
                buf.reserve(context);
            }
        }
    }
    examples
}
