//! Zero-shot QA and translation harness: Arabic prompt templates, forced
//! answer lengths, and SQuAD-style EM/F1 scoring.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::is_diacritic;
use crate::error::Error;
use crate::generate::{generate_ids, SamplerConfig};
use crate::model::{ModelConfig, Parameters};
use crate::scalar::Scalar;
use crate::tokenizer::TokenizerModel;
use crate::Result;

pub const QA_PREFIX: &str = "أجب عن السؤال التالي : ";
pub const QA_SUFFIX: &str = " الجواب هو";
pub const QA_YEAR_SUFFIX: &str = " في عام";
pub const TRANSLATION_PREFIX: &str = "ما هي ترجمة هذه الجملة ?: ";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QAItem {
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default)]
    pub year_expected: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Prediction {
    pub question: String,
    pub prediction: String,
    pub exact_match: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub exact_match: f64,
    pub f1: f64,
    pub count: usize,
}

pub fn build_qa_prompt(item: &QAItem) -> Result<String> {
    if item.question.trim().is_empty() {
        return Err(Error::EmptyQuestion);
    }
    let mut prompt = format!("{QA_PREFIX}{}{QA_SUFFIX}", item.question);
    if item.year_expected {
        prompt.push_str(QA_YEAR_SUFFIX);
    }
    Ok(prompt)
}

pub fn build_translation_prompt(source: &str) -> Result<String> {
    if source.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    Ok(format!("{TRANSLATION_PREFIX}{source}"))
}

/// Scoring normalization: drop diacritics and punctuation, lowercase Latin
/// letters, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if is_diacritic(c) {
            continue;
        }
        if c.is_alphanumeric() {
            for lc in c.to_lowercase() {
                out.push(lc);
            }
        } else {
            out.push(' ');
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn exact_match(pred: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(pred);
    if golds.iter().any(|g| normalize_answer(g) == p) {
        1.0
    } else {
        0.0
    }
}

fn f1_single(pred_tokens: &[&str], gold: &str) -> f64 {
    let gold_norm = normalize_answer(gold);
    let gold_tokens: Vec<&str> = gold_norm.split_whitespace().collect();
    if pred_tokens.is_empty() && gold_tokens.is_empty() {
        return 1.0;
    }
    if pred_tokens.is_empty() || gold_tokens.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold_tokens {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in pred_tokens {
        if let Some(n) = counts.get_mut(t) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred_tokens.len() as f64;
    let recall = overlap as f64 / gold_tokens.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Max over gold answers of the harmonic mean of token precision and recall.
pub fn token_f1(pred: &str, golds: &[String]) -> f64 {
    let pred_norm = normalize_answer(pred);
    let pred_tokens: Vec<&str> = pred_norm.split_whitespace().collect();
    golds
        .iter()
        .map(|g| f1_single(&pred_tokens, g))
        .fold(0.0, f64::max)
}

/// Greedy-decode an answer of exactly as many tokens as the first gold
/// answer, with the repetition penalty and trigram ban active. No context
/// passage is given and decoding never stops early on end-of-text.
pub fn answer<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    tokenizer: &TokenizerModel,
    item: &QAItem,
    sampler: &SamplerConfig,
) -> Result<String> {
    if item.answers.is_empty() {
        return Err(Error::InvalidConfig("QA item needs at least one gold answer".into()));
    }
    let prompt = build_qa_prompt(item)?;
    let prompt_ids = tokenizer.encode(&prompt);
    let gold_len = tokenizer.encode(&item.answers[0]).len();
    if gold_len == 0 {
        return Err(Error::EmptyText);
    }
    let forced = SamplerConfig {
        greedy: true,
        max_new_tokens: gold_len,
        ..*sampler
    };
    let ids = generate_ids(params, config, &prompt_ids, None, &forced)?;
    tokenizer.decode(&ids)
}

/// Run the harness over a dataset; returns per-item predictions plus the
/// aggregate EM/F1 averages.
pub fn evaluate_qa<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    tokenizer: &TokenizerModel,
    items: &[QAItem],
    sampler: &SamplerConfig,
) -> Result<(Vec<Prediction>, Summary)> {
    let predictions: Vec<Prediction> = items
        .par_iter()
        .map(|item| {
            let pred = answer(params, config, tokenizer, item, sampler)?;
            Ok(Prediction {
                question: item.question.clone(),
                exact_match: exact_match(&pred, &item.answers),
                f1: token_f1(&pred, &item.answers),
                prediction: pred,
            })
        })
        .collect::<Result<_>>()?;
    let count = predictions.len();
    let denom = count.max(1) as f64;
    let summary = Summary {
        exact_match: predictions.iter().map(|p| p.exact_match).sum::<f64>() / denom,
        f1: predictions.iter().map(|p| p.f1).sum::<f64>() / denom,
        count,
    };
    Ok((predictions, summary))
}

pub fn read_qa_jsonl(path: &Path) -> Result<Vec<QAItem>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut items = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line)?);
    }
    Ok(items)
}

pub fn write_predictions_jsonl(
    path: &Path,
    predictions: &[Prediction],
    summary: &Summary,
) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in predictions {
        serde_json::to_writer(&mut file, p)?;
        file.write_all(b"\n")?;
    }
    serde_json::to_writer(&mut file, summary)?;
    file.write_all(b"\n")?;
    file.flush()?;
    Ok(())
}
