//! Machine-text detection: GLTR-style per-token rank annotation under the
//! language model, rank-histogram features, detection-dataset construction,
//! a logistic discriminator, and an HTML visualization.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::generate::{generate_ids, SamplerConfig};
use crate::model::{forward, ModelConfig, Parameters};
use crate::scalar::Scalar;
use crate::tokenizer::TokenizerModel;
use crate::Result;

pub const N_FEATURES: usize = 6;
pub const SHORT_TOKENS: usize = 150;
pub const LONG_TOKENS: usize = 500;
pub const PROMPT_WORDS: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Green,
    Yellow,
    Red,
    Purple,
}

impl Bucket {
    /// GLTR convention: rank <= 10 green, <= 100 yellow, <= 1000 red.
    pub fn from_rank(rank: usize) -> Bucket {
        match rank {
            0..=10 => Bucket::Green,
            11..=100 => Bucket::Yellow,
            101..=1000 => Bucket::Red,
            _ => Bucket::Purple,
        }
    }

    pub fn color(self) -> &'static str {
        match self {
            Bucket::Green => "#a8e6a3",
            Bucket::Yellow => "#f5e38a",
            Bucket::Red => "#f5a3a3",
            Bucket::Purple => "#d3a3f5",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TokenAnnotation {
    pub id: u32,
    pub prob: f64,
    /// 1 = the model's most likely next token; ties broken by smaller id.
    pub rank: usize,
    pub bucket: Bucket,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Short,
    Long,
}

impl Regime {
    pub fn token_limit(self) -> usize {
        match self {
            Regime::Short => SHORT_TOKENS,
            Regime::Long => LONG_TOKENS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Human,
    Machine,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionExample {
    pub text: String,
    pub label: Label,
    pub regime: Regime,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectorModel {
    pub weights: [f64; N_FEATURES],
    pub bias: f64,
    /// Per-feature standardization fitted on the training split.
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
    pub regime: Regime,
    pub checkpoint_id: String,
}

pub struct TrainedDetector {
    pub model: DetectorModel,
    pub heldout_f1: f64,
    pub train_accuracy: f64,
    /// Final regularized train loss; restarts agree on it to high precision.
    pub train_loss: f64,
}

fn rank_of<S: Scalar>(logits: &[S], id: u32) -> usize {
    let target = logits[id as usize];
    let mut ahead = 0usize;
    for (j, &l) in logits.iter().enumerate() {
        if l > target || (l == target && (j as u32) < id) {
            ahead += 1;
        }
    }
    ahead + 1
}

fn softmax_prob<S: Scalar>(logits: &[S], id: u32) -> f64 {
    let maxv = logits.iter().cloned().fold(S::neg_infinity(), S::max);
    let mut sum = 0.0f64;
    for &l in logits {
        sum += (l - maxv).cast_f64().exp();
    }
    (logits[id as usize] - maxv).cast_f64().exp() / sum
}

/// Annotate every token after the first with its probability, rank, and
/// bucket under the LM. Texts longer than the context are scored in sliding
/// windows of stride context/2, so each token sees at least half a context.
pub fn gltr_annotate<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    tokenizer: &TokenizerModel,
    text: &str,
) -> Result<Vec<TokenAnnotation>> {
    if text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let ids = tokenizer.encode(text);
    if ids.len() < 2 {
        return Err(Error::TooShort { min: 2, got: ids.len() });
    }
    let stride = (config.context / 2).max(1);
    let mut annotations = Vec::with_capacity(ids.len() - 1);
    let mut start = 0usize;
    let mut next_t = 1usize;
    loop {
        let end = (start + config.context).min(ids.len());
        let logits = forward(params, config, &ids[start..end])?;
        for t in next_t..end {
            let row = logits.row(t - start - 1);
            let id = ids[t];
            let rank = rank_of(row, id);
            annotations.push(TokenAnnotation {
                id,
                prob: softmax_prob(row, id),
                rank,
                bucket: Bucket::from_rank(rank),
            });
        }
        if end == ids.len() {
            break;
        }
        next_t = end;
        start += stride;
    }
    Ok(annotations)
}

/// Six features: normalized bucket histogram (green, yellow, red, purple),
/// mean natural-log probability, mean rank.
pub fn rank_histogram(annotations: &[TokenAnnotation]) -> Result<[f64; N_FEATURES]> {
    if annotations.is_empty() {
        return Err(Error::EmptyText);
    }
    let n = annotations.len() as f64;
    let mut features = [0.0; N_FEATURES];
    for a in annotations {
        let bin = match a.bucket {
            Bucket::Green => 0,
            Bucket::Yellow => 1,
            Bucket::Red => 2,
            Bucket::Purple => 3,
        };
        features[bin] += 1.0 / n;
        features[4] += a.prob.ln() / n;
        features[5] += a.rank as f64 / n;
    }
    Ok(features)
}

fn first_words(text: &str, n: usize) -> Option<(String, usize)> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() <= n {
        return None;
    }
    Some((words[..n].join(" "), n))
}

/// Decode at most `limit` ids into text that also re-encodes within the
/// budget (a truncation that splits a multi-byte character would otherwise
/// decode to replacement characters and inflate the re-encoded length).
fn fit_to_budget(tokenizer: &TokenizerModel, ids: &[u32], limit: usize) -> Result<String> {
    let mut end = ids.len().min(limit);
    loop {
        let text = tokenizer.decode(&ids[..end])?;
        if tokenizer.encode(&text).len() <= limit {
            return Ok(text);
        }
        end -= 1;
    }
}

fn truncate_tokens(tokenizer: &TokenizerModel, text: &str, limit: usize) -> Result<String> {
    let ids = tokenizer.encode(text);
    if ids.len() <= limit {
        return Ok(text.to_string());
    }
    fit_to_budget(tokenizer, &ids, limit)
}

/// Class-balanced corpus: each human doc contributes itself (truncated to
/// the regime's token budget) and a machine continuation of its first 25
/// words, generated by the scoring LM with nucleus sampling.
pub fn build_detection_dataset<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    tokenizer: &TokenizerModel,
    human_docs: &[String],
    n_per_class: usize,
    regime: Regime,
    sampler: &SamplerConfig,
) -> Result<Vec<DetectionExample>> {
    let usable: Vec<&String> = human_docs
        .iter()
        .filter(|d| d.split_whitespace().count() > PROMPT_WORDS)
        .collect();
    if usable.len() < n_per_class {
        return Err(Error::InsufficientDocs {
            need: n_per_class,
            got: usable.len(),
        });
    }
    let limit = regime.token_limit();
    let mut examples: Vec<DetectionExample> = usable[..n_per_class]
        .par_iter()
        .enumerate()
        .map(|(i, doc)| {
            let (prompt, _) = first_words(doc, PROMPT_WORDS).expect("filtered above");
            let prompt_ids = tokenizer.encode(&prompt);
            let machine_sampler = SamplerConfig {
                seed: sampler.seed.wrapping_add(i as u64),
                max_new_tokens: limit.saturating_sub(prompt_ids.len()),
                ..*sampler
            };
            // Condition on the prompt's tail if it overflows the context;
            // the emitted text still carries the full prompt.
            let window = if prompt_ids.len() >= config.context {
                &prompt_ids[prompt_ids.len() - (config.context - 1)..]
            } else {
                &prompt_ids[..]
            };
            let new_ids = generate_ids(
                params,
                config,
                window,
                Some(tokenizer.eot_id()),
                &machine_sampler,
            )?;
            let mut machine_ids = prompt_ids.clone();
            machine_ids.extend(&new_ids);
            let machine_text = fit_to_budget(tokenizer, &machine_ids, limit)?;
            let human_text = truncate_tokens(tokenizer, doc, limit)?;
            Ok(vec![
                DetectionExample {
                    text: human_text,
                    label: Label::Human,
                    regime,
                },
                DetectionExample {
                    text: machine_text,
                    label: Label::Machine,
                    regime,
                },
            ])
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    // Interleaved human/machine order; keep it deterministic.
    examples.sort_by_key(|e| matches!(e.label, Label::Machine));
    Ok(examples)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Solve a small symmetric linear system by Gaussian elimination with
/// partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let diag = a[col][col];
        for row in 0..n {
            if row == col || a[row][col] == 0.0 {
                continue;
            }
            let factor = a[row][col] / diag;
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    (0..n).map(|i| b[i] / a[i][i]).collect()
}

const RIDGE: f64 = 1e-6;

/// Ridge-regularized logistic regression fit by Newton's method on
/// standardized features. Strictly convex, so the optimum is unique and
/// independent of the (seeded) initialization.
fn fit_logistic(
    features: &[[f64; N_FEATURES]],
    labels: &[bool],
    seed: u64,
) -> ([f64; N_FEATURES], f64, f64) {
    let n = features.len();
    let dim = N_FEATURES + 1; // weights + bias
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.01..0.01)).collect();

    let x = |i: usize, j: usize| -> f64 {
        if j < N_FEATURES {
            features[i][j]
        } else {
            1.0
        }
    };
    let mut loss = f64::INFINITY;
    for _ in 0..100 {
        let mut grad = vec![0.0; dim];
        let mut hess = vec![vec![0.0; dim]; dim];
        let mut new_loss = 0.0;
        for i in 0..n {
            let z: f64 = (0..dim).map(|j| w[j] * x(i, j)).sum();
            let p = sigmoid(z);
            let y = if labels[i] { 1.0 } else { 0.0 };
            new_loss -= (y * p.max(1e-300).ln() + (1.0 - y) * (1.0 - p).max(1e-300).ln()) / n as f64;
            let r = (p - y) / n as f64;
            let s = (p * (1.0 - p)).max(1e-10) / n as f64;
            for j in 0..dim {
                grad[j] += r * x(i, j);
                for k in 0..dim {
                    hess[j][k] += s * x(i, j) * x(i, k);
                }
            }
        }
        for j in 0..dim {
            new_loss += 0.5 * RIDGE * w[j] * w[j];
            grad[j] += RIDGE * w[j];
            hess[j][j] += RIDGE;
        }
        let step = solve(hess, grad.clone());
        for j in 0..dim {
            w[j] -= step[j];
        }
        let grad_norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if (loss - new_loss).abs() < 1e-14 && grad_norm < 1e-10 {
            loss = new_loss;
            break;
        }
        loss = new_loss;
    }
    let mut weights = [0.0; N_FEATURES];
    weights.copy_from_slice(&w[..N_FEATURES]);
    (weights, w[N_FEATURES], loss)
}

fn f1_score(preds: &[bool], labels: &[bool]) -> f64 {
    let tp = preds.iter().zip(labels).filter(|&(&p, &y)| p && y).count() as f64;
    let fp = preds.iter().zip(labels).filter(|&(&p, &y)| p && !y).count() as f64;
    let fne = preds.iter().zip(labels).filter(|&(&p, &y)| !p && y).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fne);
    2.0 * precision * recall / (precision + recall)
}

/// Fit the logistic detector on pre-extracted features. Uses a fixed 80/20
/// stratified split (per class, in input order) and reports held-out F1 with
/// `machine` as the positive class.
pub fn train_detector_features(
    features: &[[f64; N_FEATURES]],
    labels: &[bool],
    regime: Regime,
    checkpoint_id: &str,
    seed: u64,
) -> Result<TrainedDetector> {
    assert_eq!(features.len(), labels.len());
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClass);
    }
    let split = |idx: &[usize]| -> (Vec<usize>, Vec<usize>) {
        let cut = (idx.len() * 4) / 5;
        (idx[..cut].to_vec(), idx[cut..].to_vec())
    };
    let (pos_tr, pos_te) = split(&pos);
    let (neg_tr, neg_te) = split(&neg);
    let train_idx: Vec<usize> = pos_tr.into_iter().chain(neg_tr).collect();
    let test_idx: Vec<usize> = pos_te.into_iter().chain(neg_te).collect();

    // Standardize on the training split.
    let mut mean = [0.0; N_FEATURES];
    let mut std = [0.0; N_FEATURES];
    for &i in &train_idx {
        for j in 0..N_FEATURES {
            mean[j] += features[i][j] / train_idx.len() as f64;
        }
    }
    for &i in &train_idx {
        for j in 0..N_FEATURES {
            let d = features[i][j] - mean[j];
            std[j] += d * d / train_idx.len() as f64;
        }
    }
    for s in &mut std {
        *s = s.sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let standardized = |i: usize| -> [f64; N_FEATURES] {
        let mut out = [0.0; N_FEATURES];
        for j in 0..N_FEATURES {
            out[j] = (features[i][j] - mean[j]) / std[j];
        }
        out
    };

    let train_x: Vec<[f64; N_FEATURES]> = train_idx.iter().map(|&i| standardized(i)).collect();
    let train_y: Vec<bool> = train_idx.iter().map(|&i| labels[i]).collect();
    let (weights, bias, train_loss) = fit_logistic(&train_x, &train_y, seed);

    let score = |x: &[f64; N_FEATURES]| -> f64 {
        sigmoid(x.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>() + bias)
    };
    let train_preds: Vec<bool> = train_x.iter().map(|x| score(x) >= 0.5).collect();
    let train_accuracy = train_preds
        .iter()
        .zip(&train_y)
        .filter(|&(p, y)| p == y)
        .count() as f64
        / train_y.len() as f64;

    let test_preds: Vec<bool> = test_idx.iter().map(|&i| score(&standardized(i)) >= 0.5).collect();
    let test_y: Vec<bool> = test_idx.iter().map(|&i| labels[i]).collect();
    let heldout_f1 = if test_y.is_empty() {
        0.0
    } else {
        f1_score(&test_preds, &test_y)
    };

    Ok(TrainedDetector {
        model: DetectorModel {
            weights,
            bias,
            mean,
            std,
            regime,
            checkpoint_id: checkpoint_id.to_string(),
        },
        heldout_f1,
        train_accuracy,
        train_loss,
    })
}

/// Annotate each example under the scoring LM, extract features, and fit
/// the detector.
pub fn train_detector<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    tokenizer: &TokenizerModel,
    dataset: &[DetectionExample],
    regime: Regime,
    checkpoint_id: &str,
    seed: u64,
) -> Result<TrainedDetector> {
    let features: Vec<[f64; N_FEATURES]> = dataset
        .par_iter()
        .map(|e| {
            let ann = gltr_annotate(params, config, tokenizer, &e.text)?;
            rank_histogram(&ann)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = dataset.iter().map(|e| matches!(e.label, Label::Machine)).collect();
    train_detector_features(&features, &labels, regime, checkpoint_id, seed)
}

/// Probability that `text` is machine-generated.
pub fn detect<S: Scalar>(
    model: &DetectorModel,
    params: &Parameters<S>,
    config: &ModelConfig,
    tokenizer: &TokenizerModel,
    text: &str,
) -> Result<f64> {
    let ann = gltr_annotate(params, config, tokenizer, text)?;
    let features = rank_histogram(&ann)?;
    let mut z = model.bias;
    for j in 0..N_FEATURES {
        z += model.weights[j] * (features[j] - model.mean[j]) / model.std[j];
    }
    Ok(sigmoid(z))
}

pub fn save_detector(path: &Path, model: &DetectorModel) -> Result<()> {
    let json = serde_json::to_vec_pretty(model)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_detector(path: &Path) -> Result<DetectorModel> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn escape_html(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Self-contained right-to-left HTML page: one colored span per annotated
/// token plus a bucket-count legend.
pub fn gltr_html_report(
    tokenizer: &TokenizerModel,
    annotations: &[TokenAnnotation],
    out_path: &Path,
) -> Result<()> {
    if annotations.is_empty() {
        return Err(Error::EmptyText);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut body = String::new();
    for a in annotations {
        let name = match a.bucket {
            Bucket::Green => "green",
            Bucket::Yellow => "yellow",
            Bucket::Red => "red",
            Bucket::Purple => "purple",
        };
        *counts.entry(name).or_insert(0) += 1;
        let surface = tokenizer.decode(&[a.id])?;
        body.push_str(&format!(
            "<span class=\"tok\" style=\"background:{}\" title=\"rank {} p={:.4}\">{}</span>",
            a.bucket.color(),
            a.rank,
            a.prob,
            escape_html(&surface)
        ));
    }
    let legend: String = ["green", "yellow", "red", "purple"]
        .iter()
        .map(|name| format!("<li>{}: {}</li>", name, counts.get(name).copied().unwrap_or(0)))
        .collect();
    let html = format!(
        "<!DOCTYPE html><html dir=\"rtl\" lang=\"ar\"><head><meta charset=\"utf-8\">\
         <title>GLTR report</title>\
         <style>body{{font-family:sans-serif;line-height:1.8}}.tok{{padding:1px;border-radius:2px}}</style>\
         </head><body><h1>GLTR report</h1><ul>{legend}</ul><p>{body}</p></body></html>"
    );
    let mut file = std::io::BufWriter::new(std::fs::File::create(out_path)?);
    file.write_all(html.as_bytes())?;
    file.flush()?;
    Ok(())
}
