//! Autoregressive decoding with temperature, nucleus (top-p) filtering, a
//! CTRL-style repetition penalty, and a no-repeat-n-gram constraint.
//!
//! Constraints are applied in a fixed order: temperature, repetition
//! penalty, n-gram ban, nucleus filter, then sampling. Tests pin the order
//! since changing it changes outputs.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::{forward_last, ModelConfig, Parameters};
use crate::scalar::Scalar;
use crate::tokenizer::TokenizerModel;
use crate::Result;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub repetition_penalty: f64,
    /// n-gram length for the no-repeat constraint; 0 disables it.
    pub no_repeat_ngram: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Greedy decoding ignores temperature, top_p, and seed.
    pub greedy: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 1.0,
            top_p: 0.95,
            repetition_penalty: 1.0,
            no_repeat_ngram: 3,
            max_new_tokens: 100,
            seed: 0,
            greedy: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be > 0".into()));
        }
        if !(0.0 < self.top_p && self.top_p <= 1.0) {
            return Err(Error::InvalidConfig("top_p must be in (0, 1]".into()));
        }
        if self.repetition_penalty < 1.0 {
            return Err(Error::InvalidConfig("repetition_penalty must be >= 1".into()));
        }
        if self.no_repeat_ngram == 1 {
            return Err(Error::InvalidConfig("no_repeat_ngram must be 0 or >= 2".into()));
        }
        Ok(())
    }
}

/// CTRL-style sign-dependent penalty: for ids in `history`, positive logits
/// are divided by theta and negative logits multiplied by theta.
pub fn apply_repetition_penalty<S: Scalar>(logits: &mut [S], history: &HashSet<u32>, theta: f64) {
    let th = S::cast_from(theta);
    for &id in history {
        if let Some(l) = logits.get_mut(id as usize) {
            if *l > S::zero() {
                *l = *l / th;
            } else {
                *l = *l * th;
            }
        }
    }
}

/// Ban every id that would complete an n-gram already present in `context`.
pub fn apply_no_repeat_ngram<S: Scalar>(logits: &mut [S], context: &[u32], n: usize) {
    if n < 2 || context.len() < n - 1 {
        return;
    }
    let prefix = &context[context.len() - (n - 1)..];
    for window in context.windows(n) {
        if &window[..n - 1] == prefix {
            let banned = window[n - 1] as usize;
            if let Some(l) = logits.get_mut(banned) {
                *l = S::neg_infinity();
            }
        }
    }
}

/// Keep the smallest set of highest-probability ids whose cumulative mass
/// reaches `p` (ties broken by id order), zero the rest, renormalize.
pub fn nucleus_filter<S: Scalar>(probs: &mut [S], p: f64) {
    if p >= 1.0 {
        return;
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let threshold = S::cast_from(p);
    let mut cum = S::zero();
    let mut kept = 0;
    for &idx in &order {
        cum += probs[idx];
        kept += 1;
        if cum >= threshold {
            break;
        }
    }
    let keep: HashSet<usize> = order[..kept].iter().copied().collect();
    let mut mass = S::zero();
    for (i, v) in probs.iter_mut().enumerate() {
        if keep.contains(&i) {
            mass += *v;
        } else {
            *v = S::zero();
        }
    }
    let inv = mass.recip();
    for v in probs.iter_mut() {
        *v = *v * inv;
    }
}

fn softmax_in_place<S: Scalar>(logits: &mut [S]) {
    let maxv = logits.iter().cloned().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in logits.iter_mut() {
        *v = (*v - maxv).exp();
        sum += *v;
    }
    let inv = sum.recip();
    for v in logits.iter_mut() {
        *v = *v * inv;
    }
}

fn argmax<S: Scalar>(values: &[S]) -> u32 {
    let mut best = 0usize;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best as u32
}

/// Core decoding loop over token ids. Returns only the newly generated ids.
/// When the sequence outgrows the model context, conditioning slides to the
/// last `context` tokens; the n-gram ban always sees the full sequence.
pub fn generate_ids<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    prompt_ids: &[u32],
    eot_id: Option<u32>,
    sampler: &SamplerConfig,
) -> Result<Vec<u32>> {
    sampler.validate()?;
    if prompt_ids.is_empty() {
        return Err(Error::EmptyText);
    }
    if prompt_ids.len() >= config.context {
        return Err(Error::ContextOverflow {
            len: prompt_ids.len(),
            context: config.context,
        });
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut seq: Vec<u32> = prompt_ids.to_vec();
    let mut generated: Vec<u32> = Vec::new();
    let mut history: HashSet<u32> = HashSet::new();
    let temp = S::cast_from(sampler.temperature);

    for _ in 0..sampler.max_new_tokens {
        let window_start = seq.len().saturating_sub(config.context);
        let mut logits = forward_last(params, config, &seq[window_start..])?;
        if !sampler.greedy {
            for l in logits.iter_mut() {
                *l = *l / temp;
            }
        }
        apply_repetition_penalty(&mut logits, &history, sampler.repetition_penalty);
        apply_no_repeat_ngram(&mut logits, &seq, sampler.no_repeat_ngram);

        let next = if sampler.greedy {
            argmax(&logits)
        } else {
            softmax_in_place(&mut logits);
            nucleus_filter(&mut logits, sampler.top_p);
            let draw: f64 = rng.gen();
            let mut cum = 0.0;
            let mut chosen = logits.len() - 1;
            for (i, &p) in logits.iter().enumerate() {
                cum += p.cast_f64();
                if cum > draw {
                    chosen = i;
                    break;
                }
            }
            chosen as u32
        };

        seq.push(next);
        generated.push(next);
        history.insert(next);
        if Some(next) == eot_id {
            break;
        }
    }
    Ok(generated)
}

/// Decode from a text prompt; returns the prompt plus the continuation.
pub fn generate<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    tokenizer: &TokenizerModel,
    prompt: &str,
    sampler: &SamplerConfig,
) -> Result<String> {
    let prompt_ids = tokenizer.encode(prompt);
    if prompt_ids.is_empty() {
        return Err(Error::EmptyText);
    }
    let new_ids = generate_ids(params, config, &prompt_ids, Some(tokenizer.eot_id()), sampler)?;
    let mut all = prompt_ids;
    all.extend_from_slice(&new_ids);
    tokenizer.decode(&all)
}
