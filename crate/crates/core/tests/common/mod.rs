//! Deterministic synthetic Arabic-like corpus for the integration suite.
//!
//! Text is sampled from a fixed Markov bigram process over a closed word
//! list with Zipf-shaped frequencies: structured enough for a small model
//! to learn real next-token statistics, random enough that held-out text
//! keeps genuine surprisal.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

const SYLLABLES: [&str; 28] = [
    "با", "تي", "مو", "كر", "سل", "دا", "نو", "عم", "في", "ها", "جد", "ري", "طا", "شم",
    "قل", "وس", "خي", "زر", "فا", "لم", "هن", "صب", "غد", "كت", "بن", "ثم", "حل", "ضو",
];

/// Fixed word list: two-syllable combinations in enumeration order.
pub fn word_list(n: usize) -> Vec<String> {
    let mut words = Vec::with_capacity(n);
    'outer: for a in SYLLABLES {
        for b in SYLLABLES {
            words.push(format!("{a}{b}"));
            if words.len() == n {
                break 'outer;
            }
        }
    }
    assert_eq!(words.len(), n, "word list exhausted");
    words
}

pub struct MarkovSource {
    words: Vec<String>,
    /// Per-word candidate successors (fixed fan-out).
    successors: Vec<Vec<usize>>,
    /// Zipf-shaped cumulative weights shared by every successor list.
    cumulative: Vec<f64>,
}

pub const N_WORDS: usize = 784; // 28 * 28
const FAN_OUT: usize = 20;

impl MarkovSource {
    pub fn new() -> MarkovSource {
        let words = word_list(N_WORDS);
        let successors = (0..N_WORDS)
            .map(|i| {
                (0..FAN_OUT)
                    .map(|k| (i * 7 + k * 131 + 1) % N_WORDS)
                    .collect()
            })
            .collect();
        let weights: Vec<f64> = (0..FAN_OUT).map(|k| 1.0 / (k as f64 + 1.0).powf(1.2)).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        MarkovSource {
            words,
            successors,
            cumulative,
        }
    }

    fn next_word(&self, current: usize, rng: &mut ChaCha8Rng) -> usize {
        let draw: f64 = rng.gen();
        let slot = self
            .cumulative
            .iter()
            .position(|&c| draw < c)
            .unwrap_or(FAN_OUT - 1);
        self.successors[current][slot]
    }

    /// One document of 80–160 words with sentence punctuation.
    pub fn document(&self, rng: &mut ChaCha8Rng) -> String {
        let len = rng.gen_range(80..160);
        let mut current = rng.gen_range(0..N_WORDS);
        let mut out = String::new();
        let mut since_break = 0;
        let mut sentence_len = rng.gen_range(6..13);
        for i in 0..len {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&self.words[current]);
            since_break += 1;
            if since_break >= sentence_len && i + 1 < len {
                out.push_str(" .");
                since_break = 0;
                sentence_len = rng.gen_range(6..13);
            }
            current = self.next_word(current, rng);
        }
        out.push_str(" .");
        out
    }

    /// Documents until the corpus reaches `target_bytes`.
    pub fn corpus(&self, seed: u64, target_bytes: usize) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut docs = Vec::new();
        let mut bytes = 0;
        while bytes < target_bytes {
            let doc = self.document(&mut rng);
            bytes += doc.len() + 1;
            docs.push(doc);
        }
        docs
    }

    /// Exactly `n` documents.
    pub fn docs(&self, seed: u64, n: usize) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.document(&mut rng)).collect()
    }
}
