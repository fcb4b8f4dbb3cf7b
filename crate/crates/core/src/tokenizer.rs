//! Byte-level byte-pair encoding: training, encode/decode, persistence.
//!
//! The base alphabet is the 256 byte values (ids 0..=255), followed by the
//! special tokens, followed by one id per learned merge. Text is pre-split
//! into runs of spaces / non-spaces and merges only apply within a run, so
//! decode(encode(bytes)) is the identity on arbitrary byte strings.
//!
//! The JSON file stores token byte strings latin-1 style: each byte `b`
//! becomes the char `U+00b`. That keeps arbitrary byte tokens representable
//! in a JSON string while staying human-greppable for ASCII.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{EMAIL_TOKEN, END_OF_TEXT, MENTION_TOKEN, URL_TOKEN};
use crate::error::Error;
use crate::Result;

/// Special tokens every trained model carries, in id order after the bytes.
pub fn default_special_tokens() -> Vec<String> {
    vec![
        END_OF_TEXT.to_string(),
        URL_TOKEN.to_string(),
        EMAIL_TOKEN.to_string(),
        MENTION_TOKEN.to_string(),
    ]
}

#[derive(Clone, Debug)]
pub struct TokenizerModel {
    /// id -> token byte string; ids are contiguous 0..V-1.
    vocab: Vec<Vec<u8>>,
    /// Ordered merge rules: (left id, right id, merged id).
    merges: Vec<(u32, u32, u32)>,
    /// Surface strings of the special tokens, in id order.
    special_tokens: Vec<String>,
    // Derived lookup structures.
    merge_rank: HashMap<(u32, u32), (u32, u32)>, // pair -> (rank, merged id)
    special_ids: Vec<(Vec<u8>, u32)>,            // byte form, longest first
}

impl TokenizerModel {
    /// Merge-free model: the 256 bytes plus the default special tokens.
    pub fn byte_only() -> TokenizerModel {
        let special_tokens = default_special_tokens();
        let mut vocab: Vec<Vec<u8>> = (0u16..256).map(|b| vec![b as u8]).collect();
        for s in &special_tokens {
            vocab.push(s.as_bytes().to_vec());
        }
        let mut model = TokenizerModel {
            vocab,
            merges: Vec::new(),
            special_tokens,
            merge_rank: HashMap::new(),
            special_ids: Vec::new(),
        };
        model.build_lookups();
        model
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn special_tokens(&self) -> &[String] {
        &self.special_tokens
    }

    pub fn merges(&self) -> &[(u32, u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.vocab.get(id as usize).map(|v| v.as_slice())
    }

    pub fn eot_id(&self) -> u32 {
        self.special_id(END_OF_TEXT).expect("eot always present")
    }

    pub fn special_id(&self, surface: &str) -> Option<u32> {
        let idx = self.special_tokens.iter().position(|s| s == surface)?;
        Some(256 + idx as u32)
    }

    fn build_lookups(&mut self) {
        self.merge_rank = self
            .merges
            .iter()
            .enumerate()
            .map(|(rank, &(a, b, m))| ((a, b), (rank as u32, m)))
            .collect();
        self.special_ids = self
            .special_tokens
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_bytes().to_vec(), 256 + i as u32))
            .collect();
        self.special_ids.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
    }

    /// Encode arbitrary bytes. Special-token byte substrings are matched
    /// greedily first; the rest is pre-split on spaces and BPE-merged.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::new();
        let mut start = 0;
        let mut i = 0;
        while i < bytes.len() {
            let mut matched = None;
            for (tok, id) in &self.special_ids {
                if bytes[i..].starts_with(tok) {
                    matched = Some((tok.len(), *id));
                    break;
                }
            }
            if let Some((len, id)) = matched {
                self.encode_plain(&bytes[start..i], &mut out);
                out.push(id);
                i += len;
                start = i;
            } else {
                i += 1;
            }
        }
        self.encode_plain(&bytes[start..], &mut out);
        out
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    fn encode_plain(&self, bytes: &[u8], out: &mut Vec<u32>) {
        for segment in split_runs(bytes) {
            let mut ids: Vec<u32> = segment.iter().map(|&b| b as u32).collect();
            self.apply_merges(&mut ids);
            out.extend_from_slice(&ids);
        }
    }

    /// Repeatedly merge the present pair with the lowest training rank until
    /// no adjacent pair is in the merge table.
    fn apply_merges(&self, ids: &mut Vec<u32>) {
        if self.merge_rank.is_empty() {
            return;
        }
        loop {
            let mut best: Option<(u32, usize, u32)> = None; // (rank, pos, merged)
            for i in 0..ids.len().saturating_sub(1) {
                if let Some(&(rank, merged)) = self.merge_rank.get(&(ids[i], ids[i + 1])) {
                    if best.map_or(true, |(r, _, _)| rank < r) {
                        best = Some((rank, i, merged));
                    }
                }
            }
            let Some((rank, _, merged)) = best else { break };
            let (a, b) = {
                let m = self.merges[rank as usize];
                (m.0, m.1)
            };
            // Merge every occurrence of the chosen pair, left to right.
            let mut next = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(ids[i]);
                    i += 1;
                }
            }
            *ids = next;
        }
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let bytes = self.token_bytes(id).ok_or(Error::BadId {
                id,
                vocab: self.vocab.len(),
            })?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    /// Decode to text; invalid UTF-8 (possible when ids split a multi-byte
    /// character) is replaced rather than erroring.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = TokenizerFile {
            version: 1,
            special_tokens: self.special_tokens.clone(),
            vocab: self.vocab.iter().map(|t| bytes_to_latin1(t)).collect(),
            merges: self
                .merges
                .iter()
                .map(|&(a, b, _)| {
                    [
                        bytes_to_latin1(&self.vocab[a as usize]),
                        bytes_to_latin1(&self.vocab[b as usize]),
                    ]
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TokenizerModel> {
        let raw = std::fs::read_to_string(path)?;
        let file: TokenizerFile = serde_json::from_str(&raw)
            .map_err(|e| Error::CorruptTokenizer(e.to_string()))?;
        if file.version != 1 {
            return Err(Error::CorruptTokenizer(format!(
                "unsupported version {}",
                file.version
            )));
        }
        let vocab: Vec<Vec<u8>> = file
            .vocab
            .iter()
            .map(|s| latin1_to_bytes(s))
            .collect::<Result<_>>()?;
        // Validate the fixed layout: 256 byte tokens, then specials.
        if vocab.len() < 256 + file.special_tokens.len() {
            return Err(Error::CorruptTokenizer("vocab too small".into()));
        }
        for b in 0..256usize {
            if vocab[b] != [b as u8] {
                return Err(Error::CorruptTokenizer(format!(
                    "byte token {b} out of place"
                )));
            }
        }
        for (i, s) in file.special_tokens.iter().enumerate() {
            if vocab[256 + i] != s.as_bytes() {
                return Err(Error::CorruptTokenizer(format!(
                    "special token {i} does not match vocab entry"
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for t in &vocab {
            if !seen.insert(t.clone()) {
                return Err(Error::CorruptTokenizer("duplicate token in vocab".into()));
            }
        }
        let lookup: HashMap<&[u8], u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_slice(), i as u32))
            .collect();
        let mut merges = Vec::with_capacity(file.merges.len());
        let mut next_id = 256 + file.special_tokens.len() as u32;
        for pair in &file.merges {
            let left = latin1_to_bytes(&pair[0])?;
            let right = latin1_to_bytes(&pair[1])?;
            let (&a, &b) = (
                lookup
                    .get(left.as_slice())
                    .ok_or_else(|| Error::CorruptTokenizer("merge input missing".into()))?,
                lookup
                    .get(right.as_slice())
                    .ok_or_else(|| Error::CorruptTokenizer("merge input missing".into()))?,
            );
            let merged: Vec<u8> = left.iter().chain(right.iter()).copied().collect();
            let &m = lookup
                .get(merged.as_slice())
                .ok_or_else(|| Error::CorruptTokenizer("merge output missing".into()))?;
            if m != next_id {
                return Err(Error::CorruptTokenizer(
                    "merge outputs not in id order".into(),
                ));
            }
            merges.push((a, b, m));
            next_id += 1;
        }
        if next_id as usize != vocab.len() {
            return Err(Error::CorruptTokenizer(
                "vocab entries not covered by merges".into(),
            ));
        }
        let mut model = TokenizerModel {
            vocab,
            merges,
            special_tokens: file.special_tokens,
            merge_rank: HashMap::new(),
            special_ids: Vec::new(),
        };
        model.build_lookups();
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    version: u32,
    special_tokens: Vec<String>,
    vocab: Vec<String>,
    merges: Vec<[String; 2]>,
}

fn bytes_to_latin1(bytes: &[u8]) -> String {
    bytes.iter().map(|&b| b as char).collect()
}

fn latin1_to_bytes(s: &str) -> Result<Vec<u8>> {
    s.chars()
        .map(|c| {
            let v = c as u32;
            if v < 256 {
                Ok(v as u8)
            } else {
                Err(Error::CorruptTokenizer("non-latin1 char in token".into()))
            }
        })
        .collect()
}

/// Split bytes into maximal runs of spaces / non-spaces. Merges never cross
/// a run boundary; concatenating the runs reproduces the input exactly.
fn split_runs(bytes: &[u8]) -> Vec<&[u8]> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=bytes.len() {
        if i == bytes.len() || (bytes[i] == b' ') != (bytes[start] == b' ') {
            runs.push(&bytes[start..i]);
            start = i;
        }
    }
    runs
}

/// Train a byte-level BPE model. Standard algorithm: start from the byte
/// alphabet plus specials, repeatedly merge the most frequent adjacent pair
/// (ties broken by the lexicographically smaller pair of token byte strings)
/// until `vocab_size` is reached or no pair occurs at least twice.
pub fn train_bpe<I, T>(corpus: I, vocab_size: usize, special_tokens: &[String]) -> Result<TokenizerModel>
where
    I: IntoIterator<Item = T>,
    T: AsRef<str>,
{
    if vocab_size <= 256 + special_tokens.len() {
        return Err(Error::InvalidConfig(format!(
            "vocab_size must exceed {}",
            256 + special_tokens.len()
        )));
    }

    // Base vocabulary.
    let mut vocab: Vec<Vec<u8>> = (0u16..256).map(|b| vec![b as u8]).collect();
    for s in special_tokens {
        vocab.push(s.as_bytes().to_vec());
    }

    // Segment frequency table over space/non-space runs, with special-token
    // occurrences cut out so merges never learn across them.
    let special_bytes: Vec<Vec<u8>> = special_tokens.iter().map(|s| s.as_bytes().to_vec()).collect();
    let mut seg_freq: HashMap<Vec<u8>, u64> = HashMap::new();
    let mut saw_text = false;
    for doc in corpus {
        let text = doc.as_ref();
        if !text.is_empty() {
            saw_text = true;
        }
        for chunk in strip_specials(text.as_bytes(), &special_bytes) {
            for run in split_runs(chunk) {
                *seg_freq.entry(run.to_vec()).or_insert(0) += 1;
            }
        }
    }
    if !saw_text {
        return Err(Error::EmptyCorpus);
    }

    // Working representation: unique segments as id sequences with counts.
    let mut segments: Vec<(Vec<u32>, u64)> = seg_freq
        .into_iter()
        .map(|(bytes, count)| (bytes.iter().map(|&b| b as u32).collect(), count))
        .collect();
    // Deterministic iteration order regardless of hash state.
    segments.sort_by(|a, b| a.0.cmp(&b.0));

    let mut merges: Vec<(u32, u32, u32)> = Vec::new();
    while vocab.len() < vocab_size {
        // Count adjacent pairs.
        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (seg, count) in &segments {
            for w in seg.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_insert(0) += count;
            }
        }
        let best = pair_counts
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .min_by(|&((a1, b1), c1), &((a2, b2), c2)| {
                c2.cmp(&c1).then_with(|| {
                    (&vocab[a1 as usize], &vocab[b1 as usize])
                        .cmp(&(&vocab[a2 as usize], &vocab[b2 as usize]))
                })
            });
        let Some(((a, b), _)) = best else { break };

        let merged_bytes: Vec<u8> = vocab[a as usize]
            .iter()
            .chain(vocab[b as usize].iter())
            .copied()
            .collect();
        let merged_id = vocab.len() as u32;
        vocab.push(merged_bytes);
        merges.push((a, b, merged_id));

        for (seg, _) in &mut segments {
            let mut next = Vec::with_capacity(seg.len());
            let mut i = 0;
            while i < seg.len() {
                if i + 1 < seg.len() && seg[i] == a && seg[i + 1] == b {
                    next.push(merged_id);
                    i += 2;
                } else {
                    next.push(seg[i]);
                    i += 1;
                }
            }
            *seg = next;
        }
    }

    let mut model = TokenizerModel {
        vocab,
        merges,
        special_tokens: special_tokens.to_vec(),
        merge_rank: HashMap::new(),
        special_ids: Vec::new(),
    };
    model.build_lookups();
    Ok(model)
}

/// Cut special-token occurrences out of a byte string, returning the plain
/// chunks between them.
fn strip_specials<'a>(bytes: &'a [u8], specials: &[Vec<u8>]) -> Vec<&'a [u8]> {
    let mut chunks = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        let hit = specials.iter().map(|s| s.len()).zip(specials).find_map(|(len, s)| {
            if bytes[i..].starts_with(s) {
                Some(len)
            } else {
                None
            }
        });
        if let Some(len) = hit {
            if start < i {
                chunks.push(&bytes[start..i]);
            }
            i += len;
            start = i;
        } else {
            i += 1;
        }
    }
    if start < bytes.len() {
        chunks.push(&bytes[start..]);
    }
    chunks
}
