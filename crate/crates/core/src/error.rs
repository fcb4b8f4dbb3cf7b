//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("evaluation stream is empty")]
    EmptyEval,
    #[error("text is empty")]
    EmptyText,
    #[error("question is empty")]
    EmptyQuestion,
    #[error("sequence length {len} exceeds context size {context}")]
    ContextOverflow { len: usize, context: usize },
    #[error("sequence too short: need at least {min} tokens, got {got}")]
    TooShort { min: usize, got: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    BadId { id: u32, vocab: usize },
    #[error("training example has length {got}, expected context size {expected}")]
    BadExample { got: usize, expected: usize },
    #[error("non-finite gradient in tensor `{0}`")]
    NanGrad(String),
    #[error("corrupt tokenizer file: {0}")]
    CorruptTokenizer(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("detection dataset needs both classes present")]
    SingleClass,
    #[error("not enough human documents: need {need}, got {got}")]
    InsufficientDocs { need: usize, got: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
