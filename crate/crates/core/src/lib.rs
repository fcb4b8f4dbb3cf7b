//! Desk-scale Arabic causal language-model toolkit.
//!
//! The crate covers the full pipeline: corpus preprocessing and filtering,
//! byte-level BPE tokenization, a from-scratch transformer decoder with two
//! layer-norm-order variants (GPT2 / GROVER), LAMB and Adafactor optimizers,
//! a deterministic training loop with perplexity evaluation, constrained
//! sampling (nucleus, repetition penalty, no-repeat-trigram), a zero-shot QA
//! harness, and a GLTR-feature machine-text detector.
//!
//! All numeric code is generic over the scalar type via [`scalar::Scalar`]
//! (any `num_traits::Float`); `f32` is the training/checkpoint precision and
//! `f64` is used for gradient checking. Concrete aliases live at the crate
//! root ([`Parameters32`], [`Parameters64`], ...).

pub mod checkpoint;
pub mod corpus;
pub mod detector;
pub mod error;
pub mod generate;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod zeroshot;

pub use error::Error;
pub use scalar::Scalar;

/// Convenience result type used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Parameters32 = model::Parameters<f32>;
pub type Parameters64 = model::Parameters<f64>;
pub type OptState32 = optim::OptState<f32>;
pub type OptState64 = optim::OptState<f64>;
