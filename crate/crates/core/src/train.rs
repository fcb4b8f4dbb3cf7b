//! Deterministic training loop (CLM objective, batching, gradient
//! accumulation, checkpointing, loss log) and perplexity evaluation.
//!
//! The order in which examples are consumed is a pure function of the seed:
//! each epoch's permutation is drawn from a counter-based RNG keyed by
//! (seed, epoch), so checkpoint-resume reproduces the uninterrupted
//! trajectory bit for bit.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, TrainState};
use crate::corpus::TrainingExample;
use crate::error::Error;
use crate::model::{clm_loss, forward, init_params, loss_and_grad, ModelConfig, Parameters};
use crate::optim::{adafactor_step, lamb_step, OptHyper, OptState, OptimizerKind};
use crate::scalar::Scalar;
use crate::Result;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub optimizer: OptimizerKind,
    pub hyper: OptHyper,
    /// Evaluate every N steps (0 = never). Evaluation itself is left to the
    /// caller via the loss log; this only controls checkpoint cadence hooks.
    pub eval_every: u64,
    pub checkpoint_every: u64,
    /// Number of micro-batches a batch is split into. The accumulated step
    /// is bitwise identical to the single-large-batch step.
    pub grad_accum: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            total_steps: 100,
            optimizer: OptimizerKind::Lamb,
            hyper: OptHyper::default(),
            eval_every: 0,
            checkpoint_every: 0,
            grad_accum: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 || self.total_steps < 1 {
            return Err(Error::InvalidConfig(
                "batch_size and total_steps must be >= 1".into(),
            ));
        }
        if self.grad_accum < 1 || self.batch_size % self.grad_accum != 0 {
            return Err(Error::InvalidConfig(
                "grad_accum must divide batch_size".into(),
            ));
        }
        self.hyper.validate()
    }

    /// Reference training setups for the four model sizes
    /// (batch size, learning rate, steps, optimizer).
    pub fn preset(model: &str) -> Option<TrainConfig> {
        let (batch_size, lr, total_steps, optimizer) = match model {
            "base" => (1792, 1.27e-3, 120_000, OptimizerKind::Lamb),
            "medium" => (80, 3e-4, 1_000_000, OptimizerKind::Lamb),
            "large" => (256, 1e-4, 220_000, OptimizerKind::Adafactor),
            "mega" => (256, 1e-4, 780_000, OptimizerKind::Adafactor),
            _ => return None,
        };
        Some(TrainConfig {
            batch_size,
            total_steps,
            optimizer,
            hyper: OptHyper {
                lr,
                ..OptHyper::default()
            },
            ..TrainConfig::default()
        })
    }
}

pub struct TrainOutcome<S> {
    pub params: Parameters<S>,
    pub opt_state: OptState<S>,
    /// (step, mean batch loss) per optimizer step.
    pub loss_log: Vec<(u64, f64)>,
}

fn add_params<S: Scalar>(acc: &mut Parameters<S>, other: &Parameters<S>) {
    for ((_, a), (_, b)) in acc.tensors_mut().into_iter().zip(other.tensors()) {
        for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
            *x += *y;
        }
    }
}

fn scale_params<S: Scalar>(p: &mut Parameters<S>, s: S) {
    for (_, t) in p.tensors_mut() {
        for x in t.as_mut_slice() {
            *x *= s;
        }
    }
}

fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

fn check_examples(examples: &[TrainingExample], config: &ModelConfig) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for e in examples {
        if e.token_ids.len() != config.context {
            return Err(Error::BadExample {
                got: e.token_ids.len(),
                expected: config.context,
            });
        }
    }
    Ok(())
}

/// Train from freshly initialized parameters.
pub fn train<S: Scalar>(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    examples: &[TrainingExample],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<S>> {
    let params: Parameters<S> = init_params(model_config)?;
    let refs: Vec<_> = params.tensors().into_iter().map(|(_, t)| t).collect();
    let opt_state = OptState::new(train_config.optimizer, &refs);
    train_from(model_config, train_config, examples, params, opt_state, 0, out_dir)
}

/// Resume from a checkpoint that carries optimizer state.
pub fn resume<S: Scalar>(
    ckpt: Checkpoint<S>,
    train_config: &TrainConfig,
    examples: &[TrainingExample],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<S>> {
    let train_state = ckpt
        .train
        .ok_or_else(|| Error::CorruptCheckpoint("checkpoint has no training state".into()))?;
    train_from(
        &ckpt.config,
        train_config,
        examples,
        ckpt.params,
        train_state.opt_state,
        train_state.step,
        out_dir,
    )
}

fn train_from<S: Scalar>(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    examples: &[TrainingExample],
    mut params: Parameters<S>,
    mut opt_state: OptState<S>,
    start_step: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<S>> {
    model_config.validate()?;
    train_config.validate()?;
    check_examples(examples, model_config)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let n = examples.len();
    let micro = train_config.batch_size / train_config.grad_accum;
    let mut loss_log = Vec::new();
    let mut cursor = start_step * train_config.batch_size as u64;
    let mut perm_epoch = u64::MAX;
    let mut perm: Vec<usize> = Vec::new();

    for step in start_step..train_config.total_steps {
        let mut grads = Parameters::<S>::zeros(model_config);
        let mut loss_sum = S::zero();
        for _ in 0..train_config.grad_accum {
            // Draw the micro-batch in seed-determined order.
            let mut batch = Vec::with_capacity(micro);
            for _ in 0..micro {
                let epoch = cursor / n as u64;
                if epoch != perm_epoch {
                    perm = epoch_permutation(train_config.seed, epoch, n);
                    perm_epoch = epoch;
                }
                batch.push(&examples[perm[(cursor % n as u64) as usize]]);
                cursor += 1;
            }
            // Per-example gradients in parallel, reduced in example order so
            // accumulation is independent of thread scheduling.
            let results: Vec<(S, Parameters<S>)> = batch
                .par_iter()
                .map(|ex| loss_and_grad(&params, model_config, &ex.token_ids))
                .collect::<Result<_>>()?;
            for (loss, g) in &results {
                loss_sum += *loss;
                add_params(&mut grads, g);
            }
        }
        let inv = S::cast_from(1.0 / train_config.batch_size as f64);
        scale_params(&mut grads, inv);
        let batch_loss = (loss_sum * inv).cast_f64();

        {
            let mut p_refs: Vec<&mut crate::tensor::Tensor<S>> =
                params.tensors_mut().into_iter().map(|(_, t)| t).collect();
            let g_list = grads.tensors();
            let g_refs: Vec<&crate::tensor::Tensor<S>> =
                g_list.iter().map(|(_, t)| *t).collect();
            match train_config.optimizer {
                OptimizerKind::Lamb => {
                    lamb_step(&mut p_refs, &g_refs, &mut opt_state, &train_config.hyper)?
                }
                OptimizerKind::Adafactor => {
                    adafactor_step(&mut p_refs, &g_refs, &mut opt_state, &train_config.hyper)?
                }
            }
        }

        let step_no = step + 1;
        loss_log.push((step_no, batch_loss));

        if let Some(dir) = out_dir {
            if train_config.checkpoint_every > 0 && step_no % train_config.checkpoint_every == 0 {
                write_checkpoint(dir, &format!("ckpt_{step_no}.qlmc"), model_config, train_config, &params, &opt_state, step_no)?;
            }
        }
    }

    if let Some(dir) = out_dir {
        write_checkpoint(
            dir,
            "ckpt_final.qlmc",
            model_config,
            train_config,
            &params,
            &opt_state,
            train_config.total_steps,
        )?;
        write_loss_log(dir, &loss_log, train_config.hyper.lr)?;
    }

    Ok(TrainOutcome {
        params,
        opt_state,
        loss_log,
    })
}

fn write_checkpoint<S: Scalar>(
    dir: &Path,
    name: &str,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    params: &Parameters<S>,
    opt_state: &OptState<S>,
    step: u64,
) -> Result<()> {
    checkpoint::save(
        &dir.join(name),
        &Checkpoint {
            config: *model_config,
            params: params.clone(),
            train: Some(TrainState {
                step,
                optimizer: train_config.optimizer,
                hyper: train_config.hyper,
                opt_state: opt_state.clone(),
            }),
        },
    )
}

fn write_loss_log(dir: &Path, log: &[(u64, f64)], lr: f64) -> Result<()> {
    let mut csv = String::from("step,loss,lr\n");
    for (step, loss) in log {
        csv.push_str(&format!("{step},{loss},{lr}\n"));
    }
    std::fs::write(dir.join("loss.csv"), csv)?;
    Ok(())
}

/// exp of the token-count-weighted mean NLL over all next-token predictions.
pub fn perplexity<S: Scalar>(
    params: &Parameters<S>,
    config: &ModelConfig,
    examples: &[TrainingExample],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyEval);
    }
    let totals: Vec<(f64, u64)> = examples
        .par_iter()
        .map(|ex| -> Result<(f64, u64)> {
            let logits = forward(params, config, &ex.token_ids)?;
            let loss = clm_loss(&logits, &ex.token_ids)?.cast_f64();
            let n = (ex.token_ids.len() - 1) as u64;
            Ok((loss * n as f64, n))
        })
        .collect::<Result<_>>()?;
    let (nll, count) = totals
        .into_iter()
        .fold((0.0, 0u64), |(a, b), (x, y)| (a + x, b + y));
    if count == 0 {
        return Err(Error::EmptyEval);
    }
    Ok((nll / count as f64).exp())
}
