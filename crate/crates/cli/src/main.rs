//! `qalam` — command-line front end for the toolkit: preprocessing, BPE
//! training, model training/evaluation, generation, the zero-shot harness,
//! and the GLTR detector.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Logs go to
//! stderr; data goes to files or stdout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use qalam_core::corpus::{
    filter_document, normalize_text, pack_examples, Document, FilterDecision, FilterPolicy,
    RejectReason, TrainingExample, END_OF_TEXT,
};
use qalam_core::detector::{self, Regime};
use qalam_core::generate::SamplerConfig;
use qalam_core::model::{ModelConfig, Variant};
use qalam_core::optim::{OptHyper, OptimizerKind};
use qalam_core::tokenizer::{default_special_tokens, train_bpe, TokenizerModel};
use qalam_core::train::{self, TrainConfig};
use qalam_core::{checkpoint, zeroshot};

#[derive(Parser)]
#[command(name = "qalam", version, about = "Arabic causal language-model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize and filter a raw corpus into one document per line
    Preprocess(PreprocessArgs),
    /// Train a byte-level BPE tokenizer
    TrainBpe(TrainBpeArgs),
    /// Train a model (fresh or resumed from a checkpoint)
    Train(TrainArgs),
    /// Evaluate perplexity of a checkpoint on a text file
    EvalPpl(EvalPplArgs),
    /// Sample a continuation of a prompt
    Generate(GenerateArgs),
    /// Run the zero-shot QA harness over a JSONL dataset
    ZeroshotQa(ZeroshotArgs),
    /// Build a detection dataset and fit the GLTR-feature detector
    TrainDetector(TrainDetectorArgs),
    /// Score a text as human- or machine-written
    Detect(DetectArgs),
    /// Write a colored GLTR token-rank report for a text
    GltrReport(GltrReportArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Input text file(s), one raw document per line
    #[arg(long = "input", num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Manifest listing input files, one path per line (relative to the
    /// manifest's directory)
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Output file: one kept document per line with the end-of-text marker
    #[arg(long)]
    out: PathBuf,
    /// Filter report (key-value text)
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    min_sentences: Option<usize>,
    #[arg(long)]
    max_repeat_fraction: Option<f64>,
}

#[derive(Args)]
struct TrainBpeArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    vocab_size: usize,
    /// Output tokenizer JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file with optional [model] and [train] sections
    #[arg(long)]
    config: Option<PathBuf>,
    /// Size preset supplying model and training defaults
    #[arg(long)]
    preset: Option<String>,
    /// Preprocessed training text, one document per line
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// Output directory for checkpoints and the loss log
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint instead of initializing fresh
    #[arg(long)]
    resume: Option<PathBuf>,

    // [model] overrides
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    context: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    model_seed: Option<u64>,

    // [train] overrides
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    grad_accum: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalPplArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 0.95)]
    top_p: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 1.3)]
    rep_penalty: f64,
    #[arg(long, default_value_t = 3)]
    no_repeat_ngram: usize,
    #[arg(long, default_value_t = 200)]
    max_new: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    greedy: bool,
    /// Write the text here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ZeroshotArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// JSONL with question / answers / year_expected
    #[arg(long)]
    data: PathBuf,
    /// Predictions JSONL (summary line last)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.3)]
    rep_penalty: f64,
}

#[derive(Args)]
struct TrainDetectorArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// Human documents, one per line
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    n_per_class: usize,
    /// short (150 tokens) or long (500 tokens)
    #[arg(long, default_value = "short")]
    regime: String,
    /// Detector model JSON
    #[arg(long)]
    out: PathBuf,
    /// Also dump the labeled detection dataset as JSONL
    #[arg(long)]
    dataset_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.95)]
    top_p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    detector: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    /// Text file to score
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Args)]
struct GltrReportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

// ---------------------------------------------------------------- config file

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    train: TrainSection,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    variant: Option<String>,
    context: Option<usize>,
    d_model: Option<usize>,
    n_heads: Option<usize>,
    n_layers: Option<usize>,
    vocab: Option<usize>,
    seed: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    batch_size: Option<usize>,
    total_steps: Option<u64>,
    optimizer: Option<String>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    eval_every: Option<u64>,
    checkpoint_every: Option<u64>,
    grad_accum: Option<usize>,
    seed: Option<u64>,
}

fn parse_variant(s: &str) -> anyhow::Result<Variant> {
    match s {
        "gpt2" => Ok(Variant::Gpt2),
        "grover" => Ok(Variant::Grover),
        other => bail!("unknown variant `{other}` (expected gpt2 or grover)"),
    }
}

fn parse_optimizer(s: &str) -> anyhow::Result<OptimizerKind> {
    match s {
        "lamb" => Ok(OptimizerKind::Lamb),
        "adafactor" => Ok(OptimizerKind::Adafactor),
        other => bail!("unknown optimizer `{other}` (expected lamb or adafactor)"),
    }
}

fn parse_regime(s: &str) -> anyhow::Result<Regime> {
    match s {
        "short" => Ok(Regime::Short),
        "long" => Ok(Regime::Long),
        other => bail!("unknown regime `{other}` (expected short or long)"),
    }
}

// ---------------------------------------------------------------- file helpers

fn resolve_inputs(input: &InputArgs) -> anyhow::Result<Vec<PathBuf>> {
    let mut paths = input.inputs.clone();
    if let Some(manifest) = &input.manifest {
        let base = manifest.parent().unwrap_or(Path::new("")).to_path_buf();
        let listing = std::fs::read_to_string(manifest)
            .with_context(|| format!("reading manifest {}", manifest.display()))?;
        for line in listing.lines() {
            let line = line.trim();
            if !line.is_empty() {
                paths.push(base.join(line));
            }
        }
    }
    if paths.is_empty() {
        bail!("no input files (use --input or --manifest)");
    }
    Ok(paths)
}

/// One document per non-empty line; a trailing end-of-text marker (as
/// written by `preprocess`) is stripped.
fn read_docs(paths: &[PathBuf]) -> anyhow::Result<Vec<String>> {
    let mut docs = Vec::new();
    for path in paths {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        for line in text.lines() {
            let line = line.strip_suffix(END_OF_TEXT).unwrap_or(line);
            if !line.trim().is_empty() {
                docs.push(line.to_string());
            }
        }
    }
    Ok(docs)
}

fn load_examples(
    tokenizer: &TokenizerModel,
    data: &Path,
    context: usize,
) -> anyhow::Result<Vec<TrainingExample>> {
    let docs = read_docs(&[data.to_path_buf()])?;
    let encoded = docs.iter().map(|d| tokenizer.encode(d));
    Ok(pack_examples(encoded, context, tokenizer.eot_id()))
}

fn load_ckpt(path: &Path) -> anyhow::Result<checkpoint::Checkpoint<f32>> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_tokenizer(path: &Path) -> anyhow::Result<TokenizerModel> {
    TokenizerModel::load(path).with_context(|| format!("loading tokenizer {}", path.display()))
}

// ---------------------------------------------------------------- subcommands

fn cmd_preprocess(args: &PreprocessArgs) -> anyhow::Result<()> {
    let mut policy = FilterPolicy::default();
    if let Some(v) = args.min_sentences {
        policy.min_sentences = v;
    }
    if let Some(v) = args.max_repeat_fraction {
        policy.max_repeat_fraction = v;
    }
    policy.validate()?;

    let paths = resolve_inputs(&args.input)?;
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    let mut out = String::new();
    for path in &paths {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            *counts.entry("total").or_insert(0) += 1;
            let doc = Document {
                id: format!("{}:{}", path.display(), i + 1),
                text: normalize_text(line),
                source: path.display().to_string(),
            };
            match filter_document(&doc, &policy) {
                FilterDecision::Keep => {
                    *counts.entry("kept").or_insert(0) += 1;
                    out.push_str(&doc.text);
                    out.push_str(END_OF_TEXT);
                    out.push('\n');
                }
                FilterDecision::Reject(RejectReason::TooShort) => {
                    *counts.entry("rejected_too_short").or_insert(0) += 1;
                }
                FilterDecision::Reject(RejectReason::Repetitive) => {
                    *counts.entry("rejected_repetitive").or_insert(0) += 1;
                }
            }
        }
    }
    std::fs::write(&args.out, out)?;
    for key in ["total", "kept", "rejected_too_short", "rejected_repetitive"] {
        counts.entry(key).or_insert(0);
    }
    let report: String = counts
        .iter()
        .map(|(k, v)| format!("{k} {v}\n"))
        .collect();
    eprint!("{report}");
    if let Some(path) = &args.report {
        std::fs::write(path, report)?;
    }
    Ok(())
}

fn cmd_train_bpe(args: &TrainBpeArgs) -> anyhow::Result<()> {
    let paths = resolve_inputs(&args.input)?;
    let docs = read_docs(&paths)?;
    let tokenizer = train_bpe(&docs, args.vocab_size, &default_special_tokens())?;
    tokenizer.save(&args.out)?;
    eprintln!(
        "trained tokenizer: {} tokens, {} merges",
        tokenizer.vocab_size(),
        tokenizer.merges().len()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => FileConfig::default(),
    };
    let preset_model = match args.preset.as_deref() {
        Some(name) => Some(match name {
            "base" => ModelConfig::base(),
            "medium" => ModelConfig::medium(),
            "large" => ModelConfig::large(),
            "mega" => ModelConfig::mega(),
            other => bail!("unknown preset `{other}`"),
        }),
        None => None,
    };
    let preset_train = args
        .preset
        .as_deref()
        .and_then(TrainConfig::preset);

    let tokenizer = load_tokenizer(&args.tokenizer)?;

    // Flag > config file > preset > built-in default.
    let dm = preset_model.unwrap_or_else(|| ModelConfig {
        variant: Variant::Grover,
        context: 64,
        d_model: 64,
        n_heads: 4,
        n_layers: 2,
        vocab: tokenizer.vocab_size(),
        seed: 0,
    });
    let variant = match args.variant.as_deref().or(file.model.variant.as_deref()) {
        Some(s) => parse_variant(s)?,
        None => dm.variant,
    };
    let model_config = ModelConfig {
        variant,
        context: args.context.or(file.model.context).unwrap_or(dm.context),
        d_model: args.d_model.or(file.model.d_model).unwrap_or(dm.d_model),
        n_heads: args.n_heads.or(file.model.n_heads).unwrap_or(dm.n_heads),
        n_layers: args.n_layers.or(file.model.n_layers).unwrap_or(dm.n_layers),
        vocab: file.model.vocab.unwrap_or(tokenizer.vocab_size()),
        seed: args.model_seed.or(file.model.seed).unwrap_or(dm.seed),
    };
    if model_config.vocab < tokenizer.vocab_size() {
        bail!(
            "model vocab {} is smaller than the tokenizer's {}",
            model_config.vocab,
            tokenizer.vocab_size()
        );
    }

    let dt = preset_train.unwrap_or_default();
    let optimizer = match args.optimizer.as_deref().or(file.train.optimizer.as_deref()) {
        Some(s) => parse_optimizer(s)?,
        None => dt.optimizer,
    };
    let train_config = TrainConfig {
        batch_size: args.batch_size.or(file.train.batch_size).unwrap_or(dt.batch_size),
        total_steps: args.total_steps.or(file.train.total_steps).unwrap_or(dt.total_steps),
        optimizer,
        hyper: OptHyper {
            lr: args.lr.or(file.train.lr).unwrap_or(dt.hyper.lr),
            weight_decay: args
                .weight_decay
                .or(file.train.weight_decay)
                .unwrap_or(dt.hyper.weight_decay),
            ..dt.hyper
        },
        eval_every: file.train.eval_every.unwrap_or(dt.eval_every),
        checkpoint_every: args
            .checkpoint_every
            .or(file.train.checkpoint_every)
            .unwrap_or(dt.checkpoint_every),
        grad_accum: args.grad_accum.or(file.train.grad_accum).unwrap_or(dt.grad_accum),
        seed: args.seed.or(file.train.seed).unwrap_or(dt.seed),
    };
    model_config.validate()?;
    train_config.validate()?;

    let examples = load_examples(&tokenizer, &args.data, model_config.context)?;
    eprintln!(
        "training {:?}/{} layers, {} examples, {} steps",
        model_config.variant, model_config.n_layers, examples.len(), train_config.total_steps
    );
    std::fs::create_dir_all(&args.out)?;

    let outcome = match &args.resume {
        Some(path) => {
            let ckpt = load_ckpt(path)?;
            if ckpt.config != model_config {
                bail!("checkpoint config differs from the requested model config");
            }
            train::resume::<f32>(ckpt, &train_config, &examples, Some(&args.out))?
        }
        None => train::train::<f32>(&model_config, &train_config, &examples, Some(&args.out))?,
    };
    if let Some((step, loss)) = outcome.loss_log.last() {
        eprintln!("final step {step}: loss {loss:.6}");
    }
    println!("{}", args.out.join("ckpt_final.qlmc").display());
    Ok(())
}

fn cmd_eval_ppl(args: &EvalPplArgs) -> anyhow::Result<()> {
    let ckpt = load_ckpt(&args.ckpt)?;
    let tokenizer = load_tokenizer(&args.tokenizer)?;
    let examples = load_examples(&tokenizer, &args.data, ckpt.config.context)?;
    let ppl = train::perplexity(&ckpt.params, &ckpt.config, &examples)?;
    println!("{ppl}");
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> anyhow::Result<()> {
    let ckpt = load_ckpt(&args.ckpt)?;
    let tokenizer = load_tokenizer(&args.tokenizer)?;
    let sampler = SamplerConfig {
        temperature: args.temperature,
        top_p: args.top_p,
        repetition_penalty: args.rep_penalty,
        no_repeat_ngram: args.no_repeat_ngram,
        max_new_tokens: args.max_new,
        seed: args.seed,
        greedy: args.greedy,
    };
    let text = qalam_core::generate::generate(
        &ckpt.params,
        &ckpt.config,
        &tokenizer,
        &args.prompt,
        &sampler,
    )?;
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_zeroshot(args: &ZeroshotArgs) -> anyhow::Result<()> {
    let ckpt = load_ckpt(&args.ckpt)?;
    let tokenizer = load_tokenizer(&args.tokenizer)?;
    let items = zeroshot::read_qa_jsonl(&args.data)?;
    let sampler = SamplerConfig {
        greedy: true,
        repetition_penalty: args.rep_penalty,
        no_repeat_ngram: 3,
        ..SamplerConfig::default()
    };
    let (predictions, summary) =
        zeroshot::evaluate_qa(&ckpt.params, &ckpt.config, &tokenizer, &items, &sampler)?;
    zeroshot::write_predictions_jsonl(&args.out, &predictions, &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn cmd_train_detector(args: &TrainDetectorArgs) -> anyhow::Result<()> {
    let ckpt = load_ckpt(&args.ckpt)?;
    let tokenizer = load_tokenizer(&args.tokenizer)?;
    let regime = parse_regime(&args.regime)?;
    let docs = read_docs(&[args.data.clone()])?;
    let sampler = SamplerConfig {
        top_p: args.top_p,
        seed: args.seed,
        ..SamplerConfig::default()
    };
    let dataset = detector::build_detection_dataset(
        &ckpt.params,
        &ckpt.config,
        &tokenizer,
        &docs,
        args.n_per_class,
        regime,
        &sampler,
    )?;
    if let Some(path) = &args.dataset_out {
        let mut jsonl = String::new();
        for e in &dataset {
            jsonl.push_str(&serde_json::to_string(e)?);
            jsonl.push('\n');
        }
        std::fs::write(path, jsonl)?;
    }
    let ckpt_id = args.ckpt.display().to_string();
    let trained = detector::train_detector(
        &ckpt.params,
        &ckpt.config,
        &tokenizer,
        &dataset,
        regime,
        &ckpt_id,
        args.seed,
    )?;
    detector::save_detector(&args.out, &trained.model)?;
    println!("{}", trained.heldout_f1);
    eprintln!(
        "detector: train accuracy {:.4}, held-out F1 {:.4}",
        trained.train_accuracy, trained.heldout_f1
    );
    Ok(())
}

fn cmd_detect(args: &DetectArgs) -> anyhow::Result<()> {
    let ckpt = load_ckpt(&args.ckpt)?;
    let tokenizer = load_tokenizer(&args.tokenizer)?;
    let model = detector::load_detector(&args.detector)?;
    let text = std::fs::read_to_string(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let p = detector::detect(&model, &ckpt.params, &ckpt.config, &tokenizer, &text)?;
    let label = if p >= 0.5 { "machine" } else { "human" };
    println!("{p} {label}");
    Ok(())
}

fn cmd_gltr_report(args: &GltrReportArgs) -> anyhow::Result<()> {
    let ckpt = load_ckpt(&args.ckpt)?;
    let tokenizer = load_tokenizer(&args.tokenizer)?;
    let text = std::fs::read_to_string(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let annotations = detector::gltr_annotate(&ckpt.params, &ckpt.config, &tokenizer, &text)?;
    detector::gltr_html_report(&tokenizer, &annotations, &args.out)?;
    let features = detector::rank_histogram(&annotations)?;
    eprintln!(
        "annotated {} tokens: green {:.2} yellow {:.2} red {:.2} purple {:.2}",
        annotations.len(),
        features[0],
        features[1],
        features[2],
        features[3]
    );
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::TrainBpe(a) => cmd_train_bpe(a),
        Command::Train(a) => cmd_train(a),
        Command::EvalPpl(a) => cmd_eval_ppl(a),
        Command::Generate(a) => cmd_generate(a),
        Command::ZeroshotQa(a) => cmd_zeroshot(a),
        Command::TrainDetector(a) => cmd_train_detector(a),
        Command::Detect(a) => cmd_detect(a),
        Command::GltrReport(a) => cmd_gltr_report(a),
    }
}

fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            2
        }
    }
}

fn main() {
    std::process::exit(run(std::env::args_os()));
}
