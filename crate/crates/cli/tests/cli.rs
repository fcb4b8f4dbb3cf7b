//! End-to-end tests of the `qalam` binary: every subcommand, exit codes,
//! and file-format round trips between producing and consuming commands.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qalam_core::checkpoint::{save, Checkpoint};
use qalam_core::model::{ModelConfig, Parameters, Variant};

fn qalam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qalam"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn help_exits_zero() {
    let out = qalam(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("Usage"));
    let out = qalam(&["generate", "--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn unknown_subcommand_exits_one() {
    let out = qalam(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_file_exits_two() {
    let out = qalam(&[
        "eval-ppl",
        "--ckpt",
        "/nonexistent.qlmc",
        "--tokenizer",
        "/nonexistent.json",
        "--data",
        "/nonexistent.txt",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

fn write_byte_tokenizer(dir: &Path) -> PathBuf {
    let path = dir.join("tok.json");
    qalam_core::tokenizer::TokenizerModel::byte_only()
        .save(&path)
        .unwrap();
    path
}

#[test]
fn uniform_model_ppl_equals_vocab() {
    let dir = tempfile::tempdir().unwrap();
    let config = ModelConfig {
        variant: Variant::Gpt2,
        context: 16,
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        vocab: 260,
        seed: 0,
    };
    // All-zero parameters produce identical logits at every position, so
    // the predictive distribution is uniform and PPL equals the vocab size.
    let ckpt_path = dir.path().join("uniform.qlmc");
    save(
        &ckpt_path,
        &Checkpoint {
            config,
            params: Parameters::<f32>::zeros(&config),
            train: None,
        },
    )
    .unwrap();
    let tok = write_byte_tokenizer(dir.path());
    let data = dir.path().join("eval.txt");
    std::fs::write(&data, "نص للتقييم هنا مع كلمات كافية لتعبئة نافذة واحدة على الأقل\n").unwrap();

    let out = qalam(&[
        "eval-ppl",
        "--ckpt",
        ckpt_path.to_str().unwrap(),
        "--tokenizer",
        tok.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_success(&out);
    let ppl: f64 = stdout(&out).trim().parse().unwrap();
    assert!((ppl - 260.0).abs() < 1e-3, "ppl was {ppl}");
}

fn write_corpus(path: &Path) {
    let mut lines = String::new();
    let subjects = ["المدينة", "الجامعة", "المكتبة", "الصحيفة", "الإذاعة", "الوزارة"];
    for (i, s) in subjects.iter().enumerate() {
        lines.push_str(&format!(
            "أعلنت {s} اليوم عن خطة جديدة رقم {i} لتطوير الخدمات العامة في المنطقة الشمالية . \
             وقال المتحدث الرسمي إن المشروع سيبدأ خلال الأشهر القادمة بدعم واسع من السكان . \
             وأضاف أن التمويل اللازم تم تأمينه بالكامل من الميزانية العامة للدولة هذا العام .\n"
        ));
    }
    // One junk line the filter should reject for being too short.
    lines.push_str("قصير .\n");
    std::fs::write(path, lines).unwrap();
}

#[test]
fn pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.txt");
    write_corpus(&raw);

    // preprocess -> docs + report
    let docs = dir.path().join("docs.txt");
    let report = dir.path().join("report.txt");
    let out = qalam(&[
        "preprocess",
        "--input",
        raw.to_str().unwrap(),
        "--out",
        docs.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_success(&out);
    let doc_text = std::fs::read_to_string(&docs).unwrap();
    assert_eq!(doc_text.lines().count(), 6);
    assert!(doc_text.lines().all(|l| l.ends_with("<|endoftext|>")));
    let report_text = std::fs::read_to_string(&report).unwrap();
    assert!(report_text.contains("total 7"));
    assert!(report_text.contains("kept 6"));
    assert!(report_text.contains("rejected_too_short 1"));

    // train-bpe consumes preprocess output
    let tok = dir.path().join("tok.json");
    let out = qalam(&[
        "train-bpe",
        "--input",
        docs.to_str().unwrap(),
        "--vocab-size",
        "320",
        "--out",
        tok.to_str().unwrap(),
    ]);
    assert_success(&out);

    // train consumes tokenizer + docs; config file with a flag override
    let cfg = dir.path().join("train.toml");
    std::fs::write(
        &cfg,
        "[model]\ncontext = 128\nd_model = 16\nn_heads = 2\nn_layers = 1\nseed = 3\n\
         \n[train]\nbatch_size = 2\ntotal_steps = 5\nlr = 1e-3\ncheckpoint_every = 2\nseed = 9\n",
    )
    .unwrap();
    let ckpt_dir = dir.path().join("run");
    let out = qalam(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--total-steps",
        "3", // flag beats the config file's 5
        "--data",
        docs.to_str().unwrap(),
        "--tokenizer",
        tok.to_str().unwrap(),
        "--out",
        ckpt_dir.to_str().unwrap(),
    ]);
    assert_success(&out);
    let ckpt = ckpt_dir.join("ckpt_final.qlmc");
    assert!(ckpt.exists());
    assert!(ckpt_dir.join("ckpt_2.qlmc").exists());
    let loss_csv = std::fs::read_to_string(ckpt_dir.join("loss.csv")).unwrap();
    assert!(loss_csv.starts_with("step,loss,lr\n"));
    assert_eq!(loss_csv.lines().count(), 4, "3 steps after override");

    // eval-ppl consumes the trained checkpoint
    let out = qalam(&[
        "eval-ppl",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--tokenizer",
        tok.to_str().unwrap(),
        "--data",
        docs.to_str().unwrap(),
    ]);
    assert_success(&out);
    let ppl: f64 = stdout(&out).trim().parse().unwrap();
    assert!(ppl.is_finite() && ppl > 1.0);

    // generate is seed-reproducible
    let gen_args = [
        "generate",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--tokenizer",
        tok.to_str().unwrap(),
        "--prompt",
        "أعلنت المدينة",
        "--max-new",
        "20",
        "--seed",
        "5",
    ];
    let a = qalam(&gen_args);
    let b = qalam(&gen_args);
    assert_success(&a);
    assert_eq!(a.stdout, b.stdout);
    assert!(stdout(&a).contains("أعلنت المدينة"));

    // zeroshot-qa writes predictions + summary
    let qa = dir.path().join("qa.jsonl");
    std::fs::write(
        &qa,
        "{\"question\":\"متى بدأ المشروع ؟\",\"answers\":[\"هذا العام\"],\"year_expected\":false}\n\
         {\"question\":\"من أعلن الخطة ؟\",\"answers\":[\"المدينة\"]}\n",
    )
    .unwrap();
    let preds = dir.path().join("preds.jsonl");
    let out = qalam(&[
        "zeroshot-qa",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--tokenizer",
        tok.to_str().unwrap(),
        "--data",
        qa.to_str().unwrap(),
        "--out",
        preds.to_str().unwrap(),
    ]);
    assert_success(&out);
    let summary: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(summary["count"], 2);
    let preds_text = std::fs::read_to_string(&preds).unwrap();
    assert_eq!(preds_text.lines().count(), 3, "2 predictions + summary");

    // train-detector -> detector.json consumed by detect
    let detector = dir.path().join("detector.json");
    let dataset = dir.path().join("detection.jsonl");
    let out = qalam(&[
        "train-detector",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--tokenizer",
        tok.to_str().unwrap(),
        "--data",
        docs.to_str().unwrap(),
        "--n-per-class",
        "5",
        "--regime",
        "short",
        "--out",
        detector.to_str().unwrap(),
        "--dataset-out",
        dataset.to_str().unwrap(),
    ]);
    assert_success(&out);
    let f1: f64 = stdout(&out).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    assert_eq!(
        std::fs::read_to_string(&dataset).unwrap().lines().count(),
        10
    );

    let sample = dir.path().join("sample.txt");
    std::fs::write(&sample, "أعلنت الوزارة اليوم عن خطة جديدة لتطوير الخدمات العامة في المنطقة .\n").unwrap();
    let out = qalam(&[
        "detect",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--detector",
        detector.to_str().unwrap(),
        "--tokenizer",
        tok.to_str().unwrap(),
        "--in",
        sample.to_str().unwrap(),
    ]);
    assert_success(&out);
    let line = stdout(&out);
    let mut parts = line.split_whitespace();
    let p: f64 = parts.next().unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert!(matches!(parts.next(), Some("machine") | Some("human")));

    // gltr-report writes the HTML visualization
    let html_path = dir.path().join("report.html");
    let out = qalam(&[
        "gltr-report",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--tokenizer",
        tok.to_str().unwrap(),
        "--in",
        sample.to_str().unwrap(),
        "--out",
        html_path.to_str().unwrap(),
    ]);
    assert_success(&out);
    let html = std::fs::read_to_string(&html_path).unwrap();
    assert!(html.contains("dir=\"rtl\""));
    assert!(html.contains("class=\"tok\""));
}

#[test]
fn train_is_seed_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.txt");
    write_corpus(&raw);
    let docs = dir.path().join("docs.txt");
    let out = qalam(&[
        "preprocess",
        "--input",
        raw.to_str().unwrap(),
        "--out",
        docs.to_str().unwrap(),
    ]);
    assert_success(&out);
    let tok = write_byte_tokenizer(dir.path());

    let run = |out_dir: &Path| {
        let out = qalam(&[
            "train",
            "--data",
            docs.to_str().unwrap(),
            "--tokenizer",
            tok.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--context",
            "32",
            "--d-model",
            "16",
            "--n-heads",
            "2",
            "--n-layers",
            "1",
            "--batch-size",
            "2",
            "--total-steps",
            "3",
            "--seed",
            "7",
        ]);
        assert_success(&out);
        std::fs::read(out_dir.join("ckpt_final.qlmc")).unwrap()
    };
    let a = run(&dir.path().join("a"));
    let b = run(&dir.path().join("b"));
    assert_eq!(a, b, "same seed must give bit-identical checkpoints");
}
