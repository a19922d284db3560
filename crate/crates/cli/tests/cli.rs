use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use match_core::datamodel::{load_dataset, LabelKind, SplitPlan};
use match_core::evaluation::{kendall_tau_b, CorrelationReport, Stat};
use match_core::objectives::batch_loss;
use match_core::training::Checkpoint;
use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_match"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

const FAST: [&str; 4] = [
    "--set",
    "training.enhancement.shared_dim=64",
    "--set",
    "training.max_epochs=3",
];

fn synth(dir: &Path) {
    ok(dir, &["synth", "--output", "data.jsonl", "--pairs", "100"]);
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--dataset", "data.jsonl", "--output", out];
    args.extend(FAST);
    args.extend(extra);
    run(dir, &args)
}

fn read_jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn train_single_experiment_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path());
    for out in ["a", "b"] {
        let o = train(t.path(), out, &["--experiments", "1", "--seed", "0"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ckpt = |d: &str| fs::read(t.path().join(d).join("checkpoints/split-0.ckpt")).unwrap();
    assert_eq!(ckpt("a"), ckpt("b"));
    assert!(!t.path().join("a/checkpoints/split-1.ckpt").exists());
    for f in [
        "config.toml",
        "report.json",
        "report.csv",
        "report.txt",
        "history/split-0.jsonl",
        "splits/split-0.json",
    ] {
        assert!(t.path().join("a").join(f).is_file(), "{f}");
    }
    let config = fs::read_to_string(t.path().join("a/config.toml")).unwrap();
    assert!(config.contains("shared_dim = 64"));
    assert!(config.contains("max_epochs = 3"));
}

#[test]
fn usage_errors_exit_two() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path());
    assert_eq!(code(&run(t.path(), &["train", "--output", "x"])), 2);
    assert_eq!(code(&run(t.path(), &["train", "--dataset", "missing.jsonl"])), 2);
    assert_eq!(code(&train(t.path(), "x", &["--set", "training.bogus=1"])), 2);
    assert_eq!(code(&train(t.path(), "x", &["--set", "training.patience=0"])), 2);
    assert_eq!(code(&run(t.path(), &["train", "--no-such-flag"])), 2);
    assert_eq!(code(&run(t.path(), &["frobnicate"])), 2);
    fs::write(
        t.path().join("bad.toml"),
        "[training]\nlearning_rate = 1e-3\ncolour = 1\n",
    )
    .unwrap();
    assert_eq!(
        code(&run(
            t.path(),
            &["train", "--config", "bad.toml", "--dataset", "data.jsonl"]
        )),
        2
    );
}

#[test]
fn runtime_errors_exit_one() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("broken.jsonl"), "{not json}\n").unwrap();
    let o = run(t.path(), &["train", "--dataset", "broken.jsonl", "--output", "r"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
    fs::write(t.path().join("raw.json"), r#"[{"prompt": "x"}]"#).unwrap();
    let o = run(
        t.path(),
        &[
            "convert", "--format", "conala", "--input", "raw.json", "--output", "d.jsonl",
        ],
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn rerun_requires_force() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path());
    assert_eq!(code(&train(t.path(), "r", &["--experiments", "1"])), 0);
    let again = train(t.path(), "r", &["--experiments", "1"]);
    assert_eq!(code(&again), 2);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert_eq!(code(&train(t.path(), "r", &["--experiments", "1", "--force"])), 0);
}

#[test]
fn config_file_and_overrides() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path());
    fs::write(
        t.path().join("run.toml"),
        "dataset = \"data.jsonl\"\noutput_dir = \"cfg-run\"\nexperiments = 2\n\n[training]\nmax_epochs = 2\n\n[training.enhancement]\nshared_dim = 64\nvariant = \"cross_attention\"\nheads = 4\n",
    )
    .unwrap();
    ok(
        t.path(),
        &[
            "train",
            "--config",
            "run.toml",
            "--set",
            "training.batch_size=32",
            "--jobs",
            "2",
        ],
    );
    let resolved = fs::read_to_string(t.path().join("cfg-run/config.toml")).unwrap();
    assert!(resolved.contains("batch_size = 32"));
    assert!(resolved.contains("variant = \"cross_attention\""));
    let report: CorrelationReport =
        serde_json::from_str(&fs::read_to_string(t.path().join("cfg-run/report.json")).unwrap()).unwrap();
    assert_eq!(report.experiments, 2);
    assert_eq!(report.metrics[0].metric, "MATCH(Toy(T), CA)");
}

#[test]
fn score_reproduces_validation_loss() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path());
    assert_eq!(code(&train(t.path(), "r", &["--experiments", "1"])), 0);
    let dataset = load_dataset(&t.path().join("data.jsonl"), None).unwrap();
    let plan = SplitPlan::from_json(&fs::read_to_string(t.path().join("r/splits/split-0.json")).unwrap()).unwrap();
    let validation: String = dataset
        .pairs()
        .iter()
        .filter(|p| plan.partition_of(&p.id) == Some(match_core::datamodel::Partition::Validation))
        .map(|p| serde_json::json!({"id": p.id, "task": p.task, "code": p.code}).to_string() + "\n")
        .collect();
    fs::write(t.path().join("val.jsonl"), validation).unwrap();
    ok(
        t.path(),
        &[
            "score",
            "--checkpoint",
            "r/checkpoints/split-0.ckpt",
            "--input",
            "val.jsonl",
            "--output",
            "val_scores.jsonl",
            "--jobs",
            "3",
        ],
    );
    let scored: Vec<(f64, f64)> = read_jsonl(&t.path().join("val_scores.jsonl"))
        .iter()
        .map(|r| {
            let id = r["id"].as_str().unwrap();
            (r["score"].as_f64().unwrap(), dataset.get(id).unwrap().label.value())
        })
        .collect();
    let ckpt = Checkpoint::load(&t.path().join("r/checkpoints/split-0.ckpt")).unwrap();
    let (loss, _) = batch_loss(&scored, LabelKind::Continuous, Some(4.0), &ckpt.meta.config.loss).unwrap();
    assert!((loss - ckpt.meta.best_validation_loss).abs() < 1e-9);
}

#[test]
fn score_handles_repeats_errors_and_empty_input() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path());
    assert_eq!(code(&train(t.path(), "r", &["--experiments", "1"])), 0);
    let rec = r#"{"task": "sort the list", "code": "def f ( x ) : return sorted ( x )"}"#;
    fs::write(t.path().join("in.jsonl"), format!("{rec}\n\n{rec}\n")).unwrap();
    let out = ok(
        t.path(),
        &[
            "score",
            "--checkpoint",
            "r/checkpoints/split-0.ckpt",
            "--input",
            "in.jsonl",
        ],
    );
    let rows: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["score"], rows[1]["score"]);
    assert_eq!(rows[1]["id"], "3");
    let s = rows[0]["score"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&s));

    fs::write(
        t.path().join("mixed.jsonl"),
        format!("{rec}\n{{\"task\": \" \", \"code\": \"x\"}}\nnot json\n"),
    )
    .unwrap();
    let out = run(
        t.path(),
        &[
            "score",
            "--checkpoint",
            "r/checkpoints/split-0.ckpt",
            "--input",
            "mixed.jsonl",
        ],
    );
    assert_eq!(code(&out), 1);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert_eq!(text.matches("\"error\"").count(), 2);

    fs::write(t.path().join("empty.jsonl"), "").unwrap();
    let out = ok(
        t.path(),
        &[
            "score",
            "--checkpoint",
            "r/checkpoints/split-0.ckpt",
            "--input",
            "empty.jsonl",
        ],
    );
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no records"));
}

#[test]
fn evaluate_passes_external_scores_through() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path());
    assert_eq!(code(&train(t.path(), "r", &["--experiments", "2", "--seed", "3"])), 0);
    let dataset = load_dataset(&t.path().join("data.jsonl"), None).unwrap();
    let external: String = dataset
        .pairs()
        .iter()
        .map(|p| serde_json::json!({"id": p.id, "score": p.code.len() as f64}).to_string() + "\n")
        .collect();
    fs::write(t.path().join("ext.jsonl"), external).unwrap();
    ok(
        t.path(),
        &[
            "evaluate",
            "--dataset",
            "data.jsonl",
            "--scores",
            "r/scores/split-0.jsonl",
            "--scores",
            "r/scores/split-1.jsonl",
            "--output",
            "ev",
            "--baseline",
            "CodeBERTScore=ext.jsonl",
        ],
    );
    let report: CorrelationReport =
        serde_json::from_str(&fs::read_to_string(t.path().join("ev/report.json")).unwrap()).unwrap();
    let names: Vec<&str> = report.metrics.iter().map(|m| m.metric.as_str()).collect();
    assert_eq!(
        names,
        [
            "MATCH",
            "BLEU",
            "ROUGE-1",
            "ROUGE-2",
            "ROUGE-L",
            "chrF",
            "CodeBERTScore"
        ]
    );

    // Hand aggregation of the external row.
    let mut taus = Vec::new();
    for i in 0..2 {
        let rows = read_jsonl(&t.path().join(format!("r/scores/split-{i}.jsonl")));
        let ids: Vec<&str> = rows.iter().map(|r| r["id"].as_str().unwrap()).collect();
        let x: Vec<f64> = ids
            .iter()
            .map(|id| dataset.get(id).unwrap().code.len() as f64)
            .collect();
        let y: Vec<f64> = ids.iter().map(|id| dataset.get(id).unwrap().label.value()).collect();
        taus.push(kendall_tau_b(&x, &y).unwrap());
    }
    let mean = (taus[0] + taus[1]) / 2.0;
    let std = ((taus[0] - mean).powi(2) + (taus[1] - mean).powi(2)).sqrt();
    let row = &report.metrics[6].summary.tau;
    assert!((row.mean.value().unwrap() - mean).abs() < 1e-12);
    assert!((row.std.value().unwrap() - std).abs() < 1e-12);

    // The trained row reproduces the train command's own report.
    let trained: CorrelationReport =
        serde_json::from_str(&fs::read_to_string(t.path().join("r/report.json")).unwrap()).unwrap();
    assert_eq!(trained.metrics[0].summary, report.metrics[0].summary);
}

#[test]
fn evaluate_lists_mismatched_ids() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path());
    fs::write(
        t.path().join("s.jsonl"),
        "{\"id\": \"syn-0000\", \"score\": 0.1}\n{\"id\": \"ghost\", \"score\": 0.2}\n",
    )
    .unwrap();
    let out = run(
        t.path(),
        &[
            "evaluate",
            "--dataset",
            "data.jsonl",
            "--scores",
            "s.jsonl",
            "--output",
            "ev",
        ],
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("ghost"));

    fs::write(
        t.path().join("s.jsonl"),
        "{\"id\": \"syn-0000\", \"score\": 0.1}\n{\"id\": \"syn-0001\", \"score\": 0.2}\n",
    )
    .unwrap();
    fs::write(t.path().join("b.jsonl"), "{\"id\": \"syn-0000\", \"score\": 0.1}\n").unwrap();
    let out = run(
        t.path(),
        &[
            "evaluate",
            "--dataset",
            "data.jsonl",
            "--scores",
            "s.jsonl",
            "--output",
            "ev2",
            "--baseline",
            "B=b.jsonl",
        ],
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("syn-0001"));
}

#[test]
fn convert_adapters() {
    let t = tempfile::tempdir().unwrap();
    fs::write(
        t.path().join("conala.json"),
        r#"[{"question_id": 7, "intent": "Erase all the contents", "snippet": "open('f', 'w').close()", "grade": 3.75}]"#,
    )
    .unwrap();
    ok(
        t.path(),
        &[
            "convert",
            "--format",
            "conala",
            "--input",
            "conala.json",
            "--output",
            "c.jsonl",
        ],
    );
    let ds = load_dataset(&t.path().join("c.jsonl"), Some(LabelKind::Continuous)).unwrap();
    assert_eq!(ds.pairs()[0].label.value(), 3.75);
    assert_eq!(ds.scale(), Some(4.0));

    fs::write(
        t.path().join("mbpp.jsonl"),
        "{\"task_id\": 2, \"text\": \"t\", \"code\": \"c\", \"pass_ratio\": 0.25}\n",
    )
    .unwrap();
    ok(
        t.path(),
        &[
            "convert",
            "--format",
            "mbpp_eval",
            "--input",
            "mbpp.jsonl",
            "--output",
            "m.jsonl",
        ],
    );
    let ds = load_dataset(&t.path().join("m.jsonl"), None).unwrap();
    assert_eq!(ds.scale(), Some(1.0));

    fs::write(
        t.path().join("he.jsonl"),
        "{\"task_id\": \"HumanEval/1\", \"prompt\": \"p\", \"completion\": \"c\", \"passed\": false}\n",
    )
    .unwrap();
    ok(
        t.path(),
        &[
            "convert",
            "--format",
            "humaneval",
            "--input",
            "he.jsonl",
            "--output",
            "h.jsonl",
        ],
    );
    let ds = load_dataset(&t.path().join("h.jsonl"), None).unwrap();
    assert_eq!(ds.label_kind(), LabelKind::Binary);

    let again = run(
        t.path(),
        &[
            "convert",
            "--format",
            "humaneval",
            "--input",
            "he.jsonl",
            "--output",
            "h.jsonl",
        ],
    );
    assert_eq!(code(&again), 2);
    assert_eq!(
        code(&run(
            t.path(),
            &["convert", "--format", "csv", "--input", "he.jsonl", "--output", "z"]
        )),
        2
    );
}

#[test]
fn compare_merges_reports() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path());
    assert_eq!(code(&train(t.path(), "lin", &["--experiments", "2"])), 0);
    assert_eq!(
        code(&train(
            t.path(),
            "ca",
            &[
                "--experiments",
                "2",
                "--set",
                "training.enhancement.variant=cross_attention"
            ]
        )),
        0
    );
    let out = ok(
        t.path(),
        &["compare", "lin/report.json", "ca/report.json", "--output", "both.json"],
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("MATCH(Toy(T), Linear)"));
    assert!(text.contains("MATCH(Toy(T), CA)"));
    let merged: CorrelationReport =
        serde_json::from_str(&fs::read_to_string(t.path().join("both.json")).unwrap()).unwrap();
    assert_eq!(merged.metrics.len(), 7);
    assert!(merged.metrics.iter().all(|m| m.summary.tau.mean != Stat::Undef));
}
