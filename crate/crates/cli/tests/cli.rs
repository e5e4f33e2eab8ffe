use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn narrate(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_narrate")).args(args).current_dir(dir).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = narrate(dir, args);
    assert_eq!(out.status.code(), Some(0), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = narrate(tmp.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn train_requires_a_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let out = narrate(tmp.path(), &["train", "--config", "t.json", "--ledger", "l"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--dataset"));
}

#[test]
fn domain_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = narrate(tmp.path(), &["split", "--dataset", "missing.csv", "--out", "s.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));
}

#[test]
fn obfuscate_and_untranslate() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("raw.csv"), "id,age,town,outcome\n1,20,a,yes\n2,30,b,no\n3,40,a,yes\n4,50,b,no\n").unwrap();
    fs::write(
        d.join("spec.json"),
        r#"{"dataset": "raw", "steps": [
            {"op": "affine", "column": "age", "a": 12, "rename": "months"},
            {"op": "relabel_values", "column": "town", "map": {"a": "North", "b": "South"}, "rename": "region"}
        ]}"#,
    )
    .unwrap();
    ok(d, &["obfuscate", "--dataset", "raw.csv", "--target", "outcome", "--spec", "spec.json", "--out", "masked.csv"]);
    let masked = fs::read_to_string(d.join("masked.csv")).unwrap();
    assert!(masked.starts_with("id,months,region,outcome\n1,240,North,yes\n"), "{masked}");
    assert!(d.join("masked.schema.json").exists());
    let back = ok(d, &["untranslate", "--spec", "spec.json", "--text", "months > 300 and region is South"]);
    assert_eq!(back.trim(), "age > 25 and town is b");
}

#[test]
fn full_mock_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("overseer.json"), r#"{"default": "{\"narration\": \"high x1 means a spy\", \"prompt\": \"label 1 if x1 is large\"}"}"#).unwrap();
    fs::write(d.join("underling.json"), r#"{"rules": [{"contains": "x1: 7", "reply": "1"}, {"contains": "x1: 8", "reply": "1"}], "default": "0"}"#).unwrap();
    fs::write(
        d.join("trainer.json"),
        r#"{"patience": 2,
            "overseer": {"kind": "scripted", "script": "overseer.json", "model": "scripted-overseer"},
            "underling": {"kind": "scripted", "script": "underling.json", "model": "scripted-underling"}}"#,
    )
    .unwrap();

    ok(d, &["synth", "--preset", "espionage", "--seed", "3", "--out", "data/espionage.csv"]);
    ok(d, &["split", "--dataset", "data/espionage.csv", "--split-seed", "5", "--out", "split.json"]);
    for (seed, k) in [("1", "3"), ("2", "3"), ("1", "10"), ("2", "10")] {
        let s = ok(d, &["train", "--dataset", "data/espionage.csv", "--split", "split.json", "--config", "trainer.json", "--ledger", "ledger", "--seed", seed, "--examples", k]);
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert!(v["test_s"].as_f64().unwrap() > 0.0);
    }
    // Rerunning a finished run is a no-op.
    let before = fs::read(d.join("ledger/entries.jsonl")).unwrap();
    ok(d, &["train", "--dataset", "data/espionage.csv", "--split", "split.json", "--config", "trainer.json", "--ledger", "ledger", "--seed", "1", "--examples", "3"]);
    assert_eq!(fs::read(d.join("ledger/entries.jsonl")).unwrap(), before);

    let ens: serde_json::Value = serde_json::from_str(&ok(d, &["ensemble", "--dataset", "data/espionage.csv", "--ledger", "ledger", "--history"])).unwrap();
    assert!(!ens.as_array().unwrap().is_empty());
    ok(d, &["baseline", "--dataset", "data/espionage.csv", "--split", "split.json", "--ledger", "ledger"]);
    ok(d, &["report", "--ledger", "ledger", "--out", "out"]);
    ok(d, &["export", "--ledger", "ledger", "--out", "out/csv"]);
    ok(d, &["herdan", "--ledger", "ledger", "--out", "out"]);
    let summary = ok(d, &["stats", "example-count", "--ledger", "ledger", "--out", "out"]);
    assert!(summary.starts_with("2 pairs"), "{summary}");
    let beta: serde_json::Value = serde_json::from_str(&ok(d, &["stats", "herdan", "--text", "a b c d"])).unwrap();
    assert_eq!(beta["beta"], 1.0);
    fs::write(d.join("pairs.csv"), "a,b\n1,0\n0,2\n3,0\n").unwrap();
    let w: serde_json::Value = serde_json::from_str(&ok(d, &["stats", "wilcoxon", "--csv", "pairs.csv"])).unwrap();
    assert_eq!(w["p_value"], 0.75);

    for f in ["tables_espionage.md", "trend_espionage.csv", "trend_espionage.svg", "summary.md", "herdan_espionage.csv", "example_count.svg", "csv/runs.csv", "csv/predictions.csv"] {
        assert!(d.join("out").join(f).exists(), "missing {f}");
    }
    let table = fs::read_to_string(d.join("out/tables_espionage.md")).unwrap();
    assert!(table.contains("[published]"));
    assert!(table.contains("Lower is better."));

    // The report is a pure function of the ledger.
    ok(d, &["report", "--ledger", "ledger", "--out", "again"]);
    for f in ["tables_espionage.md", "trend_espionage.svg", "summary.md"] {
        assert_eq!(fs::read(d.join("out").join(f)).unwrap(), fs::read(d.join("again").join(f)).unwrap(), "{f}");
    }
}
