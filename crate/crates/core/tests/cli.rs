mod common;

use std::path::Path;

use common::{fixed_generation, fixture, http_generation, run_cli, set_test_key, write_config, MockServer, Script};

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_candidates(dir: &Path, name: &str, rows: &[(&str, &str)]) -> std::path::PathBuf {
    let text: String = rows
        .iter()
        .map(|(id, caption)| serde_json::json!({"image_id": id, "caption": caption}).to_string() + "\n")
        .collect();
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn stats_reports_each_split() {
    let (code, out, err) = run_cli(&["stats", "--corpus", path(&fixture("engineered.jsonl"))]);
    assert_eq!(code, 0, "{err}");
    for split in ["train", "val", "test"] {
        assert!(out.contains(split), "{out}");
    }
    let (code, out, _) = run_cli(&["stats", "--corpus", path(&fixture("engineered.jsonl")), "--split", "test"]);
    assert_eq!(code, 0);
    assert!(out.contains('4'), "{out}");
}

#[test]
fn missing_corpus_is_a_usage_error() {
    let (code, _, err) = run_cli(&["stats", "--corpus", "/nonexistent/corpus.jsonl"]);
    assert_eq!(code, 2);
    assert!(!err.is_empty());
    let (code, _, _) = run_cli(&["no-such-command"]);
    assert_eq!(code, 2);
}

#[test]
fn unauthorized_backend_aborts_without_scores() {
    set_test_key();
    let server = MockServer::start(Script::Unauthorized);
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &http_generation(&server.url));
    let (code, _, err) = run_cli(&["eval", "--config", path(&cfg)]);
    assert_eq!(code, 2, "{err}");
    assert!(!dir.path().join("out/scores.jsonl").exists());
    // At most one request per in-flight worker; none are retried.
    assert!(server.hits() <= 4, "{} requests", server.hits());
}

#[test]
fn failed_item_is_flagged_and_skipped() {
    set_test_key();
    let server = MockServer::start(Script::FailMatching("grey rock"));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &http_generation(&server.url));
    let (code, out, err) = run_cli(&["eval", "--config", path(&cfg)]);
    assert_eq!(code, 1, "{out}{err}");
    assert!(out.contains("failed=1"), "{out}");
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["failed_items"][0]["image_id"], "eng-2");
    let scores = std::fs::read_to_string(dir.path().join("out/scores.jsonl")).unwrap();
    let runs = capeval::evalrunner::parse_line_records(&scores).unwrap();
    assert_eq!(runs[0].per_item.len(), 3);
    assert!(!runs[0].per_item.contains_key("eng-2"));
}

#[test]
fn missing_api_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let generation = http_generation("http://127.0.0.1:9/v1").replace(common::KEY_ENV, "CAPEVAL_TEST_KEY_UNSET");
    let cfg = write_config(dir.path(), &generation);
    let (code, _, err) = run_cli(&["eval", "--config", path(&cfg)]);
    assert_eq!(code, 2);
    assert!(err.contains("CAPEVAL_TEST_KEY_UNSET"), "{err}");
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &fixed_generation("fixed_gold.jsonl"));
    for command in ["eval", "generate"] {
        let (code, out, err) = run_cli(&[command, "--config", path(&cfg), "--dry-run"]);
        assert_eq!(code, 0, "{err}");
        assert!(!out.is_empty());
        assert!(!dir.path().join("out").exists(), "{command} --dry-run created output");
    }
}

#[test]
fn generate_writes_generations_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &fixed_generation("fixed_gold.jsonl"));
    let (code, _, err) = run_cli(&["generate", "--config", path(&cfg)]);
    assert_eq!(code, 0, "{err}");
    let generations = std::fs::read_to_string(dir.path().join("out/generations.jsonl")).unwrap();
    assert_eq!(generations.lines().count(), 4);
    assert!(generations.contains("Granite quarry near Barre, Vermont"));
    assert!(!dir.path().join("out/scores.jsonl").exists());
}

#[test]
fn score_and_merge_reports() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture("engineered.jsonl");
    let gold = write_candidates(
        dir.path(),
        "gold.jsonl",
        &[
            ("eng-1", "Aurora borealis over Tromsø harbor"),
            ("eng-2", "Granite quarry near Barre, Vermont"),
            ("eng-3", "Saturn V rocket during 1969 launch"),
            ("eng-4", "Medieval tapestry depicting Norman cavalry"),
        ],
    );
    let partial = write_candidates(dir.path(), "partial.jsonl", &[("eng-1", "Aurora over the harbor"), ("eng-2", "a quarry")]);

    let gold_report = dir.path().join("gold.scores.jsonl");
    let (code, out, err) = run_cli(&["score", "--corpus", path(&corpus), "--candidates", path(&gold), "--out", path(&gold_report)]);
    assert_eq!(code, 0, "{err}");
    assert!(out.lines().any(|l| l.split_whitespace().eq(["gold", "10.00"])), "{out}");

    let partial_report = dir.path().join("partial.scores.jsonl");
    let (code, out, err) = run_cli(&[
        "score",
        "--corpus",
        path(&corpus),
        "--candidates",
        path(&partial),
        "--label",
        "weak",
        "--output",
        "line-records",
        "--out",
        path(&partial_report),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("\"record\":\"summary\""), "{out}");

    let (code, out, err) = run_cli(&["merge-reports", path(&partial_report), path(&gold_report)]);
    assert_eq!(code, 0, "{err}");
    let rows: Vec<&str> = out.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0].split_whitespace().collect::<Vec<_>>(), ["Model", "CIDEr"]);
    assert!(rows[1].starts_with("gold "), "{out}");
    assert!(rows[2].starts_with("weak "), "{out}");

    // Reports scored under a different sigma are not comparable.
    let other = dir.path().join("other.scores.jsonl");
    let (code, _, _) = run_cli(&[
        "score", "--corpus", path(&corpus), "--candidates", path(&gold), "--sigma", "1", "--out", path(&other),
    ]);
    assert_eq!(code, 0);
    let (code, _, err) = run_cli(&["merge-reports", path(&gold_report), path(&other)]);
    assert_eq!(code, 2);
    assert!(!err.is_empty());
}

#[test]
fn score_rejects_unknown_and_duplicate_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = fixture("engineered.jsonl");
    let unknown = write_candidates(dir.path(), "unknown.jsonl", &[("nope", "a caption")]);
    let (code, _, err) = run_cli(&["score", "--corpus", path(&corpus), "--candidates", path(&unknown)]);
    assert_eq!(code, 2);
    assert!(err.contains("nope"), "{err}");

    let dup = write_candidates(dir.path(), "dup.jsonl", &[("eng-1", "a"), ("eng-1", "b")]);
    let (code, _, err) = run_cli(&["score", "--corpus", path(&corpus), "--candidates", path(&dup)]);
    assert_eq!(code, 2);
    assert!(err.contains("eng-1"), "{err}");
}

#[test]
fn export_finetune_to_file_and_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ft.jsonl");
    let corpus = fixture("train150.jsonl");
    let (code, _, err) = run_cli(&["export-finetune", "--corpus", path(&corpus), "--k", "3", "--seed", "1", "--out", path(&out)]);
    assert_eq!(code, 0, "{err}");
    let written = std::fs::read_to_string(&out).unwrap();
    assert_eq!(written.lines().count(), 3);
    for line in written.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["completion"].as_str().unwrap().starts_with(' '));
        assert!(v["completion"].as_str().unwrap().ends_with('\n'));
    }
    let (code, stdout, _) = run_cli(&["export-finetune", "--corpus", path(&corpus), "--k", "3", "--seed", "1"]);
    assert_eq!(code, 0);
    assert_eq!(stdout, written);

    let (code, _, err) = run_cli(&["export-finetune", "--corpus", path(&corpus), "--k", "151", "--seed", "1"]);
    assert_eq!(code, 2);
    assert!(err.contains("151"), "{err}");
}
