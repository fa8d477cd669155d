use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xfer_core::bench::ScoreReport;

const TEXT: &str = include_str!("../../core/tests/data/natural_text_1mb.txt");

fn xfer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xfer-eval"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Two small text targets and a config with tiny budgets.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let targets = dir.path().join("targets");
    fs::create_dir_all(&targets).unwrap();
    fs::write(targets.join("a.txt"), &TEXT[..30_000]).unwrap();
    fs::write(targets.join("b.txt"), &TEXT[TEXT.len() - 30_000..]).unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"{"pretrain_budget": 3000, "tune_budget": 1500, "test_budget": 500,
            "pretrain": {"epochs": 1}, "tune": {"epochs": 1}, "bpe_vocab": 300}"#,
    )
    .unwrap();
    dir
}

fn run_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["run"];
    v.extend_from_slice(extra);
    v.extend(["--profile", "desk", "--config", "cfg.json", "--targets", "targets"]);
    v
}

#[test]
fn gen_is_reproducible_and_writes_metadata() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a.jsonl", "b.jsonl"] {
        let o = xfer(
            dir.path(),
            &[
                "gen", "random", "--vocab", "300", "--tokens", "5000", "--seed", "1", "--out", out,
            ],
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(
        fs::read(dir.path().join("a.jsonl")).unwrap(),
        fs::read(dir.path().join("b.jsonl")).unwrap()
    );
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["spec"]["generator"], "random");
    assert_eq!(meta["seed"], 1);
    assert!(meta["rng"].as_str().unwrap().contains("ChaCha8"));

    let o = xfer(
        dir.path(),
        &[
            "gen", "paren-zm", "--vocab", "50", "--alpha", "1", "--beta", "2.7", "--tokens", "4000", "--out", "p.jsonl",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = xfer(
        dir.path(),
        &[
            "gen",
            "paren-zm",
            "--alpha",
            "-1",
            "--tokens",
            "4000",
            "--out",
            "bad.jsonl",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gen_paren_real_from_text() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("t.txt"), &TEXT[..20_000]).unwrap();
    let o = xfer(
        dir.path(),
        &[
            "gen",
            "paren-real",
            "--from-text",
            "t.txt",
            "--bpe-vocab",
            "300",
            "--tokens",
            "3000",
            "--out",
            "r.jsonl",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("r.meta.json").is_file());
}

#[test]
fn tokenize_writes_corpus_and_model() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("t.txt"), &TEXT[..20_000]).unwrap();
    for out in ["x.jsonl", "y.jsonl"] {
        let o = xfer(dir.path(), &["tokenize", "t.txt", "--vocab", "400", "--out", out]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(
        fs::read(dir.path().join("x.jsonl")).unwrap(),
        fs::read(dir.path().join("y.jsonl")).unwrap()
    );
    let model: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("x.bpe.json")).unwrap()).unwrap();
    assert_eq!(model["specials"][0], "<eos>");

    fs::write(dir.path().join("empty.txt"), "").unwrap();
    assert_eq!(
        xfer(dir.path(), &["tokenize", "empty.txt", "--out", "e.jsonl"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn run_prints_only_the_score_and_writes_outputs() {
    let dir = workspace();
    let o = xfer(
        dir.path(),
        &[
            "gen",
            "paren-zm",
            "--vocab",
            "50",
            "--tokens",
            "4000",
            "--out",
            "src.jsonl",
        ],
    );
    assert!(o.status.success());
    let o = xfer(dir.path(), &run_args(&["src.jsonl", "--out", "out"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let printed = stdout(&o);
    assert_eq!(printed.lines().count(), 1);
    let score: f64 = printed.trim().parse().unwrap();

    let out = dir.path().join("out");
    let report = ScoreReport::load(out.join("report.json")).unwrap();
    assert_eq!(report.score, Some(score));
    assert_eq!(report.source, "src");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["started"].is_string() && manifest["finished"].is_string());
    assert_eq!(manifest["config_hash"], report.config_hash);
    let outputs: Vec<PathBuf> = serde_json::from_value(manifest["outputs"].clone()).unwrap();
    assert!(outputs.iter().any(|p| p.ends_with("targets/a/tune_loss.csv")));
    assert!(outputs.iter().any(|p| p.ends_with("report.json")));

    // Same inputs, same report (manifests differ only in timestamps).
    let again = xfer(dir.path(), &run_args(&["src.jsonl", "--out", "out2"]));
    assert_eq!(stdout(&again), printed);
    assert_eq!(
        fs::read(out.join("report.json")).unwrap(),
        fs::read(dir.path().join("out2/report.json")).unwrap()
    );
}

#[test]
fn no_pretrain_needs_no_corpus() {
    let dir = workspace();
    let o = xfer(dir.path(), &run_args(&["--mode", "no-pretrain", "--out", "none"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let report = ScoreReport::load(dir.path().join("none/report.json")).unwrap();
    assert_eq!(report.source, "no-pretrain");
}

#[test]
fn user_errors_exit_with_one() {
    let dir = workspace();
    let o = xfer(dir.path(), &run_args(&["missing.jsonl"]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.jsonl"));
    assert_eq!(xfer(dir.path(), &run_args(&[])).status.code(), Some(1));
    assert_eq!(xfer(dir.path(), &["run", "--bogus"]).status.code(), Some(1));
    fs::write(dir.path().join("bad.jsonl"), "[1, 2]\n[3, -4]\n").unwrap();
    let o = xfer(dir.path(), &run_args(&["bad.jsonl"]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(":2:"), "{}", stderr(&o));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = workspace();
    // Targets that cannot fill one test block: reported per target, exit 2.
    fs::write(dir.path().join("targets/c.jsonl"), "[1, 2, 3]\n").unwrap();
    let o = xfer(dir.path(), &run_args(&["--mode", "no-pretrain", "--out", "o"]));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("target c"), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());
    let report = ScoreReport::load(dir.path().join("o/report.json")).unwrap();
    assert_eq!(report.per_target.len(), 2);
    assert_eq!(report.score, None);
}

fn stub(dir: &Path, name: &str, source: &str, profile: &str, h: [f64; 2]) {
    let json = serde_json::json!({
        "version": 1, "source": source, "profile": profile, "mode": "pretrain",
        "per_target": {"t0": h[0], "t1": h[1]}, "score": (h[0] + h[1]) / 2.0, "ci": null,
        "failures": {}, "seed": 0, "positions": "redraw", "target_vocab": 10,
        "config_hash": "x", "engine_version": "0"
    });
    fs::write(dir.join(name), json.to_string()).unwrap();
}

#[test]
fn report_reproduces_the_hand_computed_intervals() {
    let dir = tempfile::tempdir().unwrap();
    stub(dir.path(), "s0.json", "s0", "desk", [5.0, 4.0]);
    stub(dir.path(), "s1.json", "s1", "desk", [6.0, 8.0]);
    let o = xfer(dir.path(), &["report", "s0.json", "s1.json", "--out", "rep"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("rep/scores.csv")).unwrap();
    assert_eq!(csv, "source,t0,t1,mean,ci_lo,ci_hi\ns0,5,4,4.5,4.5,4.5\ns1,6,8,7,7,7\n");
    assert_eq!(stdout(&o), csv);
    let svg = fs::read_to_string(dir.path().join("rep/scores.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.matches("<rect").count() == 2);

    let o = xfer(dir.path(), &["report", "s0.json", "--out", "one"]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("omitted"));
    assert_eq!(stdout(&o), "source,t0,t1,mean,ci_lo,ci_hi\ns0,5,4,4.5,,\n");

    stub(dir.path(), "p.json", "p", "paper", [5.0, 5.0]);
    assert_eq!(
        xfer(dir.path(), &["report", "s0.json", "p.json"]).status.code(),
        Some(1)
    );
}
