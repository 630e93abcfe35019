mod common;

use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::Duration;

use serde_json::Value;

use common::TINY;

fn kgcrs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgcrs"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Setup {
    _tmp: tempfile::TempDir,
    root: std::path::PathBuf,
    kg: String,
    dialogues: String,
    config: String,
}

fn setup() -> Setup {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let files = ok(kgcrs(&["synth", "--out", p(&root.join("data"))]));
    let config = root.join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    Setup {
        kg: files["kg"].as_str().unwrap().to_string(),
        dialogues: files["dialogues"].as_str().unwrap().to_string(),
        config: p(&config).to_string(),
        root,
        _tmp: tmp,
    }
}

fn train(s: &Setup, stage: &str, checkpoint: Option<&str>, out: &str) -> Output {
    let mut args = vec![stage, "--config", &s.config, "--kg", &s.kg, "--dialogues", &s.dialogues, "--out", out];
    if let Some(c) = checkpoint {
        args.extend(["--checkpoint", c]);
    }
    kgcrs(&args)
}

#[test]
fn stages_run_in_order_and_evaluate() {
    let s = setup();
    let pre = s.root.join("pre");
    let rec = s.root.join("rec");
    let gen = s.root.join("gen");
    let v = ok(train(&s, "pretrain", None, p(&pre)));
    assert_eq!(v["epochs_run"], 2);
    ok(train(&s, "train-rec", Some(p(&pre)), p(&rec)));
    ok(train(&s, "train-gen", Some(p(&rec)), p(&gen)));

    let out = s.root.join("eval");
    let report = ok(kgcrs(&[
        "eval", "--kg", &s.kg, "--dialogues", &s.dialogues, "--checkpoint", p(&gen), "--split", "train",
        "--mode", "beam", "--beam-width", "2", "--max-len", "5", "--out", p(&out),
    ]));
    assert_eq!(report["split"], "train");
    for k in ["1", "10", "50"] {
        let r = report["recall"][k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&r));
    }
    assert!(report["perplexity"].as_f64().unwrap() >= 1.0);
    for f in ["report.json", "rankings.jsonl", "generations.jsonl"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    for line in std::fs::read_to_string(out.join("generations.jsonl")).unwrap().lines() {
        let g: Value = serde_json::from_str(line).unwrap();
        assert!(g["tokens"].as_array().unwrap().len() <= 5);
    }

    // Valid and test splits of the fixture are empty but still evaluate.
    let valid = ok(kgcrs(&["eval", "--kg", &s.kg, "--dialogues", &s.dialogues, "--checkpoint", p(&gen), "--split", "valid"]));
    assert_eq!(valid["example_count"], 0);
}

#[test]
fn generator_stage_is_refused_out_of_order() {
    let s = setup();
    let fresh = train(&s, "train-gen", None, p(&s.root.join("x")));
    assert!(!fresh.status.success());
    assert!(String::from_utf8_lossy(&fresh.stderr).contains("train-gen"));

    let pre = s.root.join("pre");
    ok(train(&s, "pretrain", None, p(&pre)));
    let early = train(&s, "train-gen", Some(p(&pre)), p(&s.root.join("y")));
    assert!(!early.status.success());
    assert!(String::from_utf8_lossy(&early.stderr).contains("recommendation stage"));
}

#[test]
fn seed_flag_changes_the_run() {
    let s = setup();
    let a = ok(train(&s, "pretrain", None, p(&s.root.join("a"))));
    let b = ok(train(&s, "pretrain", None, p(&s.root.join("b"))));
    assert_eq!(a["final"], b["final"]);
    let c = ok(kgcrs(&[
        "pretrain", "--config", &s.config, "--seed", "99", "--kg", &s.kg, "--dialogues", &s.dialogues, "--out",
        p(&s.root.join("c")),
    ]));
    assert_ne!(a["final"]["loss"], c["final"]["loss"]);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let s = setup();
    let missing = kgcrs(&["pretrain", "--kg", "/nonexistent.tsv", "--dialogues", &s.dialogues, "--out", p(&s.root.join("z"))]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
    let bad_split = kgcrs(&["eval", "--kg", &s.kg, "--dialogues", &s.dialogues, "--checkpoint", "x", "--split", "dev"]);
    assert!(!bad_split.status.success());
}

#[test]
fn chat_answers_on_stdin() {
    let s = setup();
    let pre = s.root.join("pre");
    ok(train(&s, "pretrain", None, p(&pre)));
    let mut child = Command::new(env!("CARGO_BIN_EXE_kgcrs"))
        .args(["chat", "--kg", &s.kg, "--checkpoint", p(&pre), "--top-n", "3"])
        .env("RUST_LOG", "warn")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"I loved Wonder Woman\n   \n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("\n> "), "{text}");
    assert_eq!(text.matches("  * ").count(), 3, "{text}");
}

#[test]
fn serve_answers_health_checks() {
    let s = setup();
    let pre = s.root.join("pre");
    ok(train(&s, "pretrain", None, p(&pre)));
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_kgcrs"))
        .args(["serve", "--kg", &s.kg, "--checkpoint", p(&pre), "--port", &port.to_string()])
        .env("RUST_LOG", "warn")
        .spawn()
        .unwrap();
    let rt = tokio::runtime::Runtime::new().unwrap();
    let healthy = rt.block_on(async {
        let client = reqwest::Client::new();
        for _ in 0..100 {
            if let Ok(r) = client.get(format!("http://127.0.0.1:{port}/health")).send().await {
                return r.status().is_success();
            }
            std::thread::sleep(Duration::from_millis(100));
        }
        false
    });
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(healthy);
}
