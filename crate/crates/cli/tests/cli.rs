use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lchd_core::testing::{chat_body, MockServer, Reply};
use serde_json::Value;

const TINY_CONFIG: &str = r#"{
  "model": {
    "encoder": {"layers": 1, "heads": 2, "dim": 16, "ffn_dim": 32, "max_positions": 32},
    "plan": {"chunk_size": 32, "k_ctx": 4, "k_resp": 2},
    "aggregator": {"heads": 2}
  },
  "learning_rate": 0.001,
  "warmup_steps": 4,
  "epochs": 2,
  "batch_size": 4,
  "seed": 3,
  "dev_fraction": 0.2,
  "warm_start": {"epochs": 1, "learning_rate": 0.001}
}"#;

fn lchd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lchd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn lchd")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth_toy(dir: &Path, name: &str, n: usize, pv: &str, seed: &str) -> PathBuf {
    let out = dir.join(name);
    let n = n.to_string();
    ok(&lchd(&[
        "synth", "--toy-corpus", &n, "--context-tokens", "120", "--p", pv, "--seed", seed, "--out", p(&out),
    ]));
    out
}

#[test]
fn synth_is_deterministic_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let run = |out: &Path| lchd(&["synth", "--toy-corpus", "100", "--p", "0.5", "--seed", "7", "--out", p(out)]);
    let first = run(&a);
    ok(&first);
    ok(&run(&b));
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    assert_eq!(bytes.iter().filter(|&&c| c == b'\n').count(), 100);
    let stats = stdout_json(&first);
    assert_eq!(stats["total"], 100);
    let h = stats["hallucinated"].as_u64().unwrap();
    assert_eq!(stats["baseless"].as_u64().unwrap() + stats["contradictory"].as_u64().unwrap(), h);
}

#[test]
fn synth_with_p_zero_has_no_hallucinations() {
    let dir = tempfile::tempdir().unwrap();
    let out = lchd(&[
        "synth", "--toy-corpus", "20", "--context-tokens", "80", "--p", "0", "--out",
        p(&dir.path().join("x.jsonl")),
    ]);
    ok(&out);
    let stats = stdout_json(&out);
    assert_eq!(stats["hallucinated"], 0);
    assert_eq!(stats["hallucinated_fraction"], 0.0);
}

#[test]
fn synth_writes_splits() {
    let dir = tempfile::tempdir().unwrap();
    let splits = dir.path().join("splits");
    let out = lchd(&[
        "synth", "--toy-corpus", "40", "--context-tokens", "60", "--out", p(&dir.path().join("all.jsonl")),
        "--split-dir", p(&splits),
    ]);
    ok(&out);
    let stats = stdout_json(&out);
    let counts: Vec<u64> = stats["splits"].as_array().unwrap().iter().map(|s| s["count"].as_u64().unwrap()).collect();
    assert_eq!(counts.iter().sum::<u64>(), 40);
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl"] {
        assert!(splits.join(f).is_file());
    }
}

#[test]
fn bad_jsonl_line_is_a_data_error_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.jsonl");
    fs::write(
        &pairs,
        "{\"id\":\"a\",\"context\":\"The sky is blue.\",\"reference\":\"The sky is blue.\"}\n{not json}\n",
    )
    .unwrap();
    let out = lchd(&["synth", "--pairs", p(&pairs), "--out", p(&dir.path().join("o.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(lchd(&["synth", "--p", "0.5"]).status.code(), Some(1));
    assert_eq!(lchd(&["frobnicate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let missing = lchd(&[
        "eval", "--data", p(&dir.path().join("nope.jsonl")), "--ckpt", p(dir.path()), "--report",
        p(&dir.path().join("r.json")),
    ]);
    assert_eq!(missing.status.code(), Some(1));
    let bad_p = lchd(&["synth", "--toy-corpus", "3", "--p", "1.5", "--out", p(&dir.path().join("o.jsonl"))]);
    assert_eq!(bad_p.status.code(), Some(1));
}

#[test]
fn output_may_not_overwrite_input() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_toy(dir.path(), "d.jsonl", 4, "0.5", "1");
    let before = fs::read(&data).unwrap();
    let out = lchd(&["synth", "--pairs", p(&data), "--out", p(&data)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(fs::read(&data).unwrap(), before);
}

fn train_tiny(dir: &Path, data: &Path, name: &str) -> PathBuf {
    let config = dir.join("config.json");
    fs::write(&config, TINY_CONFIG).unwrap();
    let ckpt = dir.join(name);
    ok(&lchd(&["train", "--data", p(data), "--config", p(&config), "--out", p(&ckpt)]));
    ckpt
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = synth_toy(d, "data.jsonl", 24, "0.5", "5");
    let ckpt = train_tiny(d, &data, "ckpt");
    for f in ["manifest.json", "weights.bin", "vocab.txt", "history.json"] {
        assert!(ckpt.join(f).is_file(), "{f}");
    }
    let history: Value = serde_json::from_str(&fs::read_to_string(ckpt.join("history.json")).unwrap()).unwrap();
    assert_eq!(history.as_array().unwrap().len(), 2);
    let warm: Value = serde_json::from_str(&fs::read_to_string(ckpt.join("warm_start_history.json")).unwrap()).unwrap();
    assert_eq!(warm.as_array().unwrap().len(), 1);

    // identical flags give identical checkpoints
    let again = train_tiny(d, &data, "ckpt2");
    assert_eq!(fs::read(ckpt.join("weights.bin")).unwrap(), fs::read(again.join("weights.bin")).unwrap());

    let report = d.join("report.json");
    let roc = d.join("roc.csv");
    let out = lchd(&[
        "eval", "--data", p(&data), "--ckpt", p(&ckpt), "--report", p(&report), "--roc-csv", p(&roc),
    ]);
    ok(&out);
    let m: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["precision", "recall", "balanced_accuracy", "mcc", "roc_auc", "threshold", "counts"] {
        assert!(m.get(key).is_some(), "{key}");
    }
    assert!(m["roc_auc"].is_f64());
    assert!(fs::read_to_string(&roc).unwrap().starts_with("threshold,fpr,tpr\n"));

    let sweep = lchd(&["score", "--ckpt", p(&ckpt), "--data", p(&data), "--sweep"]);
    ok(&sweep);
    let s = stdout_json(&sweep);
    assert_eq!(s["scores"].as_array().unwrap().len(), 24);
    let sets: Vec<Vec<String>> = s["sweep"]
        .as_array()
        .unwrap()
        .iter()
        .map(|pt| pt["hallucinated"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect())
        .collect();
    for w in sets.windows(2) {
        assert!(w[1].iter().all(|id| w[0].contains(id)), "prediction sets must be nested");
    }

    let bench = lchd(&["bench", "--ckpt", p(&ckpt), "--data", p(&data), "--batch", "4", "--iters", "3"]);
    ok(&bench);
    let b = stdout_json(&bench);
    assert_eq!(b["batch_size"], 4);
    assert!(b["mean_samples_per_sec"].as_f64().unwrap() > 0.0);
    assert!(b["threads"].as_u64().unwrap() >= 1);
    assert_eq!(b["includes_tokenization"], true);
}

#[test]
fn score_single_pair_and_attention_dump() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = synth_toy(d, "data.jsonl", 8, "0.5", "2");
    let ckpt = train_tiny(d, &data, "ckpt");
    let ctx = d.join("ctx.txt");
    let resp = d.join("resp.txt");
    fs::write(&ctx, "Aldric is brave. The town of Varn is quiet. Aldric was born in Varn.").unwrap();
    fs::write(&resp, "Aldric is not brave.").unwrap();
    let att = d.join("att.json");
    let out = lchd(&[
        "score", "--ckpt", p(&ckpt), "--context", p(&ctx), "--response", p(&resp), "--dump-attention", p(&att),
    ]);
    ok(&out);
    let v = stdout_json(&out);
    let prob = v["probability"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&prob));
    assert_eq!(v["label"], if prob >= 0.5 { "hallucinated" } else { "faithful" });
    let dump: Value = serde_json::from_str(&fs::read_to_string(&att).unwrap()).unwrap();
    let slots = dump["slots"].as_array().unwrap().len();
    assert_eq!(slots, 4 + 2 + 2);
    let rows = dump["attention"].as_array().unwrap();
    assert_eq!(rows.len(), slots);
    for row in rows {
        let sum: f64 = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn eval_with_one_class_reports_null_auc() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = synth_toy(d, "data.jsonl", 12, "0.5", "4");
    let ckpt = train_tiny(d, &data, "ckpt");
    let faithful = synth_toy(d, "faithful.jsonl", 5, "0", "9");
    let report = d.join("r.json");
    let out = lchd(&["eval", "--data", p(&faithful), "--ckpt", p(&ckpt), "--report", p(&report)]);
    ok(&out);
    let m = stdout_json(&out);
    assert!(m["roc_auc"].is_null());
    assert!(m["balanced_accuracy"].is_f64());
    assert!(String::from_utf8_lossy(&out.stderr).contains("roc_auc reported as null"));
}

#[test]
fn corrupted_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = synth_toy(d, "data.jsonl", 8, "0.5", "2");
    let ckpt = train_tiny(d, &data, "ckpt");
    let manifest = ckpt.join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
    fs::write(&manifest, text).unwrap();
    let out = lchd(&["eval", "--data", p(&data), "--ckpt", p(&ckpt), "--report", p(&d.join("r.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}

#[test]
fn judge_against_mock_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = synth_toy(d, "data.jsonl", 3, "0.5", "6");
    let server = MockServer::start(vec![
        Reply::status(429, "slow down"),
        Reply::ok(&chat_body("Unfaithful.")),
        Reply::ok(&chat_body("faithful")),
        Reply::ok(&chat_body("I cannot determine")),
    ]);
    let client = d.join("client.json");
    fs::write(
        &client,
        format!(
            r#"{{"base_url": "{}", "model": "judge-model", "max_in_flight": 1, "backoff_base_ms": 1, "api_key_env": "LCHD_TEST_KEY"}}"#,
            server.url()
        ),
    )
    .unwrap();
    let report = d.join("judge.json");
    let verdicts = d.join("verdicts.jsonl");
    let out = Command::new(env!("CARGO_BIN_EXE_lchd"))
        .args([
            "judge", "--data", p(&data), "--client-config", p(&client), "--report", p(&report), "--verdicts",
            p(&verdicts),
        ])
        .env("LCHD_TEST_KEY", "sk-do-not-leak")
        .env("RUST_LOG", "debug")
        .output()
        .unwrap();
    ok(&out);
    let r = stdout_json(&out);
    assert_eq!(r["judged"], 2);
    assert_eq!(r["unparseable"], 1);
    let lines: Vec<Value> = fs::read_to_string(&verdicts)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines[0]["verdict"]["label"], "hallucinated");
    assert_eq!(lines[1]["verdict"]["label"], "faithful");
    assert!(lines[2]["error"].as_str().unwrap().contains("unparseable"));

    let requests = server.requests();
    assert_eq!(requests.len(), 4);
    for req in &requests {
        assert_eq!(req.header("authorization"), Some("Bearer sk-do-not-leak"));
        assert!(!req.body.contains("sk-do-not-leak"));
    }
    assert!(!String::from_utf8_lossy(&out.stderr).contains("sk-do-not-leak"));
}

#[test]
fn judge_without_credential_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = synth_toy(d, "data.jsonl", 2, "0.5", "6");
    let client = d.join("client.json");
    fs::write(&client, r#"{"base_url": "http://127.0.0.1:9", "model": "m", "api_key_env": "LCHD_UNSET_KEY"}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lchd"))
        .args(["judge", "--data", p(&data), "--client-config", p(&client), "--report", p(&d.join("r.json"))])
        .env_remove("LCHD_UNSET_KEY")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_reports_both_groups() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let pairs = d.join("pairs.jsonl");
    let mut lines = String::new();
    for i in 0..6 {
        lines += &format!(
            "{{\"id\":\"p{i}\",\"context\":\"Aldric is brave. Aldric was born in Varn. The town of Varn is quiet. Rain fell over the hills.\",\"reference\":\"Aldric is brave. Aldric was born in Varn.\"}}\n"
        );
    }
    fs::write(&pairs, lines).unwrap();
    let injected = d.join("injected.jsonl");
    ok(&lchd(&["synth", "--pairs", p(&pairs), "--p", "1", "--seed", "1", "--out", p(&injected)]));
    let out = lchd(&["verify", "--originals", p(&pairs), "--injected", p(&injected)]);
    ok(&out);
    let r = stdout_json(&out);
    let groups = r.as_array().unwrap();
    assert_eq!(groups.len(), 2);
    assert_eq!(groups[0]["group"], "original");
    assert_eq!(groups[0]["delta"], 0.0);
    assert_eq!(groups[1]["count"], 6);
    assert!(groups[1]["delta"].as_f64().unwrap() > 0.0);
}
