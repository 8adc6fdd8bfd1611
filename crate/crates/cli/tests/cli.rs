use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use scenecap::tts::{JudgeStub, StubConfig, StubMode};
use serde_json::Value;

fn scenecap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scenecap"))
        .args(args)
        .env_remove("JUDGE_ENDPOINT")
        .output()
        .unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = scenecap(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    scenecap(args).status.code().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    data: PathBuf,
    out: PathBuf,
    checkpoint: PathBuf,
    summary: Value,
}

/// Toy data plus a briefly trained model, built once through the binary.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli-fixture");
        let _ = std::fs::remove_dir_all(&root);
        let data = root.join("data");
        assert!(scenecap(&["toy", "--out", s(&data)]).status.success());
        let cfg = std::fs::read_to_string(data.join("train.cfg")).unwrap().replace("epochs = 300", "epochs = 20");
        std::fs::write(data.join("train.cfg"), cfg).unwrap();
        let out = root.join("run");
        let summary = ok_json(&["train", "--config", s(&data.join("train.cfg")), "--data", s(&data), "--out", s(&out)]);
        let checkpoint = PathBuf::from(summary["checkpoint"].as_str().unwrap());
        Fixture { data, out, checkpoint, summary }
    })
}

fn scene() -> PathBuf {
    fixture().data.join("scene000.json")
}

#[test]
fn train_writes_model_log_and_manifest() {
    let f = fixture();
    assert_eq!(f.summary["steps"], 40);
    assert_eq!(f.summary["checksum"].as_str().unwrap().len(), 16);
    assert!(f.checkpoint.exists());
    let m = read_json(&f.out.join("manifest.json"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["seeds"]["seed"], 7);
    let outputs: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    for name in ["train_log.csv", "train.cfg", "manifest.json"] {
        assert!(outputs.iter().any(|o| o.ends_with(name)), "{name} missing from {outputs:?}");
    }
    assert!(outputs.iter().all(|o| Path::new(o).exists()));
    let log = std::fs::read_to_string(f.out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 41);
}

#[test]
fn config_errors_exit_2() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(f.data.join("train.cfg")).unwrap();
    let missing = dir.path().join("missing.cfg");
    std::fs::write(&missing, text.replace("epochs = 20\n", "")).unwrap();
    let unknown = dir.path().join("unknown.cfg");
    std::fs::write(&unknown, format!("{text}dropout = 0.1\n")).unwrap();
    for cfg in [&missing, &unknown] {
        assert_eq!(code(&["train", "--config", s(cfg), "--data", s(&f.data), "--out", s(dir.path())]), 2);
    }
    assert_eq!(code(&["tts", "--checkpoint", s(&f.checkpoint), "--scene", s(&scene()), "--judge", "http"]), 2);
}

#[test]
fn data_errors_exit_3() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(code(&["eval", "--corpus", s(&empty)]), 3);
    let junk = dir.path().join("junk.json");
    std::fs::write(&junk, "{\"points\": [[1, 2]]").unwrap();
    assert_eq!(code(&["caption", "--checkpoint", s(&f.checkpoint), "--scene", s(&junk)]), 3);
    assert_eq!(code(&["caption", "--checkpoint", s(&f.checkpoint), "--scene", s(&dir.path().join("absent.json"))]), 3);
}

#[test]
fn caption_is_deterministic_and_records_seed() {
    let f = fixture();
    let scene1 = f.data.join("scene001.json");
    let greedy = |extra: &[&str]| {
        let mut args = vec!["caption", "--checkpoint", s(&f.checkpoint), "--scene", s(&scene1)];
        args.extend_from_slice(extra);
        let out = scenecap(&args);
        assert!(out.status.success());
        (String::from_utf8(out.stdout).unwrap(), String::from_utf8(out.stderr).unwrap())
    };
    assert_eq!(greedy(&[]).0, greedy(&[]).0);
    assert!(!greedy(&[]).0.trim().is_empty());
    let seeded = ["--strategy", "stochastic", "--seed", "11"];
    assert_eq!(greedy(&seeded).0, greedy(&seeded).0);
    assert_eq!(greedy(&["--strategy", "beam"]).0, greedy(&["--strategy", "beam"]).0);

    let dir = tempfile::tempdir().unwrap();
    let (text, err) = greedy(&["--strategy", "nucleus", "--out", s(dir.path())]);
    let drawn: u64 = err.lines().find_map(|l| l.strip_prefix("seed: ")).unwrap().parse().unwrap();
    let m = read_json(&dir.path().join("manifest.json"));
    let args: Vec<&str> = m["args"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(args[args.len() - 2..], ["--seed", drawn.to_string().as_str()]);
    let side = read_json(&dir.path().join("caption.json"));
    assert_eq!(side["caption"].as_str().unwrap(), text.trim_end());
    assert_eq!(side["seed"], drawn);
    let replay = greedy(&["--strategy", "nucleus", "--seed", &drawn.to_string()]).0;
    assert_eq!(replay, text);
}

fn without_timings(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("timing");
    for c in v["candidates"].as_array_mut().unwrap() {
        c.as_object_mut().unwrap().remove("latency_ms");
    }
    v
}

#[test]
fn tts_mock_is_reproducible() {
    let f = fixture();
    let run = |seed: &str| {
        without_timings(ok_json(&["tts", "--checkpoint", s(&f.checkpoint), "--scene", s(&scene()), "--seed", seed]))
    };
    let a = run("3");
    assert_eq!(a, run("3"));
    assert_eq!(a["candidates"].as_array().unwrap().len(), 8);
    assert_eq!(a["summary"]["descriptors"].as_array().unwrap().len(), 5);
    let best = a["candidates"].as_array().unwrap().iter().map(|c| c["reward"].as_f64().unwrap()).fold(0.0, f64::max);
    assert_eq!(a["candidates"][a["selected_index"].as_u64().unwrap() as usize]["reward"].as_f64().unwrap(), best);

    let dir = tempfile::tempdir().unwrap();
    ok_json(&["tts", "--checkpoint", s(&f.checkpoint), "--scene", s(&scene()), "--seed", "3", "--out", s(dir.path())]);
    assert_eq!(without_timings(read_json(&dir.path().join("search_result.json"))), a);
    assert_eq!(read_json(&dir.path().join("manifest.json"))["seeds"]["seed"], 3);
}

#[test]
fn tts_over_http_uses_stub_rewards() {
    let f = fixture();
    let stub = JudgeStub::spawn(StubConfig { mode: StubMode::Canned(vec![0.1, 0.7, 0.3]), delay_ms: 0 }, 0).unwrap();
    let endpoint = stub.endpoint();
    let scene = scene();
    let base = ["tts", "--checkpoint", s(&f.checkpoint), "--scene", s(&scene), "--judge", "http", "--n", "3"];
    let mut args = base.to_vec();
    args.extend(["--endpoint", endpoint.as_str()]);
    let r = ok_json(&args);
    assert_eq!(r["selected_index"], 1);
    assert_eq!(r["fallback"], false);
    assert_eq!(stub.received().len(), 1);

    let bad = JudgeStub::spawn(StubConfig { mode: StubMode::WrongCount, delay_ms: 0 }, 0).unwrap();
    let bad_endpoint = bad.endpoint();
    let mut args = base.to_vec();
    args.extend(["--endpoint", bad_endpoint.as_str()]);
    assert_eq!(ok_json(&args)["fallback"], true);
    args.push("--no-fallback");
    assert_eq!(code(&args), 5);
}

#[test]
fn eval_writes_json_and_text_reports() {
    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/golden_corpus.jsonl");
    let dir = tempfile::tempdir().unwrap();
    let r = ok_json(&["eval", "--corpus", s(&corpus), "--out", s(dir.path())]);
    assert!(r["metrics"]["C@0.25"].is_number() && r["metrics"]["R@0.5"].is_number());
    assert_eq!(read_json(&dir.path().join("report.json")), r);
    assert!(dir.path().join("report.txt").exists());
    let oracle = ok_json(&["eval", "--corpus", s(&corpus), "--oracle-boxes"]);
    assert_eq!(oracle["metrics"]["C@0.5"], oracle["ungated"]["C"]);
    let text = scenecap(&["eval", "--corpus", s(&corpus), "--format", "text"]);
    assert!(String::from_utf8(text.stdout).unwrap().contains("0.25"));
    assert_eq!(code(&["eval", "--corpus", s(&corpus), "--iou", "1.5"]), 2);
}

#[test]
fn bench_fixture_table() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx.json");
    std::fs::write(&fx, r#"{"baseline_total_ms": 550, "rows": [{"n": 8, "encode_ms": 180, "extra_ms": 1600}]}"#).unwrap();
    let out = scenecap(&["bench", "--fixture", s(&fx), "--format", "text", "--out", s(dir.path())]);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("8\t0.18\t1.60\t1.78\t3.24x"));
    assert_eq!(read_json(&dir.path().join("bench.json"))["rows"][0]["overhead"], 3.24);
    assert_eq!(code(&["bench"]), 2);
}

#[test]
fn judge_stub_subcommand_serves_rewards() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_scenecap"))
        .args(["judge-stub", "--mode", "canned:0.25,0.5"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().trim_start_matches("http://").to_string();
    let body = r#"{"summary": "red chair", "candidates": ["a", "b"], "rubric_id": "x"}"#;
    let mut conn = TcpStream::connect(&addr).unwrap();
    write!(
        conn,
        "POST /judge HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut resp = String::new();
    conn.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    let _ = child.wait();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    let json: Value = serde_json::from_str(resp.split("\r\n\r\n").nth(1).unwrap()).unwrap();
    assert_eq!(json["rewards"], serde_json::json!([0.25, 0.5]));
}
