use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;

fn actwm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_actwm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = actwm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn gen_train_eval_pca_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d1.jsonl");
    ok(&["gen-data", "--kind", "d1", "--seed", "3", "--out", s(&data)]);
    // header line plus one line per curve
    assert_eq!(std::fs::read_to_string(&data).unwrap().lines().count(), 1 + 270);

    let again = dir.path().join("again.jsonl");
    ok(&["gen-data", "--kind", "d1", "--seed", "3", "--out", s(&again)]);
    assert_eq!(std::fs::read(&data).unwrap(), std::fs::read(&again).unwrap());

    let ckpt = dir.path().join("m.awm");
    ok(&["train", "--data", s(&data), "--plan", "exp2", "--seed", "1", "--out", s(&ckpt), "--epochs", "2"]);
    let loss = std::fs::read_to_string(dir.path().join("m.awm.loss.csv")).unwrap();
    let lines: Vec<&str> = loss.lines().collect();
    assert_eq!(lines[0], "epoch,total,latent_term,action_term");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,"));

    let eval_dir = dir.path().join("eval");
    ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--plan", "exp2", "--out", s(&eval_dir)]);
    let report = read_json(&eval_dir.join("report.json"));
    assert_eq!(report["plan"], "exp2");
    assert_eq!(report["aggregate"]["n_evaluated"], 2300);
    let table = std::fs::read_to_string(eval_dir.join("table.csv")).unwrap();
    assert!(table.starts_with("experiment,setup,d1_theta_2d"));
    assert_eq!(std::fs::read_to_string(eval_dir.join("seeds.csv")).unwrap().lines().count(), 3);

    let points = dir.path().join("points.csv");
    ok(&["pca", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&points)]);
    let pca = std::fs::read_to_string(&points).unwrap();
    let mut rows = pca.lines();
    let header = rows.next().unwrap();
    assert!(header.starts_with("setting,cycle,") && header.ends_with(",pc1,pc2"));
    assert_eq!(rows.count(), 270);
}

#[test]
fn experiment_then_eval_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    ok(&["experiment", "--id", "exp2", "--dataset", "d1", "--seeds", "0..1", "--out", s(&out), "--epochs", "1"]);
    for f in ["config.json", "table.csv", "per-seed/0/ckpt.awm", "per-seed/1/report.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let cfg = read_json(&out.join("config.json"));
    assert_eq!(cfg["id"], "exp2");
    assert_eq!(cfg["seeds"], serde_json::json!([0, 1]));

    let eval_dir = dir.path().join("eval");
    ok(&[
        "eval", "--ckpt", s(&out), "--data", s(&out.join("dataset.jsonl")), "--plan", "exp2", "--seeds", "2", "--out", s(&eval_dir),
    ]);
    let report = read_json(&eval_dir.join("report.json"));
    assert_eq!(report["per_seed"].as_array().unwrap().len(), 2);
    let original = read_json(&out.join("per-seed/1/report.json"));
    assert_eq!(report["per_seed"][1][1], original);

    let missing = actwm(&["eval", "--ckpt", s(&out), "--data", s(&out.join("dataset.jsonl")), "--plan", "exp2", "--seeds", "3", "--out", s(&eval_dir)]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("seed 2"));
}

#[test]
fn rejects_bad_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x");
    assert!(!actwm(&["gen-data", "--kind", "d9", "--out", s(&p)]).status.success());
    assert!(!actwm(&["train", "--data", s(&p), "--plan", "exp7", "--out", s(&p)]).status.success());
    let missing = actwm(&["train", "--data", s(&p), "--plan", "exp1", "--out", s(&p)]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("opening"));
    assert!(!actwm(&["experiment", "--id", "exp1", "--dataset", "d3", "--seeds", "0", "--out", s(&p)]).status.success());
    assert!(!actwm(&["experiment", "--id", "exp1", "--seeds", "3..1", "--out", s(&p)]).status.success());
}

fn get(port: u16, path: &str) -> Option<String> {
    let mut stream = TcpStream::connect(("127.0.0.1", port)).ok()?;
    write!(stream, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut buf = String::new();
    stream.read_to_string(&mut buf).ok()?;
    Some(buf)
}

#[test]
fn serve_answers_health_checks() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_actwm"))
        .arg("serve")
        .env("ACTWM_PORT", port.to_string())
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let start = Instant::now();
    let mut reply = None;
    while start.elapsed() < Duration::from_secs(20) {
        if let Some(r) = get(port, "/healthz") {
            reply = Some(r);
            break;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    let missing = get(port, "/sessions/s1/state");
    child.kill().unwrap();
    child.wait().unwrap();
    let reply = reply.expect("server came up");
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains(r#"{"status":"ok"}"#));
    assert!(missing.unwrap().starts_with("HTTP/1.1 404"));
}
