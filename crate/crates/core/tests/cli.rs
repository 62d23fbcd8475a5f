use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use edgepipe::metrics::{read_records, EventKind};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_edgepipe"))
}

fn cfg(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(format!("{name}.toml"))
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "{stdout}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn records(path: &Path) -> Vec<edgepipe::metrics::MetricsRecord> {
    read_records(std::io::BufReader::new(std::fs::File::open(path).unwrap())).unwrap()
}

#[test]
fn smoke_run_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("smoke.jsonl");
    let text = ok(bin()
        .args(["run", "--config"])
        .arg(cfg("smoke"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap());
    assert!(text.contains("batches   20"), "{text}");
    let recs = records(&out);
    assert!(recs.len() >= 20);
    assert!(recs
        .iter()
        .all(|r| !r.run_id.is_empty() && r.config_hash.len() == 64));
    ok(bin().arg("verify").arg(&out).output().unwrap());
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    ok(bin()
        .args(["run", "--seed", "5", "--config"])
        .arg(cfg("smoke"))
        .arg("--out")
        .arg(&a)
        .output()
        .unwrap());
    ok(bin()
        .args(["run", "--seed", "6", "--config"])
        .arg(cfg("smoke"))
        .arg("--out")
        .arg(&b)
        .output()
        .unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn corrupted_trace_fails_verify() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("three.jsonl");
    let conf = dir.path().join("three.toml");
    std::fs::write(
        &conf,
        "batches = 40\n[sim]\nflops = 2e7\n[[nodes]]\n[[nodes]]\n[[nodes]]\n",
    )
    .unwrap();
    ok(bin()
        .args(["run", "--config"])
        .arg(&conf)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap());
    let report = ok(bin().arg("verify").arg(&out).output().unwrap());
    assert!(report.contains("weight stashing      ok"), "{report}");

    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let i = lines
        .iter()
        .position(|l| l.contains("\"event\":\"B\"") && l.contains("\"stage\":1"))
        .unwrap();
    let mut r: serde_json::Value = serde_json::from_str(&lines[i]).unwrap();
    r["version"] = serde_json::json!(r["version"].as_u64().unwrap() + 7);
    lines[i] = r.to_string();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, lines.join("\n") + "\n").unwrap();
    let out = bin().arg("verify").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("weight stashing      1 violations"));
}

#[test]
fn plan_with_oracle() {
    let text = ok(bin()
        .args(["plan", "--oracle", "--config"])
        .arg(cfg("plan-example"))
        .output()
        .unwrap());
    assert!(text.contains("points [1]"), "{text}");
    assert!(text.contains("bottleneck 5 s"), "{text}");
    assert!(text.contains(": match"), "{text}");
}

#[test]
fn missing_config_is_an_error() {
    let out = bin()
        .args(["run", "--config", "/nonexistent.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn restore_resumes_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("ckpt.toml");
    std::fs::write(
        &conf,
        "batches = 250\n[replication]\ncheckpoint = true\n[sim]\nflops = 2e7\n[[nodes]]\n[[nodes]]\n",
    )
    .unwrap();
    let out = dir.path().join("first.jsonl");
    let text = ok(bin()
        .args(["run", "--config"])
        .arg(&conf)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap());
    let ckpt = out.with_extension("ckpt");
    assert!(text.contains("checkpoint"), "{text}");
    assert!(ckpt.exists());

    let resumed = dir.path().join("resumed.jsonl");
    ok(bin()
        .args(["restore", "--config"])
        .arg(&conf)
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(&resumed)
        .output()
        .unwrap());
    let recs = records(&resumed);
    let first = recs
        .iter()
        .filter(|r| r.event == EventKind::F)
        .map(|r| r.batch_id)
        .min()
        .unwrap();
    let last = recs
        .iter()
        .filter(|r| r.event == EventKind::B)
        .map(|r| r.batch_id)
        .max()
        .unwrap();
    assert_eq!((first, last), (200, 249));
    ok(bin().arg("verify").arg(&resumed).output().unwrap());
}
