use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

const BROKER: &str = env!("CARGO_BIN_EXE_broker");
const PRODUCE: &str = env!("CARGO_BIN_EXE_produce");
const CONSUME: &str = env!("CARGO_BIN_EXE_consume");
const BENCH: &str = env!("CARGO_BIN_EXE_bench");

struct Running(Child);

impl Drop for Running {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn start_broker(extra: &[&str]) -> (Running, String) {
    let mut child = Command::new(BROKER)
        .env("RUST_LOG", "warn")
        .args(["--listen", "127.0.0.1:0", "--duration", "60"])
        .args(extra)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening ").expect("banner").to_string();
    (Running(child), addr)
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(out.status.success(), "stdout: {stdout}\nstderr: {}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn number_after(text: &str, word: &str) -> u64 {
    text.split_whitespace()
        .skip_while(|w| *w != word)
        .nth(1)
        .and_then(|n| n.parse().ok())
        .unwrap_or_else(|| panic!("no number after {word:?} in {text:?}"))
}

#[test]
fn produce_then_consume_pull_and_push() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("rpcs.csv");
    let (_b, addr) = start_broker(&["--stream", "t:4", "--workers", "2", "--metrics-csv", metrics.to_str().unwrap()]);
    let report = dir.path().join("prod.csv");
    let out = ok(Command::new(PRODUCE)
        .args(["--brokers", &addr, "--stream", "t", "--partitions", "4", "--np", "2"])
        .args(["--cs", "4KiB", "--recs", "100", "--duration", "10", "--max-records", "5000"])
        .arg("--report")
        .arg(&report)
        .output()
        .unwrap());
    assert_eq!(number_after(&out, "produced"), 5000);
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("second,client_id,records,rpcs\n"));

    for mode in ["pull", "push"] {
        let rep = dir.path().join(format!("{mode}.csv"));
        let out = ok(Command::new(CONSUME)
            .args(["--brokers", &addr, "--stream", "t", "--partitions", "4", "--nc", "2", "--mode", mode])
            .args(["--duration", "2", "--cs", "8KiB"])
            .arg("--report")
            .arg(&rep)
            .output()
            .unwrap());
        assert_eq!(number_after(&out, "consumed"), 5000, "{mode}: {out}");
        assert!(std::fs::read_to_string(&rep).unwrap().starts_with("second,client_id,records,rpcs\n"));
    }
}

#[test]
fn bad_flags_fail() {
    let out = Command::new(BROKER).args(["--replication", "3"]).output().unwrap();
    assert!(!out.status.success());
    let out = Command::new(BROKER)
        .args(["--listen", "127.0.0.1:0", "--replication", "2", "--duration", "1"])
        .output()
        .unwrap();
    assert!(!out.status.success(), "replication 2 without a backup");
    let out = Command::new(CONSUME).args(["--nc", "3", "--partitions", "2"]).output().unwrap();
    assert!(!out.status.success());
}

fn bench(args: &[&str], out: &Path) -> String {
    ok(Command::new(BENCH).env("RUST_LOG", "warn").args(args).arg("--out").arg(out).output().unwrap())
}

#[test]
fn bench_multi_process_run_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    std::fs::write(
        &spec,
        "workload = \"filter\"\nsource_mode = [\"pull\", \"push\"]\nnp = 2\nnc = 2\nns = 2\nduration_seconds = 3\nwarmup_seconds = 1\nrecord_cap = 20000\nreplication = [1, 2]\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let text = bench(&["run", "--spec", spec.to_str().unwrap()], &out);
    assert_eq!(text.lines().filter(|l| l.contains("rep0")).count(), 4, "{text}");
    let results = std::fs::read_to_string(out.join("results.jsonl")).unwrap();
    assert_eq!(results.lines().count(), 4);
    for line in results.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["producer_records"], 20000);
        assert_eq!(v["consumer_records"], 20000, "{line}");
    }
    let table = bench(&["compare"], &out);
    assert!(table.contains("ratio"));
    let cmp = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(cmp.lines().count(), 3);
}

#[test]
fn presets_are_listed_and_shown() {
    let out = ok(Command::new(BENCH).args(["presets", "list"]).output().unwrap());
    for name in ["ingest", "count", "filter-8p", "filter-4p", "constrained", "small-chunks", "wordcount"] {
        assert!(out.lines().any(|l| l.starts_with(name)), "{out}");
    }
    let shown = ok(Command::new(BENCH).args(["presets", "show", "constrained"]).output().unwrap());
    assert!(shown.contains("replication = 2"));
}
