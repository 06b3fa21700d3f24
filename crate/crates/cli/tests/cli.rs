use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn shiftpar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shiftpar"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn verify_hex_layout_passes_with_interleaved_head_order() {
    let dir = tempfile::tempdir().unwrap();
    let out = shiftpar(&["verify", "--sp", "3", "--tp", "2", "--out", dir.path().to_str().unwrap()]);
    let text = stdout(&out);
    assert!(out.status.success(), "{text}");
    assert!(text.contains("head_order: (0, 2, 4, 1, 3, 5)"), "{text}");
    assert!(text.contains("verify sp3xtp2: passed"));
    assert!(!text.contains("FAIL"));
    for f in ["report.txt", "ledger.csv", "trace.jsonl"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert_eq!(report, text);
    let trace = fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    assert!(trace.lines().count() > 1);
    assert!(trace.contains("\"shift\"") && trace.contains("\"base\""));
}

#[test]
fn verify_single_worker_passes() {
    let out = shiftpar(&["verify"]);
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(stdout(&out).contains("verify sp1xtp1: passed"));
}

#[test]
fn verify_exercises_kv_replication() {
    let out = shiftpar(&["verify", "--sp", "4", "--kv-heads", "2"]);
    let text = stdout(&out);
    assert!(out.status.success(), "{text}");
    assert!(text.contains("[ok] kv replication: SP_AA=2 SP_AG=2"), "{text}");
}

#[test]
fn verify_mixed_grid() {
    let out = shiftpar(&["verify", "--sp", "2", "--tp", "2", "--model", "gqa"]);
    assert!(out.status.success(), "{}", stdout(&out));
}

#[test]
fn unsupported_config_exits_with_two() {
    let out = shiftpar(&["verify", "--sp", "8", "--model", "tiny"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unsupported"));
    let out = shiftpar(&["topology", "--sp", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn topology_prints_groups() {
    let out = shiftpar(&["topology", "--sp", "2", "--tp", "2"]);
    let text = stdout(&out);
    assert!(out.status.success());
    assert!(text.contains("TP: [[0, 1], [2, 3]]"), "{text}");
    assert!(text.contains("SP: [[0, 2], [1, 3]]"), "{text}");
}

fn parse_csv(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(str::to_owned).collect()).collect()
}

#[test]
fn bench_sweeps_scale_as_expected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.csv");
    let out = shiftpar(&["bench", "--out", path.to_str().unwrap()]);
    assert!(out.status.success());
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "config,n,compute_elements,comm_elements,steps,attention_elements,all_to_all_per_worker,all_reduce_per_worker"
    );
    let rows = parse_csv(&text);
    assert_eq!(rows.len(), 11);
    let num = |r: &Vec<String>, i: usize| r[i].parse::<u64>().unwrap();
    // SP rows: all-to-all only, compute falls as SP grows.
    for w in rows[0..3].windows(2) {
        assert!(num(&w[1], 2) < num(&w[0], 2));
        assert_eq!(num(&w[0], 7), 0);
    }
    // TP rows: all-reduce only, growing with TP.
    for w in rows[3..6].windows(2) {
        assert!(num(&w[1], 7) > num(&w[0], 7));
        assert_eq!(num(&w[1], 6), 0);
    }
    // n sweep: attention grows faster than linearly.
    for w in rows[6..11].windows(2) {
        assert!(num(&w[1], 5) > 2 * num(&w[0], 5));
    }
}

fn sim(args: &[&str], dir: &Path) -> Output {
    let mut all = vec!["simulate"];
    all.extend_from_slice(args);
    all.extend_from_slice(&["--out", dir.to_str().unwrap()]);
    shiftpar(&all)
}

#[test]
fn simulate_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["--trace", "bursty", "--duration", "40", "--bursts", "2", "--seed", "3"];
    assert!(sim(&args, a.path()).status.success());
    assert!(sim(&args, b.path()).status.success());
    for f in ["trace.jsonl", "summary.json", "requests_shift.jsonl", "throughput_tp.csv", "requests_sp.jsonl"] {
        let x = fs::read(a.path().join(f)).unwrap();
        let y = fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between runs");
    }
}

#[test]
fn simulate_replays_trace_file() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(sim(&["--trace", "steady", "--duration", "20", "--policy", "shift"], a.path()).status.success());
    let trace = a.path().join("trace.jsonl");
    let out = sim(&["--trace-file", trace.to_str().unwrap(), "--policy", "shift"], b.path());
    assert!(out.status.success());
    assert_eq!(
        fs::read(a.path().join("requests_shift.jsonl")).unwrap(),
        fs::read(b.path().join("requests_shift.jsonl")).unwrap()
    );
}

#[test]
fn batch_throughput_matches_token_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = sim(&["--trace", "batch", "--requests", "32", "--policy", "tp"], dir.path());
    assert!(out.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let s = &summary[0]["summary"];
    let tokens = 32.0 * (2048.0 + 256.0);
    let expect = tokens / s["makespan"].as_f64().unwrap();
    let got = s["combined_throughput"].as_f64().unwrap();
    assert!((got - expect).abs() <= 1e-9 * expect, "{got} vs {expect}");
    assert_eq!(s["requests"].as_u64(), Some(32));
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = sim(&["--sweep", "--rates", "0.5,64", "--duration", "20"], dir.path());
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows = parse_csv(&text);
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().any(|r| r[0] == "64" && r[1] == "shift"));
}

#[test]
fn invalid_cost_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = sim(&["--bandwidth", "0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn weights_round_trip_through_verify() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w");
    let out = shiftpar(&["weights", "--model", "tiny", "--seed", "7", "--out", w.to_str().unwrap()]);
    assert!(out.status.success());
    let loaded = shiftpar(&["verify", "--sp", "2", "--tp", "2", "--weights", w.to_str().unwrap()]);
    let fresh = shiftpar(&["verify", "--sp", "2", "--tp", "2"]);
    assert!(loaded.status.success(), "{}", stdout(&loaded));
    assert_eq!(stdout(&loaded), stdout(&fresh));
    let wrong = shiftpar(&["verify", "--sp", "3", "--tp", "2", "--weights", w.to_str().unwrap()]);
    assert_eq!(wrong.status.code(), Some(2));
}
