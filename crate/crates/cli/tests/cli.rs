use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use trustrep::harness::METRICS_HEADER;

fn trustrep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trustrep"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_into(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["run", "--protocol", "r-raft", "--ops", "40", "--keys", "20", "--seed", "4", "--out", out];
    args.extend_from_slice(extra);
    trustrep(&args)
}

#[test]
fn run_writes_trace_report_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_into(dir.path(), &["--adversary", "reorder", "--confidential"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert!(lines.next().unwrap().starts_with("r-raft,3,1,4,reorder,sim,true,40,40,"));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["committed_ops"], 40);
    assert_eq!(report["violations"].as_array().unwrap().len(), 0);
    let trace = fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    assert!(trace.lines().count() > 100);
}

#[test]
fn check_accepts_clean_trace_and_flags_a_replayed_accept() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_into(dir.path(), &[]).status.success());
    let path = dir.path().join("trace.jsonl");
    let o = trustrep(&["check", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));

    let text = fs::read_to_string(&path).unwrap();
    let accept = text.lines().find(|l| l.contains("\"accept\"")).unwrap();
    let forged = dir.path().join("forged.jsonl");
    fs::write(&forged, format!("{text}{accept}\n")).unwrap();
    let o = trustrep(&["check", forged.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let verdict: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let props: Vec<&str> = verdict["violations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["property"].as_str().unwrap())
        .collect();
    assert!(props.contains(&"no_dup"), "{props:?}");
}

#[test]
fn matrix_prints_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"protocols":["r-abd","r-cr"],"adversaries":["identity","tamper"],"seeds":[1,2],
            "workload":{"op_count":30,"key_count":10}}"#,
    )
    .unwrap();
    let o = trustrep(&["matrix", "--spec", spec.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 1 + 2 * 2 * 2);
}

#[test]
fn adversary_can_come_from_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let adv = dir.path().join("adv.json");
    fs::write(&adv, r#"{"drop_prob":0.3,"scripted":[{"at":50,"action":"partition","nodes":[2]},{"at":200,"action":"heal"}]}"#).unwrap();
    let out = dir.path().join("o");
    let o = trustrep(&[
        "run", "--protocol", "r-cr", "--ops", "30", "--gst", "300",
        "--adversary", adv.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn tcp_transport_runs_a_small_workload() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_into(dir.path(), &["--transport", "tcp"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().contains(",tcp,"));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let o = trustrep(&["run", "--protocol", "r-pbft"]);
    assert!(!o.status.success());
    let o = trustrep(&["run", "--protocol", "r-abd", "--nodes", "2", "--faults", "1"]);
    assert_eq!(o.status.code(), Some(2));
}
