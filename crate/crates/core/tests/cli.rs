use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cterank(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cterank"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn world(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("worlds").join(name)
}

#[test]
fn no_arguments_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cterank(&[], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cterank(&["oracle", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = cterank(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["gen-data", "train-env", "train-policy", "evaluate", "oracle", "rank", "bench-serving"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cterank(&["train-env", "--data", "absent.jsonl", "--out", "env.ckpt"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn oracle_report_beats_greedy_on_the_trap_world() {
    let dir = tempfile::tempdir().unwrap();
    let w = world("demo4.toml");
    let out = cterank(
        &["oracle", "--world", w.to_str().unwrap(), "--report", "oracle.json"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("oracle.json")).unwrap()).unwrap();
    let s = &report["summary"];
    let optimal = s["mean_optimal_cte"].as_f64().unwrap();
    let greedy = s["mean_greedy_ctr_cte"].as_f64().unwrap();
    assert!(optimal > greedy * 1.05, "{optimal} vs {greedy}");
    assert!(report["config"].is_object());
}

#[test]
fn synthetic_generation_rank_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let w = world("tiny6.toml");
    let w = w.to_str().unwrap();
    let gen = cterank(
        &["gen-data", "synthetic", "--world", w, "--sessions", "20", "--seed", "3", "--out", "s.jsonl"],
        dir.path(),
    );
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    let sessions = cterank::data::load_sessions(dir.path().join("s.jsonl")).unwrap();
    assert_eq!(sessions.len(), 20);

    let train = cterank(
        &[
            "train-policy", "--world", w, "--seed", "3", "--iters", "20", "--out", "p.ckpt",
        ],
        dir.path(),
    );
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let rank = cterank(
        &["rank", "--policy", "p.ckpt", "--data", "s.jsonl", "--k", "3", "--out", "r.jsonl"],
        dir.path(),
    );
    assert!(rank.status.success(), "{}", String::from_utf8_lossy(&rank.stderr));
    let lines = std::fs::read_to_string(dir.path().join("r.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 20);
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["items"].as_array().unwrap().len(), 3);
    }

    let bench = cterank(
        &["bench-serving", "--n", "30", "--k-list", "2,4", "--repeats", "1", "--report", "b.json"],
        dir.path(),
    );
    assert!(bench.status.success(), "{}", String::from_utf8_lossy(&bench.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("b.json")).unwrap()).unwrap();
    assert!(report["results"].as_array().unwrap().iter().all(|r| r["identical"] == true));
}
