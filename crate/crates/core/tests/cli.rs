use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn treepo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_treepo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn train_into(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec![
        "train",
        "--seed",
        "0",
        "--iterations",
        "10",
        "--batch-queries",
        "8",
        "--eval-interval",
        "5",
        "--out",
        out,
    ];
    args.extend_from_slice(extra);
    treepo(&args)
}

#[test]
fn train_twice_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(train_into(a.path(), &[]).status.success());
    assert!(train_into(b.path(), &["--parallel"]).status.success());
    for f in ["metrics.csv", "trees.jsonl", "policy.ckpt"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn ten_iteration_metrics_match_golden() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_into(dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let got = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/metrics_seed0_10it.csv");
    if std::env::var_os("TREEPO_BLESS").is_some() {
        fs::write(&golden, &got).unwrap();
    }
    assert_eq!(got, fs::read_to_string(golden).unwrap());
}

#[test]
fn checkpoint_round_trips_through_eval() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_into(dir.path(), &[]).status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["iterations_run"], 10);
    let ckpt = dir.path().join("policy.ckpt");
    let out = treepo(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--eval-rollouts", "2"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("pass_rate "), "{text}");
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    fs::write(&path, r#"{"seed": 7, "tree": {"width": 8}}"#).unwrap();
    let out = treepo(&["config", "--config", path.to_str().unwrap(), "--depth", "3"]);
    assert!(out.status.success());
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["seed"], 7);
    assert_eq!(cfg["tree"]["width"], 8);
    assert_eq!(cfg["tree"]["depth"], 3);
}

#[test]
fn errors_map_to_exit_codes() {
    assert_eq!(treepo(&["train", "--width", "0"]).status.code(), Some(2));
    assert_eq!(
        treepo(&["config", "--config", "/nonexistent/run.json"]).status.code(),
        Some(3)
    );
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    assert_eq!(
        treepo(&["eval", "--checkpoint", bad.to_str().unwrap()]).status.code(),
        Some(6)
    );
    let json = dir.path().join("bad.json");
    fs::write(&json, "{").unwrap();
    assert_eq!(
        treepo(&["config", "--config", json.to_str().unwrap()]).status.code(),
        Some(2)
    );
}

#[test]
fn rollout_and_bench_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(treepo(&["rollout", "--queries", "3", "--out", out]).status.success());
    let dump = fs::read_to_string(dir.path().join("trees.jsonl")).unwrap();
    let headers = dump.lines().filter(|l| l.contains("\"width\"")).count();
    assert_eq!(headers, 3);
    assert!(treepo(&["bench", "--queries", "4", "--out", out]).status.success());
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn sweeps_write_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let small = [
        "--iterations",
        "2",
        "--batch-queries",
        "4",
        "--eval-interval",
        "2",
        "--out",
        out,
    ];
    let run = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd];
        args.extend_from_slice(&small);
        args.extend_from_slice(extra);
        let o = treepo(&args);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    };
    run("sweep-depthseg", &[]);
    run("sweep-branching", &[]);
    run("sweep-scaling", &["--budgets", "224,448", "--repeats", "2"]);
    let lines = |f: &str| fs::read_to_string(dir.path().join(f)).unwrap().lines().count();
    assert_eq!(lines("depthseg.csv"), 1 + 3 * 2);
    assert_eq!(lines("branching.csv"), 1 + 5 * 2);
    // D = 2 at both budgets, D = 4 only at 448, D = 8 at neither
    assert_eq!(lines("scaling.csv"), 1 + 3);
    assert_eq!(
        treepo(&["sweep-depthseg", "--pairs", "7x17", "--out", out])
            .status
            .code(),
        Some(2)
    );
}
