use std::path::Path;
use std::process::{Command, Output};

fn isnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_isnn")).args(args).env_remove("ISNN_JOBS").output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn csv_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_writes_csv_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy.csv");
    let out = isnn(&["gen", "toy-f", "--n", "500", "--lo", "0", "--hi", "4", "--seed", "7", "--out", p(&toy)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(csv_rows(&toy), 500);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("toy.json")).unwrap()).unwrap();
    assert_eq!(meta["format_version"], 1);
    assert_eq!(meta["function"], "toy-f");

    let bk = dir.path().join("bk.csv");
    let out = isnn(&["gen", "blatzko", "--nf", "500", "--delta", "0.2", "--mu-grid", "7", "--beta-grid", "7", "--out", p(&bk)]);
    assert_eq!(code(&out), 0);
    assert_eq!(csv_rows(&bk), 24_500);
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(code(&isnn(&["gen", "toy-f", "--n", "5"])), 2);
    assert_eq!(code(&isnn(&["gen", "nonsense", "--out", "x.csv"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy.csv");
    assert_eq!(code(&isnn(&["gen", "toy-g", "--n", "20", "--out", p(&toy)])), 0);
    let out = dir.path().join("run");
    assert_eq!(code(&isnn(&["train", "--arch", "isnn1", "--dataset", p(&toy), "--epochs", "0", "--out", p(&out)])), 2);
    assert_eq!(code(&isnn(&["train", "--arch", "cnn", "--dataset", p(&toy), "--epochs", "3", "--out", p(&out)])), 2);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"epochs": 3, "epoch": 3}"#).unwrap();
    assert_eq!(code(&isnn(&["train", "--config", p(&cfg)])), 2);
}

#[test]
fn missing_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = dir.path().join("out");
    assert_eq!(code(&isnn(&["train", "--arch", "isnn2", "--dataset", p(&missing), "--epochs", "3", "--out", p(&out)])), 3);
    assert_eq!(code(&isnn(&["gate", "--dataset", p(&missing), "--epochs", "3", "--out", p(&out)])), 3);
    let model = dir.path().join("missing.json");
    let args = ["invert", "--model", p(&model), "--targets", p(&missing), "--bounds", "1,7;0.1,2", "--out", p(&out)];
    assert_eq!(code(&isnn(&args)), 3);
}

#[test]
fn train_is_deterministic_across_seeds_and_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy.csv");
    assert_eq!(code(&isnn(&["gen", "toy-f", "--n", "40", "--out", p(&toy)])), 0);
    let run = |name: &str, jobs: &str| {
        let out = dir.path().join(name);
        let args = ["train", "--arch", "isnn2", "--dataset", p(&toy), "--epochs", "5", "--seeds", "10", "--out", p(&out)];
        let o = Command::new(env!("CARGO_BIN_EXE_isnn")).args(args).env("ISNN_JOBS", jobs).output().unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a", "1");
    let b = run("b", "3");
    for s in 0..10 {
        let name = format!("model_seed{s}.json");
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
    assert_eq!(std::fs::read(a.join("summary.json")).unwrap(), std::fs::read(b.join("summary.json")).unwrap());
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 10);
    assert_eq!(summary["n_params"], 1877);
}

#[test]
fn verify_passes_and_detects_a_sign_flip() {
    let ok = isnn(&["verify", "--arch", "isnn2", "--trials", "100", "--deriv-trials", "5"]);
    assert_eq!(code(&ok), 0);
    let table = String::from_utf8(ok.stdout).unwrap();
    assert!(table.contains("convex in x") && !table.contains("FAIL"));
    let bad = isnn(&["verify", "--arch", "isnn1", "--trials", "100", "--deriv-trials", "2", "--inject-sign-flip"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = isnn(&["bench", "--sizes", "2,3", "--repeats", "2", "--seeds", "1", "--out", p(&csv)]);
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("n_params,md_ns,ad_ns,ratio\n"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn gate_and_invert_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let ti = dir.path().join("ti.csv");
    assert_eq!(code(&isnn(&["gen", "nonpoly-ti", "--n", "30", "--out", p(&ti)])), 0);
    let g = dir.path().join("gate");
    let out = isnn(&["gate", "--dataset", p(&ti), "--epochs", "20", "--out", p(&g)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let hist = std::fs::read_to_string(g.join("gate_history.csv")).unwrap();
    assert!(hist.starts_with("epoch,loss,sigmoid_g,gate\n"));
    let pruned: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(g.join("pruned_model.json")).unwrap()).unwrap();
    assert!(pruned["pruned_from_gate"].is_object());

    let bk = dir.path().join("bk.csv");
    assert_eq!(code(&isnn(&["gen", "blatzko", "--nf", "4", "--mu-grid", "2", "--beta-grid", "2", "--out", p(&bk)])), 0);
    let m = dir.path().join("model");
    let args = ["train", "--arch", "isnn2", "--dataset", p(&bk), "--epochs", "5", "--width", "3", "--out", p(&m)];
    assert_eq!(code(&isnn(&args)), 0);
    let inv = dir.path().join("inv");
    let model = m.join("model_seed0.json");
    let args = [
        "invert", "--model", p(&model), "--targets", p(&bk), "--bounds", "1,7;0.125,2", "--seeds", "10", "--max-evals", "60",
        "--out", p(&inv),
    ];
    let out = isnn(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for s in 0..10 {
        let t = std::fs::read_to_string(inv.join(format!("trajectory_seed{s}.csv"))).unwrap();
        assert!(t.starts_with("iteration,param_1,param_2,objective\n"));
    }
}
