use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "input_len = 8
pred_len = 4
d_model = 8
k = 4
n_heads = 2
d_ff = 16
epochs = 1
batch_size = 16
synthetic_len = 300
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_draformer"))
        .args(args)
        .output()
        .unwrap()
}

fn config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        format!("{TINY}{extra}output_dir = {:?}\n", dir.to_str().unwrap()),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let out = run(&["evaluate", "-c", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "not_a_key = 3\n").unwrap();
    assert_eq!(
        run(&["train", "-c", bad.to_str().unwrap()]).status.code(),
        Some(1)
    );

    let missing = run(&["train", "--data", "/nonexistent/file.csv"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn train_evaluate_predict_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    assert!(run(&["train", "-c", &cfg]).status.success());
    assert!(dir.path().join("checkpoint.ckpt").exists());
    let log = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    assert!(run(&["evaluate", "-c", &cfg]).status.success());
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let splits: Vec<&str> = metrics
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(splits, ["val", "test", "test_repeat_last"]);
    let jsonl = fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    for line in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["runtime_secs"].as_f64().is_some());
    }

    assert!(run(&["predict", "-c", &cfg, "--windows", "0,1"])
        .status
        .success());
    let preds = fs::read_to_string(dir.path().join("predictions.csv")).unwrap();
    // header + 2 windows x 4 steps x 2 variables
    assert_eq!(preds.lines().count(), 1 + 2 * 4 * 2);

    let svg = dir.path().join("p.svg");
    assert!(run(&[
        "plot",
        "-c",
        &cfg,
        "--variable",
        "1",
        "--out",
        svg.to_str().unwrap()
    ])
    .status
    .success());
    let text = fs::read_to_string(&svg).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    assert!(doc.descendants().any(|n| n.tag_name().name() == "polyline"));

    assert_eq!(
        run(&["plot", "-c", &cfg, "--window", "9999"]).status.code(),
        Some(1)
    );
}

#[test]
fn ablate_writes_three_rows_per_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    assert!(run(&["ablate", "-c", &cfg, "--horizons", "2,4"])
        .status
        .success());
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 6);
    for h in ["2", "4"] {
        let mut variants: Vec<&str> = rows.iter().filter(|r| r[1] == h).map(|r| r[0]).collect();
        variants.sort();
        assert_eq!(variants, ["-attention", "-sequence", "full"]);
    }
}

#[test]
fn gradcheck_command_passes() {
    let out = run(&["gradcheck"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        String::from_utf8_lossy(&out.stdout)
            .lines()
            .filter(|l| l.ends_with(" ok"))
            .count(),
        7
    );
}
