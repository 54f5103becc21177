use std::path::Path;
use std::process::{Command, Output};

fn dmaseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmaseg")).args(args).env_remove("DMASEG_OUTPUT_ROOT").output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn generate(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "generate", "--out", dir.to_str().unwrap(), "--motions", "4", "--shapes", "3", "--clips", "2",
        "--frames", "4", "--size", "64", "--seed", "9", "--holdout", "0:0", "--holdout", "1:1",
    ];
    args.extend_from_slice(extra);
    dmaseg(&args)
}

#[test]
fn generate_is_deterministic_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let stdout = ok(generate(&a, &[]));
    assert!(stdout.contains("held-out cells: 0:0 1:1"), "{stdout}");
    ok(generate(&b, &[]));
    let manifest = |d: &Path| std::fs::read(d.join("manifest.json")).unwrap();
    assert_eq!(manifest(&a), manifest(&b));

    let again = generate(&a, &[]);
    assert!(!again.status.success());
    ok(generate(&a, &["--overwrite"]));
}

#[test]
fn output_root_variable_and_config_file_apply() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(&cfg, r#"{ "synthetic": { "clips_per_cell": 1 } }"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dmaseg"))
        .args(["--config", cfg.to_str().unwrap(), "generate", "--out", "data", "--motions", "4", "--shapes", "3"])
        .args(["--clips", "3", "--frames", "2", "--size", "64"])
        .env("DMASEG_OUTPUT_ROOT", tmp.path())
        .output()
        .unwrap();
    let stdout = ok(out);
    assert!(stdout.starts_with("wrote 12 clips"), "{stdout}");
    assert!(tmp.path().join("data/manifest.json").exists());
}

#[test]
fn bad_arguments_fail() {
    assert!(!dmaseg(&["train", "--no-such-flag"]).status.success());
    assert!(!dmaseg(&["train", "--data", "x", "--out", "y", "--ablate", "nonsense"]).status.success());
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{ "optimizer": {} }"#).unwrap();
    let out = dmaseg(&["--config", cfg.to_str().unwrap(), "generate", "--out", tmp.path().join("d").to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn train_eval_visualize_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(generate(&data, &[]));
    let data = data.to_str().unwrap();
    let run = tmp.path().join("run");
    let run = run.to_str().unwrap();
    let train = [
        "train", "--data", data, "--out", run, "--split", "holdout", "--n", "2", "--k", "1", "--frames", "2",
        "--episodes", "2", "--dim", "16", "--ablate", "no-aux-motion",
    ];
    ok(dmaseg(&train));
    assert!(!dmaseg(&train).status.success(), "second train must refuse the non-empty directory");

    let report = tmp.path().join("eval.json");
    let stdout = ok(dmaseg(&[
        "eval", "--checkpoint", run, "--data", data, "--episodes", "4", "--oracle-mask", "--oracle-motion",
        "--out", report.to_str().unwrap(),
    ]));
    assert!(stdout.contains("model"), "{stdout}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let summary = &report["rows"][0]["summary"];
    assert_eq!(summary["jf"].as_f64(), Some(1.0), "{summary}");

    let vis = tmp.path().join("vis");
    ok(dmaseg(&[
        "visualize", "--checkpoint", run, "--data", data, "--out", vis.to_str().unwrap(), "--frames", "2",
        "--perplexity", "3", "--iterations", "50",
    ]));
    let csv = std::fs::read_to_string(vis.join("scatter.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 24);
    for f in ["scatter.png", "prototypes.jsonl", "silhouettes.json"] {
        assert!(vis.join(f).exists(), "{f}");
    }
}
