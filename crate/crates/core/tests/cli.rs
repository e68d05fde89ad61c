use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adapterbias-lab")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn error_json(o: &Output) -> serde_json::Value {
    let err = String::from_utf8(o.stderr.clone()).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    serde_json::from_str(err.trim()).unwrap()
}

const SMALL_RUN: &str = r#"
seeds = [0, 1]

[backbone]
num_layers = 2
hidden_dim = 16
ffn_dim = 32
num_heads = 2

[task]
kind = "keyword-sentiment"

[task.synthetic]
train_size = 120
dev_size = 40

[hyper]
epochs = 2
"#;

fn write_config(dir: &Path, out: &Path) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, format!("output_dir = {:?}\n{SMALL_RUN}", out.to_str().unwrap())).unwrap();
    p
}

#[test]
fn every_subcommand_documents_its_flags() {
    let expected: &[(&str, &[&str])] = &[
        ("train", &["--config", "--output-dir", "--variant", "--seeds", "--epochs", "--learning-rate", "--batch-size", "--l0-lambda", "--task", "--train-tsv", "--dev-tsv"]),
        ("eval", &["--run-dir", "--data"]),
        ("analyze", &["--run-dir", "--out", "--max-sentences"]),
        ("params", &["--preset", "--variant"]),
        ("gradcheck", &["--seed", "--eps"]),
        ("gen-data", &["--config", "--task", "--seed", "--out", "--cache"]),
    ];
    for (cmd, flags) in expected {
        let o = bin(&[cmd, "--help"]);
        assert!(o.status.success());
        let text = stdout(&o);
        for f in *flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn unknown_flags_and_bad_configs_fail_with_one_json_line() {
    let o = bin(&["train", "--epochz", "3"]);
    assert!(!o.status.success());
    assert_eq!(error_json(&o)["error"], "usage");

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[hyper]\nepochs = 2\nmomentum = 0.9\n").unwrap();
    let o = bin(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert_eq!(error_json(&o)["error"], "config");

    let o = bin(&["train", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert!(!o.status.success());
    assert_eq!(error_json(&o)["error"], "io");

    let o = bin(&["train", "--seeds", "", "--output-dir", dir.path().join("x").to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn params_prints_counts() {
    for (preset, variant, n) in [
        ("bert-base-shape", "adapterbias", "64524"),
        ("bert-base-shape", "no-l-alpha", "27648"),
        ("bert-large-shape", "adapterbias", "172056"),
    ] {
        let o = bin(&["params", "--preset", preset, "--variant", variant]);
        assert!(o.status.success());
        assert_eq!(stdout(&o).trim(), n);
    }
}

#[test]
fn train_eval_analyze_and_reproduce_from_the_echo() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write_config(dir.path(), &run);
    let o = bin(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.toml", "vocab.txt", "summary.json", "adapter.ckpt", "seeds.json", "adapter-seed0.ckpt", "adapter-seed1.ckpt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let o = bin(&["eval", "--run-dir", run.to_str().unwrap()]);
    assert!(o.status.success());
    let metrics: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(metrics["accuracy"], summary["best_dev"]["accuracy"]);

    let o = bin(&["analyze", "--run-dir", run.to_str().unwrap(), "--max-sentences", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "token_weights.csv", "pca_points.csv", "alpha_by_layer.csv"] {
        assert!(run.join("analysis").join(f).exists());
    }

    let replay = dir.path().join("replay");
    let o = bin(&["train", "--config", run.join("config.toml").to_str().unwrap(), "--output-dir", replay.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(run.join("adapter.ckpt")).unwrap(), std::fs::read(replay.join("adapter.ckpt")).unwrap());
    let again: serde_json::Value = serde_json::from_slice(&std::fs::read(replay.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["history"], again["history"]);
    assert_eq!(summary["best_dev"], again["best_dev"]);
}

#[test]
fn gen_data_round_trips_through_tsv_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = bin(&["gen-data", "--task", "reflexive-agreement", "--seed", "3", "--out", data.to_str().unwrap(), "--cache"]);
    assert!(o.status.success());
    for f in ["train.tsv", "dev.tsv", "train.cache", "dev.cache"] {
        assert!(data.join(f).exists());
    }
    let o = bin(&[
        "train",
        "--task",
        "tsv",
        "--train-tsv",
        data.join("train.tsv").to_str().unwrap(),
        "--dev-tsv",
        data.join("dev.tsv").to_str().unwrap(),
        "--epochs",
        "1",
        "--variant",
        "bitfit",
        "--output-dir",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_reports_a_small_error() {
    let o = bin(&["gradcheck", "--seed", "3"]);
    assert!(o.status.success());
    assert!(stdout(&o).trim().parse::<f64>().unwrap() < 1e-4);
}
