//! End-to-end tests of the `ziqe` binary via its public interface.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ziqe"))
}

fn run_ok(args: &[&str], dir: &Path) -> Output {
    let out = bin().args(args).current_dir(dir).output().unwrap();
    assert!(
        out.status.success(),
        "command {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const TINY_CONFIG: &str = "count=60
d_model=16
heads=2
encoder_layers=1
memory_layers=1
feedforward_dim=32
raw_dim=4
stack_window=2
stack_stride=2
epochs=1
batch_size=16
seed=3
";

fn write_config(dir: &Path) {
    std::fs::write(dir.join("run.config"), TINY_CONFIG).unwrap();
}

#[test]
fn full_pipeline_produces_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir);
    run_ok(&["--config", "run.config", "--out", "art", "synth"], dir);
    run_ok(
        &[
            "--config",
            "run.config",
            "--out",
            "art",
            "pretrain",
            "--dataset",
            "art/dataset.ds",
        ],
        dir,
    );
    let out = run_ok(
        &[
            "--config",
            "run.config",
            "--out",
            "art",
            "fitphi",
            "--dataset",
            "art/dataset.ds",
        ],
        dir,
    );
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("phi="));
    run_ok(
        &[
            "--config",
            "run.config",
            "--out",
            "art",
            "finetune",
            "--dataset",
            "art/dataset.ds",
            "--checkpoint",
            "art/pretrained.ckpt",
        ],
        dir,
    );
    run_ok(
        &[
            "--config",
            "run.config",
            "--out",
            "art",
            "predict",
            "--dataset",
            "art/dataset.ds",
            "--checkpoint",
            "art/finetuned.ckpt",
        ],
        dir,
    );
    let out = run_ok(
        &[
            "--config",
            "run.config",
            "--out",
            "art",
            "evaluate",
            "--dataset",
            "art/dataset.ds",
            "--predictions",
            "art/predictions.tsv",
        ],
        dir,
    );
    let record = String::from_utf8_lossy(&out.stdout);
    assert!(record.contains("mae=") && record.contains("pearson="), "{record}");
    run_ok(
        &[
            "--config",
            "run.config",
            "--out",
            "art",
            "dump-attention",
            "--dataset",
            "art/dataset.ds",
            "--checkpoint",
            "art/finetuned.ckpt",
        ],
        dir,
    );
    for artifact in [
        "art/resolved.config",
        "art/dataset.ds",
        "art/dataset.feat",
        "art/pretrained.ckpt",
        "art/loss_curve.txt",
        "art/phi.txt",
        "art/finetuned.ckpt",
        "art/finetune_report.txt",
        "art/predictions.tsv",
        "art/eval.txt",
        "art/attention_layer0.tsv",
    ] {
        assert!(dir.join(artifact).exists(), "missing {artifact}");
    }
    let eval = std::fs::read_to_string(dir.join("art/eval.txt")).unwrap();
    assert!(eval.contains("pearson by reference token length"));
}

#[test]
fn synth_and_predict_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir);
    run_ok(&["--config", "run.config", "--out", "a", "synth"], dir);
    run_ok(&["--config", "run.config", "--out", "b", "synth"], dir);
    let a = std::fs::read(dir.join("a/dataset.ds")).unwrap();
    let b = std::fs::read(dir.join("b/dataset.ds")).unwrap();
    assert_eq!(a, b);
    let af = std::fs::read(dir.join("a/dataset.feat")).unwrap();
    let bf = std::fs::read(dir.join("b/dataset.feat")).unwrap();
    assert_eq!(af, bf);

    run_ok(
        &[
            "--config",
            "run.config",
            "--out",
            "a",
            "pretrain",
            "--dataset",
            "a/dataset.ds",
        ],
        dir,
    );
    // Backbone-only checkpoints cannot predict; fine-tune a head first with
    // the backbone frozen so the run stays cheap.
    std::fs::write(
        dir.join("frozen.config"),
        format!("{TINY_CONFIG}freeze_backbone=true\n"),
    )
    .unwrap();
    run_ok(
        &[
            "--config",
            "frozen.config",
            "--out",
            "a",
            "finetune",
            "--dataset",
            "a/dataset.ds",
            "--checkpoint",
            "a/pretrained.ckpt",
        ],
        dir,
    );
    for out in ["p1", "p2"] {
        run_ok(
            &[
                "--config",
                "run.config",
                "--out",
                out,
                "predict",
                "--dataset",
                "a/dataset.ds",
                "--checkpoint",
                "a/finetuned.ckpt",
            ],
            dir,
        );
    }
    let p1 = std::fs::read(dir.join("p1/predictions.tsv")).unwrap();
    let p2 = std::fs::read(dir.join("p2/predictions.tsv")).unwrap();
    assert_eq!(p1, p2);
}

#[test]
fn evaluate_perfect_predictions_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_config(dir);
    run_ok(&["--config", "run.config", "--out", "art", "synth"], dir);
    // Copy each label into the score column (lambda/mu filled arbitrarily).
    let ds = std::fs::read_to_string(dir.join("art/dataset.ds")).unwrap();
    let mut preds = String::new();
    for line in ds.lines().skip(1) {
        let fields: Vec<&str> = line.split('\t').collect();
        preds.push_str(&format!("{}\t0.5\t0.5\t{}\n", fields[0], fields[3]));
    }
    std::fs::write(dir.join("perfect.tsv"), preds).unwrap();
    let out = run_ok(
        &[
            "--config",
            "run.config",
            "--out",
            "art",
            "evaluate",
            "--dataset",
            "art/dataset.ds",
            "--predictions",
            "perfect.tsv",
        ],
        dir,
    );
    let record = String::from_utf8_lossy(&out.stdout);
    let get = |key: &str| -> f64 {
        record
            .split_whitespace()
            .find_map(|f| f.strip_prefix(&format!("{key}=")))
            .unwrap()
            .parse()
            .unwrap()
    };
    // Scores are the labels rounded to 6 decimals, so "perfect" up to rounding.
    assert!(get("mae") < 1e-3, "{record}");
    assert!(get("pearson") > 0.999_99, "{record}");
    assert!(get("ndcg") > 0.999_99, "{record}");
    assert!((get("f1") - 1.0).abs() < 1e-12, "{record}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("bad.config"), "no_such_key=1\n").unwrap();
    let out = bin()
        .args(["--config", "bad.config", "--out", "art", "synth"])
        .current_dir(dir)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));
}

#[test]
fn missing_dataset_fails_with_nonzero_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--out", "art", "fitphi", "--dataset", "nope.ds"])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn gradcheck_reports_all_pass() {
    let out = bin().arg("gradcheck").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().count() >= 10);
    for line in text.lines() {
        assert!(line.starts_with("pass"), "{line}");
    }
}
