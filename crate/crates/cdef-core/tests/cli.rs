//! End-to-end tests of the `cdef` binary: exit codes, output files,
//! rerun determinism, and search resume.

use cdef_core::manifest::RunManifest;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cdef(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdef"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

const BASE_CONFIG: &str = r#"
[data]
source = "blobs"
n_classes = 3
per_class = 60
feature_dim = 4
spread = 0.08

[model]
layers = ["affine 4 12", "relu", "affine 12 3"]

[train]
epochs = 15
batch_size = 8
lr = 0.3

[attack]
epsilon = 0.05
alpha = 0.01
steps = 5

[robustness]
per_pair_cap = 4
"#;

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, format!("{BASE_CONFIG}{extra}")).unwrap();
    path
}

fn manifest(dir: &Path) -> RunManifest {
    RunManifest::from_json(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn missing_config_exits_2() {
    let out = cdef(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(exit_code(&out), 2);
    assert!(!out.stderr.is_empty());
}

#[test]
fn invalid_config_exits_2_with_field_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[loss]\nvariant = \"combined_v1\"\nmatrix_path = \"missing.csv\"\n",
    );
    let out = cdef(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("loss.matrix_path"), "{msg}");
}

#[test]
fn divergent_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // An absurd lambda overflows the gradients on the first batch.
    let cfg = write_config(
        dir.path(),
        "\n[loss]\nvariant = \"combined_v2\"\nlambda = 1e308\n",
    );
    let text = std::fs::read_to_string(&cfg).unwrap().replace("lr = 0.3", "lr = 100.0");
    std::fs::write(&cfg, text).unwrap();
    let out = cdef(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 3);
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("diverged"), "{msg}");
}

#[test]
fn bad_objective_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = cdef(&[
        "search",
        "--config",
        cfg.to_str().unwrap(),
        "--objective",
        "sideways",
    ]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn train_and_robustness_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out_dir = dir.path().join("run1");
    let out = cdef(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let model = out_dir.join("model.json");
    assert!(model.is_file());
    assert!(out_dir.join("metrics.json").is_file());

    let out = cdef(&[
        "robustness",
        "--config",
        cfg.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("robustness.csv").is_file());
    assert!(out_dir.join("robustness.json").is_file());

    let out = cdef(&[
        "attack",
        "--config",
        cfg.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--source",
        "0",
        "--target",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("attack_0_2.csv").is_file());
}

#[test]
fn train_rerun_manifests_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out_dir in [&a, &b] {
        let out = cdef(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&out), 0);
    }
    assert!(manifest(&a).same_content(&manifest(&b)));
}

#[test]
fn search_resume_reproduces_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    // Small cap keeps the retrain count down while still producing a
    // multi-record trace to cut.
    let cfg = write_config(
        dir.path(),
        "\n[loss]\nvariant = \"combined_v2\"\n\n[search]\nxi = 0.5\nm_cap = 6.0\nmax_outer_iters = 3\n",
    );
    let full = dir.path().join("full");
    let out = cdef(&[
        "search",
        "--config",
        cfg.to_str().unwrap(),
        "--objective",
        "lower",
        "--out",
        full.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(full.join("trace.jsonl")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert!(lines.len() >= 2, "trace too short to cut: {}", lines.len());

    // Cut after the first record and resume.
    let partial = dir.path().join("trace_partial.jsonl");
    std::fs::write(&partial, format!("{}\n", lines[0])).unwrap();
    let resumed = dir.path().join("resumed");
    let out = cdef(&[
        "search",
        "--config",
        cfg.to_str().unwrap(),
        "--objective",
        "lower",
        "--resume",
        partial.to_str().unwrap(),
        "--out",
        resumed.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    for name in ["m_final.csv", "trace.jsonl", "model.json", "search.json"] {
        let a = std::fs::read_to_string(full.join(name)).unwrap();
        let b = std::fs::read_to_string(resumed.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs after resume");
    }
}
