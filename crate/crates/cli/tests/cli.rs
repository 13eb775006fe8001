use std::path::Path;
use std::process::{Command, Output};

fn orthocare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orthocare")).args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_single_error_line(out: &Output, prefix: &str) {
    let text = stderr(out);
    assert_eq!(text.lines().count(), 1, "stderr: {text}");
    assert!(text.starts_with(prefix), "stderr: {text}");
}

const TINY: &str = "\
data.n_patients = 300
model.embed_dim = 8
model.hidden_dim = 8
model.repr_dim = 8
model.sae_dim = 16
model.domain_hidden = [8, 8]
train.stage_boundaries = [1, 2, 3]
train.lr_milestones = [2]
train.target_pool = 50
probe.steps = 20
";

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(orthocare(&["--help"]).status.code(), Some(0));
    assert_eq!(orthocare(&["--version"]).status.code(), Some(0));
    assert_eq!(orthocare(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn unknown_flags_and_bad_values_are_validation_errors() {
    for args in [
        &["train", "--epochs", "3"][..],
        &["gen-data", "--seed", "abc"],
        &["frobnicate"],
        &["train", "--seeds", "3..3"],
        &["train", "--variant", "fancy"],
    ] {
        let out = orthocare(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert_single_error_line(&out, "error[validation]: ");
    }
}

#[test]
fn config_problems_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    let out = orthocare(&["gen-data", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_single_error_line(&out, "error[validation]: io: ");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "train.batch_size = 0\n").unwrap();
    let out = orthocare(&["gen-data", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_single_error_line(&out, "error[validation]: config: ");

    std::fs::write(&bad, "train.no_such_key = 1\n").unwrap();
    let out = orthocare(&["gen-data", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn commands_needing_a_model_explain_what_is_missing() {
    let dir = tempfile::tempdir().unwrap();
    let out = orthocare(&["eval", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("run train first"));
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("model.ckpt"), b"not a checkpoint").unwrap();
    let out = orthocare(&["eval", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_single_error_line(&out, "error[validation]: checkpoint: ");
}

#[test]
fn train_eval_interpret_probe_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out_dir = dir.path().join("run");
    let out_arg = out_dir.to_str().unwrap();
    let ok = |args: &[&str]| {
        let out = orthocare(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", stderr(&out));
        String::from_utf8_lossy(&out.stdout).into_owned()
    };
    ok(&["train", "--config", &config, "--variant", "full", "--out", out_arg]);
    for file in ["model.ckpt", "train_log.jsonl", "config.toml", "manifest.json"] {
        assert!(out_dir.join(file).is_file(), "{file}");
    }
    let log = std::fs::read_to_string(out_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    ok(&["eval", "--config", &config, "--k", "2", "--out", out_arg]);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["k"], 2);
    assert_eq!(metrics["seeds"], serde_json::json!([0]));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["artifact_version"], 1);
    assert!(manifest["runs"]["train"]["config_hash"].as_str().unwrap().len() == 64);
    assert!(manifest["runs"]["eval"].is_object());
    assert!(manifest["files"]["model.ckpt"].is_string());
    assert!(manifest["files"]["metrics.json"].is_string());

    let said = ok(&["interpret", "--config", &config, "--k", "2", "--out", out_arg]);
    assert!(said.contains("explained 10 patients"), "{said}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("interpret/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["top_k"], 2);
    for svg in ["interpret/scatter.svg", "interpret/bars.svg"] {
        let text = std::fs::read_to_string(out_dir.join(svg)).unwrap();
        roxmltree::Document::parse(&text).unwrap();
    }

    ok(&["probe", "--config", &config, "--out", out_arg]);
    let probe: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("probe.json")).unwrap()).unwrap();
    for key in ["domain_accuracy_v", "domain_accuracy_z"] {
        let acc = probe[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc), "{key} = {acc}");
    }
}

#[test]
fn probe_refuses_models_without_a_dictionary() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out_arg = dir.path().join("base");
    let out_arg = out_arg.to_str().unwrap();
    let out = orthocare(&["train", "--config", &config, "--variant", "base", "--out", out_arg]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let out = orthocare(&["probe", "--config", &config, "--out", out_arg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("trained dictionary"), "{}", stderr(&out));
}

#[test]
fn seed_sweeps_write_one_directory_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out_dir = dir.path().join("sweep");
    let out_arg = out_dir.to_str().unwrap();
    let out = orthocare(&["train", "--config", &config, "--variant", "no_rec_no_dcl", "--seeds", "3,5", "--out", out_arg]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(out_dir.join("seed_3/model.ckpt").is_file());
    assert!(out_dir.join("seed_5/model.ckpt").is_file());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);

    let out = orthocare(&["interpret", "--config", &config, "--out", out_arg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--seed"));

    let out = orthocare(&["eval", "--config", &config, "--out", out_arg]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["seeds"], serde_json::json!([3, 5]));
}

#[test]
fn gen_data_writes_all_splits_and_honors_shift() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out_dir = dir.path().join("data");
    let out = orthocare(&["gen-data", "--config", &config, "--shift", "0.3", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for domain in ["source", "target"] {
        for split in ["train", "valid", "test"] {
            assert!(out_dir.join(format!("{domain}_{split}.jsonl")).is_file());
        }
    }
    let written = std::fs::read_to_string(out_dir.join("config.toml")).unwrap();
    assert!(written.contains("data.shift_strength = 0.3"), "{written}");

    let out = orthocare(&["gen-data", "--config", &config, "--shift", "1.5", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verification_commands_report_each_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = orthocare(&["gradcheck", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS gradient_")).count(), 4, "{stdout}");
    assert!(dir.path().join("gradcheck.json").is_file());
}
