//! End-to-end tests of the installed binary: exit codes, overrides, report
//! files, and the report-diff contract, all on a deliberately tiny model so
//! each invocation stays fast.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mudpt::numerics::SgdSchedule;
use mudpt_cli::config::{ExperimentConfig, PretrainConfig};

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mudpt-cli"))
}

/// Tiny-but-complete experiment: 2-layer towers, 4 classes, 6 tuning steps,
/// no pretraining.
fn tiny_config(out_dir: &Path) -> ExperimentConfig {
    let mut config = ExperimentConfig::desk_default();
    config.backbone.d_t = 16;
    config.backbone.d_v = 16;
    config.backbone.d_c = 8;
    config.backbone.layers = 2;
    config.backbone.heads = 2;
    config.backbone.patch_count = 4;
    config.backbone.raw_patch_dim = 4;
    config.prompt.length = 4;
    config.prompt.depth = 2;
    config.prompt.injection_width = 16;
    config.prompt.injection_heads = 2;
    config.data.classes = 4;
    config.data.pretrain_classes = 8;
    config.data.shots = 2;
    config.data.train_per_class = 4;
    config.data.val_per_class = 2;
    config.data.test_per_class = 4;
    config.tuning = SgdSchedule { learning_rate: 0.01, epochs: 2, batch_size: 2 };
    config.tuning_steps = Some(6);
    config.pretrain = PretrainConfig {
        schedule: SgdSchedule { learning_rate: 0.03, epochs: 1, batch_size: 4 },
        steps: 0,
    };
    config.output_dir = out_dir.to_string_lossy().into_owned();
    config
}

fn write_config(dir: &Path, config: &ExperimentConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    config.save(&path).unwrap();
    path
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

#[test]
fn run_succeeds_and_writes_both_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config_path = write_config(dir.path(), &tiny_config(&out));
    let output = binary().arg("run").arg(&config_path).output().unwrap();
    assert!(output.status.success(), "stderr: {}", stderr_of(&output));
    assert!(out.join("report.json").exists());
    assert!(out.join("report.txt").exists());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("mudpt"), "stdout should carry the table:\n{stdout}");
}

#[test]
fn invalid_config_exits_2_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(&dir.path().join("out"));
    config.version = 99;
    let config_path = write_config(dir.path(), &config);
    let output = binary().arg("run").arg(&config_path).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr_of(&output).contains("version"), "stderr: {}", stderr_of(&output));
}

#[test]
fn unparseable_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    fs::write(&config_path, "{\"version\": 1,").unwrap();
    let output = binary().arg("run").arg(&config_path).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn unknown_mode_flag_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = write_config(dir.path(), &tiny_config(&dir.path().join("out")));
    let output = binary()
        .args(["run"])
        .arg(&config_path)
        .args(["--mode", "deep_prompts"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr_of(&output).contains("deep_prompts"));
}

#[test]
fn seed_and_out_overrides_reach_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = write_config(dir.path(), &tiny_config(&dir.path().join("ignored")));
    let out = dir.path().join("elsewhere");
    let output = binary()
        .arg("run")
        .arg(&config_path)
        .args(["--seed", "7", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr_of(&output));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 7);
    assert!(!dir.path().join("ignored").exists());
}

#[test]
fn mode_override_replaces_the_config_list() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config_path = write_config(dir.path(), &tiny_config(&out));
    let output = binary()
        .arg("run")
        .arg(&config_path)
        .args(["--mode", "zero_shot", "--mode", "text_only"])
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr_of(&output));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let modes: Vec<&str> =
        report["modes"].as_array().unwrap().iter().map(|m| m["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["zero_shot", "text_only"]);
}

#[test]
fn report_diff_distinguishes_identical_from_different_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let out_c = dir.path().join("c");
    let config_path = write_config(dir.path(), &tiny_config(&out_a));
    for (out, seed) in [(&out_a, "0"), (&out_b, "0"), (&out_c, "5")] {
        let output = binary()
            .arg("run")
            .arg(&config_path)
            .args(["--seed", seed, "--out"])
            .arg(out)
            .output()
            .unwrap();
        assert!(output.status.success(), "stderr: {}", stderr_of(&output));
    }
    // Same seed into two directories: once the volatile fields (wall time and
    // the echoed output_dir) are normalized, the reports must match byte for
    // byte.
    let normalize = |path: &Path, dir_name: &str| {
        fs::read_to_string(path)
            .unwrap()
            .replace(dir_name, "OUT")
            .lines()
            .filter(|l| !l.contains("wall_time_seconds"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(
        normalize(&out_a.join("report.json"), &out_a.to_string_lossy()),
        normalize(&out_b.join("report.json"), &out_b.to_string_lossy()),
        "same seed must reproduce the report byte for byte"
    );

    let diff_self = binary()
        .arg("report-diff")
        .arg(out_a.join("report.json"))
        .arg(out_a.join("report.json"))
        .output()
        .unwrap();
    assert!(diff_self.status.success());
    let diff_other = binary()
        .arg("report-diff")
        .arg(out_a.join("report.json"))
        .arg(out_c.join("report.json"))
        .output()
        .unwrap();
    assert_eq!(diff_other.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&diff_other.stdout);
    assert!(stdout.contains("differ"), "stdout: {stdout}");
}

#[test]
fn rerun_into_the_same_directory_reproduces_report_json_modulo_wall_time() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config_path = write_config(dir.path(), &tiny_config(&out));
    assert!(binary().arg("run").arg(&config_path).output().unwrap().status.success());
    let first = fs::read_to_string(out.join("report.json")).unwrap();
    let keep = out.join("first_report.json");
    fs::copy(out.join("report.json"), &keep).unwrap();
    assert!(binary().arg("run").arg(&config_path).output().unwrap().status.success());
    let second = fs::read_to_string(out.join("report.json")).unwrap();
    let strip = |s: &str| {
        s.lines().filter(|l| !l.contains("wall_time_seconds")).collect::<Vec<_>>().join("\n")
    };
    assert_eq!(strip(&first), strip(&second));
    let diff = binary()
        .arg("report-diff")
        .arg(&keep)
        .arg(out.join("report.json"))
        .output()
        .unwrap();
    assert!(diff.status.success(), "report-diff must ignore wall time");
}

#[test]
fn gen_data_writes_both_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config_path = write_config(dir.path(), &tiny_config(&out));
    let output = binary().arg("gen-data").arg(&config_path).output().unwrap();
    assert!(output.status.success(), "stderr: {}", stderr_of(&output));
    for name in ["corpus.jsonl", "pretrain_corpus.jsonl"] {
        let corpus = mudpt::datagen::load_corpus(&out.join(name)).unwrap();
        assert!(!corpus.examples.is_empty(), "{name} should hold examples");
    }
}

#[test]
fn pretrain_writes_a_loadable_checkpoint_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut config = tiny_config(&out);
    config.pretrain.steps = 5;
    let config_path = write_config(dir.path(), &config);
    let output = binary().arg("pretrain").arg(&config_path).output().unwrap();
    assert!(output.status.success(), "stderr: {}", stderr_of(&output));
    let ckpt = mudpt::checkpoint::load_checkpoint(&out.join("backbone.ckpt.json")).unwrap();
    assert_eq!(ckpt.kind, "backbone");
    assert!(!ckpt.params.is_empty());
    let trace = fs::read_to_string(out.join("pretrain_trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 5);
}

#[test]
fn grad_check_rejects_zero_shot_mode() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = write_config(dir.path(), &tiny_config(&dir.path().join("out")));
    let output = binary()
        .arg("grad-check")
        .arg(&config_path)
        .args(["--mode", "zero_shot"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr_of(&output).contains("zero_shot"));
}

#[test]
fn grad_check_passes_on_a_tiny_tuned_model() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = write_config(dir.path(), &tiny_config(&dir.path().join("out")));
    let output = binary()
        .arg("grad-check")
        .arg(&config_path)
        .args(["--mode", "mudpt"])
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", stderr_of(&output));
    let stdout = String::from_utf8_lossy(&output.stdout);
    let line = stdout.lines().next().expect("one JSON line per mode");
    let verdict: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(verdict["mode"], "mudpt");
    assert_eq!(verdict["pass"], true);
    assert!(verdict["max_relative_error"].as_f64().unwrap() <= 1e-3);
}
