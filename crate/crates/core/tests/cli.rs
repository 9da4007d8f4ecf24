//! End-to-end checks of the `sdebnn` binary: determinism, output
//! schemas, and the exit-code / error-JSON contract.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sdebnn"))
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        r#"
task = "toy1d"
seed = 7
epochs = 2
batch_size = 20
lr = 1e-3
dataset_size = 40
train_samples = 1
eval_samples = 4
hidden_widths = [4]
drift_widths = [2, 8, 2]

[solver]
mode = "fixed"
steps = 4
"#,
    )
    .unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Parse the single-line error JSON the binary prints on failure.
fn error_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.trim())
        .unwrap_or_else(|e| panic!("stderr is not one JSON object ({e}): {stderr:?}"))
}

#[test]
fn train_runs_are_bitwise_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let res = run(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_success(&res);
    }
    for name in ["metrics.jsonl", "checkpoint.json"] {
        let lhs = fs::read(a.join(name)).unwrap();
        let rhs = fs::read(b.join(name)).unwrap();
        assert_eq!(lhs, rhs, "{name} differs between identical runs");
    }
}

#[test]
fn train_artifacts_embed_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let out = tmp.path().join("run");
    assert_success(&run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(first["version"], sdebnn::VERSION);
    assert_eq!(first["seed"], 7);
    assert_eq!(first["config"]["task"], "toy1d");
    // two epochs follow the provenance header
    assert_eq!(metrics.lines().count(), 3);
}

#[test]
fn eval_step_sweep_emits_one_row_per_step() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let out = tmp.path().join("run");
    assert_success(&run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    let report_path = tmp.path().join("eval.json");
    assert_success(&run(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        out.join("checkpoint.json").to_str().unwrap(),
        "--step-sweep",
        "2,4,8,16",
        "--posterior-samples",
        "2",
        "--out",
        report_path.to_str().unwrap(),
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report_path).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for (row, steps) in rows.iter().zip([2, 4, 8, 16]) {
        assert_eq!(row["steps"], steps);
        assert!(row["mse"].as_f64().unwrap().is_finite());
        assert!(row["nll"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn gradvar_emits_all_three_estimator_series() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let csv_path = tmp.path().join("gradvar.csv");
    assert_success(&run(&[
        "gradvar",
        "--config",
        config.to_str().unwrap(),
        "--samples",
        "4",
        "--out",
        csv_path.to_str().unwrap(),
    ]));
    let csv = fs::read_to_string(csv_path).unwrap();
    let data: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(
        data[0],
        "estimator,n_samples,mean_grad_norm,grad_norm_variance,\
         total_variance,mean_component_variance,mean_elbo"
            .replace(' ', "")
    );
    let names: Vec<&str> = data[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(names, ["standard", "fullmc", "stl"]);
}

#[test]
fn worker_count_does_not_change_output() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let csvs: Vec<Vec<u8>> = ["1", "4"]
        .iter()
        .map(|w| {
            let path = tmp.path().join(format!("gv{w}.csv"));
            assert_success(&run(&[
                "--workers",
                w,
                "gradvar",
                "--config",
                config.to_str().unwrap(),
                "--samples",
                "6",
                "--out",
                path.to_str().unwrap(),
            ]));
            fs::read(path).unwrap()
        })
        .collect();
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.toml");
    fs::write(&config, "task = \"toy1d\"\nlearning_rate = 0.1\n").unwrap();
    let out = run(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_json(&out);
    assert_eq!(err["code"], "config");
    assert!(err["message"].as_str().unwrap().contains("learning_rate"));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let out = run(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        tmp.path().join("nope.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_json(&out);
    assert_eq!(err["code"], "io");
    assert!(err["context"].is_object() || err["context"].is_string() || err["context"].is_null());
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = run(&["train"]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_json(&out);
    assert_eq!(err["code"], "usage");
}
