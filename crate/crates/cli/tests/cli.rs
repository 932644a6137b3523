use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn slu(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slu"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn success(dir: &Path, args: &[&str]) -> String {
    let out = slu(dir, args);
    assert!(
        out.status.success(),
        "slu {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const CONFIG: &str = r#"
name = "cli"
results_dir = "results"
jobs = 1
[features]
mode = { mode = "log_mel", n_mels = 8 }
sample_rate = 8000
hop_s = 0.02
[model.encoder]
input_dim = 8
conv = [{ channels = 4, kernel = 3, pool = 2 }]
rnn = [{ hidden = 4, bidirectional = true }]
[model.decoder]
kind = "max_pool"
[train]
epochs = 1
batch_size = 32
[data]
synthetic = "data/synthetic.csv"
real = "data/real_train.csv"
test = "data/real_test.csv"
[sweep]
variable = "n_synthetic_speakers"
points = [1, 2]
runs = 1
"#;

#[test]
fn toy_data_train_evaluate_sweep_report() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let out = success(dir, &["toy-data", "--out", "data"]);
    assert!(out.contains("46 transcripts"), "{out}");
    for f in ["text.csv", "synthetic.csv", "real.csv", "real_train.csv", "real_test.csv"] {
        assert!(dir.join("data").join(f).exists(), "{f}");
    }
    fs::write(dir.join("exp.toml"), CONFIG).unwrap();

    success(dir, &["train", "-c", "exp.toml", "--out", "model.ckpt"]);
    for f in ["model.ckpt", "model.history.jsonl", "model.config.toml"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&success(dir, &["evaluate", "--model", "model.ckpt", "--manifest", "data/real_test.csv"])).unwrap();
    assert_eq!(metrics["n_utterances"], 46 * 4);
    assert!((0.0..=1.0).contains(&metrics["accuracy"].as_f64().unwrap()));

    success(dir, &["sweep", "-c", "exp.toml"]);
    let plot = fs::read_to_string(dir.join("results/cli/plot_synthetic.txt")).unwrap();
    assert_eq!(plot.lines().count(), 3);
    let report = success(dir, &["report", "results/cli"]);
    assert!(report.contains("synthetic arm"), "{report}");
}

#[test]
fn bad_input_fails_with_a_message() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("exp.toml"), CONFIG).unwrap();
    let out = slu(dir, &["sweep", "-c", "exp.toml", "--set", "sweep.points=[2, 1]"]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());

    let out = slu(dir, &["report", "."]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("neither sweep.json nor cv.json"));
}
