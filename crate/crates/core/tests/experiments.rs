use std::fs;
use std::path::Path;

use tempfile::TempDir;

use slu_core::corpus::save_manifest;
use slu_core::experiments::{emit_plot_data, load_sweep, sweep_real_speakers, sweep_synthetic_speakers, ExperimentConfig, StoredSweep};
use slu_core::semantics::LabelVariant;
use slu_core::synth::InventoryConfig;
use slu_core::toy::{build_toy_corpus, fixed_slot_grammar};
use slu_core::Error;

/// Eight transcripts rendered by three voices of each style.
fn corpus(dir: &Path) {
    let inventory = InventoryConfig {
        n_synthetic: 3,
        n_real: 3,
        ..InventoryConfig::default()
    };
    let c = build_toy_corpus(&fixed_slot_grammar()[..8], LabelVariant::FixedSlot, &inventory, 8000, &dir.join("audio")).unwrap();
    save_manifest(&c.synthetic, dir.join("syn.csv")).unwrap();
    save_manifest(&c.real, dir.join("real.csv")).unwrap();
}

fn config(dir: &Path, sweep: &str, overrides: &[&str]) -> ExperimentConfig {
    let text = format!(
        r#"
name = "tiny"
results_dir = "results"
jobs = 1
[features]
mode = {{ mode = "log_mel", n_mels = 8 }}
sample_rate = 8000
hop_s = 0.02
[model.encoder]
input_dim = 8
conv = [{{ channels = 4, kernel = 3, pool = 2 }}]
rnn = [{{ hidden = 4, bidirectional = true }}]
[model.decoder]
kind = "max_pool"
[train]
epochs = 2
batch_size = 8
[data]
synthetic = "syn.csv"
real = "real.csv"
test = "real.csv"
[sweep]
{sweep}
"#
    );
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_toml(&text, &overrides, dir).unwrap()
}

const SYNTHETIC: &str = r#"variable = "n_synthetic_speakers"
points = [1, 3]
runs = 2"#;

#[test]
fn smoke_sweep_stores_every_run() {
    let tmp = TempDir::new().unwrap();
    corpus(tmp.path());
    let cfg = config(tmp.path(), SYNTHETIC, &[]);
    let r = sweep_synthetic_speakers::<f32>(&cfg).unwrap();
    assert_eq!(r.points.iter().map(|p| p.x).collect::<Vec<_>>(), vec![1, 3]);
    for p in &r.points {
        assert_eq!(p.accuracy.n, 2);
        for run in &p.runs {
            assert_eq!(run.speakers.len(), p.x);
            assert_eq!(run.train_size, 8 * p.x);
        }
    }
    let exp = tmp.path().join("results/tiny");
    for f in ["sweep.json", "effective_config.toml"] {
        assert!(exp.join(f).exists(), "{f}");
    }
    for f in ["metrics.json", "history.jsonl", "config.json", "provenance.json"] {
        assert!(exp.join("synthetic/3/run1").join(f).exists(), "{f}");
    }
    match load_sweep(&exp).unwrap() {
        StoredSweep::Synthetic(s) => assert_eq!(s, r),
        StoredSweep::Real(_) => panic!("stored as a real-speaker sweep"),
    }
    let plot = exp.join("plot.txt");
    emit_plot_data(&r, &plot).unwrap();
    assert_eq!(fs::read_to_string(plot).unwrap().lines().count(), 3);
}

#[test]
fn rerun_resumes_and_rejects_changed_configs() {
    let tmp = TempDir::new().unwrap();
    corpus(tmp.path());
    let cfg = config(tmp.path(), SYNTHETIC, &[]);
    let first = sweep_synthetic_speakers::<f32>(&cfg).unwrap();
    let runs = tmp.path().join("results/tiny/synthetic");
    let stamp = fs::read(runs.join("1/run0/provenance.json")).unwrap();

    // an interrupted run leaves a partial directory and no committed run
    fs::rename(runs.join("3/run1"), runs.join("3/run1.partial")).unwrap();
    let second = sweep_synthetic_speakers::<f32>(&cfg).unwrap();
    assert_eq!(first, second);
    assert_eq!(fs::read(runs.join("1/run0/provenance.json")).unwrap(), stamp, "finished run was retrained");
    assert!(!runs.join("3/run1.partial").exists());

    let changed = config(tmp.path(), SYNTHETIC, &["train.lr=0.01"]);
    match sweep_synthetic_speakers::<f32>(&changed) {
        Err(Error::Config(msg)) => assert!(msg.contains("different configuration"), "{msg}"),
        other => panic!("expected a configuration error, got {other:?}"),
    }
}

#[test]
fn real_arm_with_every_speaker_equals_the_all_real_reference() {
    let tmp = TempDir::new().unwrap();
    corpus(tmp.path());
    let sweep = r#"variable = "n_real_speakers"
points = [3]
runs = 1
augment = false"#;
    let cfg = config(tmp.path(), sweep, &[]);
    let r = sweep_real_speakers::<f32>(&cfg).unwrap();
    assert!(r.augmented.is_none());
    let arm = &r.real.points[0].runs[0];
    let reference = &r.all_real.as_ref().unwrap().runs[0];
    assert_eq!(arm.train_size, reference.train_size);
    assert_eq!(arm.accuracy, reference.accuracy);
    assert_eq!(arm.loss, reference.loss);
    assert_eq!(arm.best_loss, reference.best_loss);
    assert_eq!(r.all_synthetic.as_ref().unwrap().runs[0].speakers.len(), 3);
}

#[test]
fn augmented_and_real_arms_share_subsets() {
    let tmp = TempDir::new().unwrap();
    corpus(tmp.path());
    let sweep = r#"variable = "n_real_speakers"
points = [1, 2]
runs = 2
references = false"#;
    let cfg = config(tmp.path(), sweep, &[]);
    let r = sweep_real_speakers::<f32>(&cfg).unwrap();
    let aug = r.augmented.unwrap();
    for (p, q) in r.real.points.iter().zip(&aug.points) {
        for (a, b) in p.runs.iter().zip(&q.runs) {
            assert_eq!(a.subset_seed, b.subset_seed);
            assert!(a.speakers.iter().all(|s| b.speakers.contains(s)));
            // the real-only arm is upsampled to the augmented size
            assert_eq!(a.train_size, b.train_size);
        }
    }
}
