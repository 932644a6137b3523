//! Seeded training, best-metric tracking and cross-validation.

pub mod optim;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{concat_datasets, make_folds, upsample, Manifest};
use crate::error::{Error, Result};
use crate::eval::{aggregate, evaluate_examples, Aggregate};
use crate::frontend::{FeatureSequence, FeatureStore};
use crate::model::{save_model_with, BeamConfig, Network, Parameterized, SluModel, Target};
use crate::scalar::Scalar;
use crate::semantics::SemanticLabel;

pub use optim::{clip_grad_norm, grad_norm, Optimizer, OptimizerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Global gradient-norm bound.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Evaluate on the test set every this many epochs (the last epoch is
    /// always evaluated).
    #[serde(default = "defaults::eval_every")]
    pub eval_every: usize,
    /// Decoding used for per-epoch test accuracy; the model's own beam
    /// settings when absent.
    #[serde(default)]
    pub eval_beam: Option<BeamConfig>,
    /// Also measure exact-match accuracy on the training set.
    #[serde(default)]
    pub train_accuracy: bool,
    /// Where the last good weights are written if training diverges.
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

mod defaults {
    pub fn lr() -> f64 {
        0.001
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn epochs() -> usize {
        20
    }
    pub fn eval_every() -> usize {
        1
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: defaults::lr(),
            batch_size: defaults::batch_size(),
            epochs: defaults::epochs(),
            seed: 0,
            optimizer: OptimizerConfig::default(),
            grad_clip: None,
            eval_every: 1,
            eval_beam: None,
            train_accuracy: false,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "learning rate, batch size and evaluation cadence must be positive".into(),
            ));
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    #[serde(default)]
    pub train_accuracy: Option<f64>,
    pub steps: u64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
}

impl RunHistory {
    /// Training-loss curve, the part of the history that must be
    /// reproducible bit for bit.
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

/// Writes one JSON object per epoch.
pub fn write_history(h: &RunHistory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for e in &h.epochs {
        let mut v = serde_json::to_value(e).expect("record serializes");
        v["seed"] = h.seed.into();
        writeln!(out, "{v}").expect("write to memory");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_history(path: impl AsRef<Path>) -> Result<RunHistory> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut seed = 0;
    let mut epochs = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::format(path.display().to_string(), i + 1, e.to_string()))?;
        seed = v["seed"].as_u64().unwrap_or(seed);
        epochs.push(serde_json::from_value(v).map_err(|e| Error::format(path.display().to_string(), i + 1, e.to_string()))?);
    }
    Ok(RunHistory { seed, epochs })
}

/// `(best accuracy, best loss)` over the evaluated epochs, each tracked
/// independently.
pub fn track_best(h: &RunHistory) -> Result<(f64, f64)> {
    let acc = h
        .epochs
        .iter()
        .filter_map(|e| e.test_accuracy)
        .fold(None, |m: Option<f64>, a| Some(m.map_or(a, |m| m.max(a))));
    let loss = h
        .epochs
        .iter()
        .filter_map(|e| e.test_loss)
        .fold(None, |m: Option<f64>, l| Some(m.map_or(l, |m| m.min(l))));
    match acc {
        Some(a) => Ok((a, loss.unwrap_or(f64::NAN))),
        None => Err(Error::Input("cannot take the best of an empty history".into())),
    }
}

/// An utterance with its features and, when the model's vocabularies cover
/// its label, the decoder target.
#[derive(Debug, Clone)]
pub struct Example<T> {
    pub id: String,
    pub features: Arc<FeatureSequence<T>>,
    pub label: SemanticLabel,
    pub target: Option<Target>,
}

/// Examples loaded from a manifest, plus the files that could not be read.
#[derive(Debug, Clone)]
pub struct ExampleSet<T> {
    pub examples: Vec<Example<T>>,
    pub unreadable: Vec<(String, String)>,
}

/// Loads features for every record. Fails if more than
/// `max_unreadable` of the files cannot be read or featurized.
pub fn load_examples<T: Scalar>(
    model: &SluModel<T>,
    m: &Manifest,
    store: &FeatureStore<T>,
    max_unreadable: f64,
) -> Result<ExampleSet<T>> {
    if store.config() != &model.features {
        return Err(Error::Config(
            "feature store and model use different feature configurations".into(),
        ));
    }
    if m.meta.label_variant != model.variant() {
        return Err(Error::Config(format!(
            "manifest {} has {} labels, the model expects {}",
            m.meta.name,
            m.meta.label_variant,
            model.variant()
        )));
    }
    let paths: Vec<PathBuf> = m.records.iter().map(|r| m.resolve_audio(r)).collect();
    let feats = store.get_all(&paths);
    let mut examples = Vec::with_capacity(m.records.len());
    let mut unreadable = Vec::new();
    for (r, f) in m.records.iter().zip(feats) {
        match f {
            Ok(features) => examples.push(Example {
                id: r.id.clone(),
                features,
                label: r.label.clone(),
                target: model.target(&r.label).ok(),
            }),
            Err(e) => unreadable.push((r.id.clone(), e.to_string())),
        }
    }
    let n = m.records.len().max(1) as f64;
    if unreadable.len() as f64 > max_unreadable * n {
        let (id, why) = &unreadable[0];
        return Err(Error::Input(format!(
            "{} of {} audio files in {} are unreadable (first: {id}: {why})",
            unreadable.len(),
            m.records.len(),
            m.meta.name
        )));
    }
    Ok(ExampleSet { examples, unreadable })
}

fn any_non_finite<T: Scalar>(net: &Network<T>) -> bool {
    net.params().iter().any(|(_, p)| p.iter().any(|v| !v.is_finite()))
}

/// Trains `model` on `train` and evaluates on `test` after each epoch.
pub fn train<T: Scalar>(
    model: &mut SluModel<T>,
    train: &Manifest,
    test: &Manifest,
    cfg: &TrainConfig,
    store: &FeatureStore<T>,
) -> Result<RunHistory> {
    if train.records.is_empty() || test.records.is_empty() {
        return Err(Error::Input("training and test manifests must be non-empty".into()));
    }
    let train_set = load_examples(model, train, store, 0.0)?;
    let test_set = load_examples(model, test, store, 0.01)?;
    train_examples(model, &train_set.examples, &test_set.examples, cfg)
}

/// [`train`] on preloaded examples.
pub fn train_examples<T: Scalar>(
    model: &mut SluModel<T>,
    train: &[Example<T>],
    test: &[Example<T>],
    cfg: &TrainConfig,
) -> Result<RunHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let targets: Vec<&Target> = train
        .iter()
        .map(|e| {
            e.target
                .as_ref()
                .ok_or_else(|| Error::Input(format!("label of {} is outside the model's vocabularies", e.id)))
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &model.net);
    let mut history = RunHistory {
        seed: cfg.seed,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let beam = cfg.eval_beam.unwrap_or_else(|| model.beam());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let last_good = model.net.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<(&FeatureSequence<T>, &Target)> =
                chunk.iter().map(|&i| (&*train[i].features, targets[i])).collect();
            let (loss, mut grad) = model.loss_and_grad(&items)?;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grad, c);
            }
            if !loss.is_finite() || any_non_finite(&grad) {
                return Err(diverged(model, last_good, epoch, cfg));
            }
            opt.step(&mut model.net, &grad);
            total += loss.to_f64_lossy() * chunk.len() as f64;
        }
        if any_non_finite(&model.net) {
            return Err(diverged(model, last_good, epoch, cfg));
        }
        let train_loss = total / train.len() as f64;
        let evaluate_now = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let (test_accuracy, test_loss) = if evaluate_now && !test.is_empty() {
            let m = evaluate_examples(model, test, beam)?;
            (Some(m.accuracy), m.loss)
        } else {
            (None, None)
        };
        let train_accuracy = if cfg.train_accuracy && evaluate_now {
            Some(evaluate_examples(model, train, beam)?.accuracy)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch: epoch + 1,
            train_loss,
            test_accuracy,
            test_loss,
            train_accuracy,
            steps: opt.steps(),
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        debug!("epoch {}: {rec:?}", epoch + 1);
        history.epochs.push(rec);
    }
    Ok(history)
}

fn diverged<T: Scalar>(model: &mut SluModel<T>, last_good: Network<T>, epoch: usize, cfg: &TrainConfig) -> Error {
    model.net = last_good;
    let saved = cfg.checkpoint_dir.as_ref().and_then(|dir| {
        let path = dir.join("last_good.ckpt");
        save_model_with(model, &path, serde_json::json!({ "diverged_at_epoch": epoch + 1 }))
            .ok()
            .map(|_| path)
    });
    Error::Divergence {
        epoch: epoch + 1,
        last_good: saved,
    }
}

/// Best metrics of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub best_accuracy: f64,
    pub best_loss: f64,
    pub steps_per_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub folds: Vec<FoldResult>,
    pub accuracy: Aggregate,
    pub loss: Aggregate,
}

/// How the training side of each fold is composed.
#[derive(Debug, Clone, Copy)]
pub enum CvArm<'a> {
    /// Real fold data only, repeated to the size the augmented arm would
    /// have when `upsample_like` is given.
    Real { upsample_like: Option<&'a Manifest> },
    /// Real fold data plus the synthetic renderings of its transcripts.
    Augmented { synthetic: &'a Manifest },
}

/// Synthetic records whose transcript belongs to `fold_train`.
pub fn synthetic_for_fold(synthetic: &Manifest, fold_train: &Manifest) -> Manifest {
    let keep: std::collections::BTreeSet<&str> = fold_train.records.iter().map(|r| r.transcript.as_str()).collect();
    synthetic.filter(|r| keep.contains(r.transcript.as_str()))
}

/// Training manifest of one fold under `arm`.
pub fn fold_training_set(fold_train: &Manifest, arm: CvArm<'_>) -> Result<Manifest> {
    match arm {
        CvArm::Real { upsample_like: None } => Ok(fold_train.clone()),
        CvArm::Real {
            upsample_like: Some(syn),
        } => {
            let target = fold_train.records.len() + synthetic_for_fold(syn, fold_train).records.len();
            upsample(fold_train, target)
        }
        CvArm::Augmented { synthetic } => concat_datasets(fold_train, &synthetic_for_fold(synthetic, fold_train)),
    }
}

/// K-fold cross-validation. `make_model` builds a fresh model from each
/// fold's training manifest.
pub fn cross_validate<T, F>(
    manifest: &Manifest,
    n_folds: usize,
    fold_seed: u64,
    cfg: &TrainConfig,
    arm: CvArm<'_>,
    store: &FeatureStore<T>,
    make_model: F,
) -> Result<CvResult>
where
    T: Scalar,
    F: Fn(&Manifest, usize) -> Result<SluModel<T>>,
{
    let folds = make_folds(manifest, n_folds, fold_seed)?;
    let mut results = Vec::with_capacity(folds.len());
    for fold in &folds {
        let train_m = fold_training_set(&fold.train, arm)?;
        let mut model = make_model(&train_m, fold.index)?;
        let history = train(&mut model, &train_m, &fold.test, cfg, store)?;
        let (best_accuracy, best_loss) = track_best(&history)?;
        info!(
            "fold {}: {} training utterances, best accuracy {best_accuracy:.4}, best loss {best_loss:.4}",
            fold.index,
            train_m.records.len()
        );
        results.push(FoldResult {
            fold: fold.index,
            train_size: train_m.records.len(),
            test_size: fold.test.records.len(),
            best_accuracy,
            best_loss,
            steps_per_epoch: train_m.records.len().div_ceil(cfg.batch_size),
        });
    }
    let acc: Vec<f64> = results.iter().map(|r| r.best_accuracy).collect();
    let loss: Vec<f64> = results.iter().map(|r| r.best_loss).collect();
    Ok(CvResult {
        accuracy: aggregate(&acc)?,
        loss: aggregate(&loss)?,
        folds: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(acc: f64, loss: f64) -> EpochRecord {
        EpochRecord {
            epoch: 0,
            train_loss: 0.0,
            test_accuracy: Some(acc),
            test_loss: Some(loss),
            train_accuracy: None,
            steps: 0,
            wall_clock_s: 0.0,
        }
    }

    #[test]
    fn best_metrics_are_tracked_independently() {
        let h = RunHistory {
            seed: 0,
            epochs: vec![rec(0.3, 2.0), rec(0.7, 1.5), rec(0.5, 1.8)],
        };
        assert_eq!(track_best(&h).unwrap(), (0.7, 1.5));
        let h = RunHistory {
            seed: 0,
            epochs: vec![rec(0.1, 3.0), rec(0.2, 2.0), rec(0.4, 1.0)],
        };
        assert_eq!(track_best(&h).unwrap(), (0.4, 1.0));
        let h = RunHistory {
            seed: 0,
            epochs: vec![rec(0.9, 3.0), rec(0.2, 0.5)],
        };
        assert_eq!(track_best(&h).unwrap(), (0.9, 0.5));
        assert!(matches!(
            track_best(&RunHistory { seed: 0, epochs: vec![] }),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn history_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let h = RunHistory {
            seed: 42,
            epochs: vec![rec(0.3, 2.0), rec(0.7, 1.5)],
        };
        let p = dir.path().join("history.jsonl");
        write_history(&h, &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 2);
        assert_eq!(read_history(&p).unwrap(), h);
    }

    #[test]
    fn config_defaults() {
        let c: TrainConfig = toml::from_str("").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!(c.optimizer, OptimizerConfig::Sgd { momentum: 0.9 });
        assert_eq!((c.lr, c.batch_size), (0.001, 32));
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
