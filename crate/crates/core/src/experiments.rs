//! Experiment configuration, speaker-count sweeps, cross-validation reports
//! and plot data.
//!
//! Every training run of a sweep is stored under
//! `<results_dir>/<sweep>/<point>/<run>/` as `history.jsonl`, `metrics.json`
//! and `config.json`, plus `provenance.json` with wall-clock timestamps.
//! Runs are committed atomically, so an interrupted sweep resumes where it
//! stopped.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{concat_datasets, load_manifest, shuffled_speakers, upsample, Manifest};
use crate::error::{Error, Result};
use crate::eval::{aggregate, Aggregate};
use crate::frontend::FeatureConfig;
use crate::frontend::FeatureStore;
use crate::model::{load_pretrained_encoder, EncoderConfig, ModelConfig, SluModel};
use crate::pretrain::PretrainConfig;
use crate::scalar::Scalar;
use crate::semantics::LabelVocabulary;
use crate::train::{cross_validate, track_best, train, CvArm, CvResult, EpochRecord, RunHistory, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

/// Manifest paths. Relative paths are resolved against the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(default)]
    pub synthetic: Option<PathBuf>,
    #[serde(default)]
    pub real: Option<PathBuf>,
    /// Held-out evaluation set; sweeps need it.
    #[serde(default)]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    NSyntheticSpeakers,
    NRealSpeakers,
}

/// How speaker subsets relate across the points of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetMode {
    /// A fresh draw for every (point, run).
    #[default]
    Independent,
    /// One speaker order per run; point k takes its first k speakers.
    Nested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub variable: SweepVariable,
    pub points: Vec<usize>,
    /// Defaults to 5 for synthetic sweeps and 3 for real sweeps.
    #[serde(default)]
    pub runs: Option<usize>,
    /// One training seed per run; `train.seed + r` when empty.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Real sweeps only: also train the arm with every synthetic speaker
    /// added.
    #[serde(default = "yes")]
    pub augment: bool,
    /// Real sweeps only: repeat the real-only training set to the size of
    /// the augmented one.
    #[serde(default = "yes")]
    pub upsample_real: bool,
    #[serde(default)]
    pub subsets: SubsetMode,
    /// Real sweeps only: train the all-real and all-synthetic reference
    /// models.
    #[serde(default = "yes")]
    pub references: bool,
}

fn yes() -> bool {
    true
}

impl SweepConfig {
    pub fn runs(&self) -> usize {
        self.runs.unwrap_or(match self.variable {
            SweepVariable::NSyntheticSpeakers => 5,
            SweepVariable::NRealSpeakers => 3,
        })
    }

    pub fn seeds(&self, base: u64) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.runs() as u64).map(|r| base + r).collect()
        } else {
            self.seeds.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() || self.points[0] == 0 {
            return Err(Error::Config("sweep points must be non-empty and positive".into()));
        }
        if self.points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "sweep points must be strictly increasing, got {:?}",
                self.points
            )));
        }
        if self.runs() == 0 {
            return Err(Error::Config("a sweep needs at least one run per point".into()));
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.runs() {
            return Err(Error::Config(format!(
                "{} seeds given for {} runs",
                self.seeds.len(),
                self.runs()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    #[serde(default = "five")]
    pub n_folds: usize,
    #[serde(default)]
    pub fold_seed: u64,
    #[serde(default = "yes")]
    pub upsample_real: bool,
}

fn five() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_results_dir")]
    pub results_dir: PathBuf,
    #[serde(default)]
    pub dtype: Dtype,
    #[serde(default)]
    pub features: FeatureConfig,
    pub model: ModelConfig,
    /// Encoder checkpoint whose weights initialise every model.
    #[serde(default)]
    pub pretrained_encoder: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub cv: Option<CvConfig>,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    /// Concurrent training runs; every available thread when absent.
    #[serde(default)]
    pub jobs: Option<usize>,
}

fn default_results_dir() -> PathBuf {
    PathBuf::from("results")
}

fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("empty override key {key:?}")))?;
    let mut table = root;
    for part in parts {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Applies a `dotted.key=value` override. The value is read as TOML and
/// falls back to a plain string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    set_dotted(root, key.trim(), value)
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

/// Fills in the default encoder, sized to the configured features, when
/// `[model.encoder]` is absent.
fn default_encoder(table: &mut toml::Table) -> Result<()> {
    let model = table
        .entry("model")
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let has_encoder = model.as_table().map_or(true, |m| m.contains_key("encoder"));
    if has_encoder {
        return Ok(());
    }
    let features: FeatureConfig = table
        .get("features")
        .cloned()
        .unwrap_or_else(|| toml::Value::Table(toml::Table::new()))
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("features: {e}")))?;
    let encoder = toml::Value::try_from(EncoderConfig::default_for(features.dim()))
        .map_err(|e| Error::Config(e.to_string()))?;
    if let Some(toml::Value::Table(m)) = table.get_mut("model") {
        m.insert("encoder".into(), encoder);
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text with overrides applied; relative paths are taken
    /// against `base_dir`.
    pub fn from_toml(text: &str, overrides: &[String], base_dir: &Path) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        default_encoder(&mut table)?;
        let mut cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        resolve(base_dir, &mut cfg.results_dir);
        for p in [&mut cfg.data.synthetic, &mut cfg.data.real, &mut cfg.data.test, &mut cfg.pretrained_encoder]
            .into_iter()
            .flatten()
        {
            resolve(base_dir, p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid experiment name {:?}", self.name)));
        }
        if self.features.dim() != self.model.encoder.input_dim {
            return Err(Error::Config(format!(
                "feature dimension {} does not match encoder input {}",
                self.features.dim(),
                self.model.encoder.input_dim
            )));
        }
        self.model.encoder.validate()?;
        self.train.validate()?;
        if let Some(s) = &self.sweep {
            s.validate()?;
        }
        if self.cv.as_ref().is_some_and(|c| c.n_folds < 2) {
            return Err(Error::Config("cross-validation needs at least two folds".into()));
        }
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.results_dir.join(&self.name)
    }

    /// Writes the effective configuration next to the results.
    pub fn freeze(&self) -> Result<PathBuf> {
        let dir = self.experiment_dir();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("effective_config.toml");
        write_atomic(&path, self.to_toml()?.as_bytes())?;
        Ok(path)
    }

    fn manifest(&self, which: &str, p: &Option<PathBuf>) -> Result<Manifest> {
        let p = p
            .as_ref()
            .ok_or_else(|| Error::Config(format!("data.{which} is required for this experiment")))?;
        load_manifest(p)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn to_json<S: Serialize>(v: &S) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("results serialize");
    s.push(b'\n');
    s
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path.display().to_string(), 0, e.to_string()))
}

/// Vocabulary over every label the experiment can see.
pub fn experiment_vocabulary(manifests: &[&Manifest]) -> Result<LabelVocabulary> {
    LabelVocabulary::from_labels(manifests.iter().flat_map(|m| m.records.iter().map(|r| &r.label)))
}

/// A fresh model for `cfg`, with the pre-trained encoder when configured.
pub fn build_model<T: Scalar>(cfg: &ExperimentConfig, vocab: &LabelVocabulary, seed: u64) -> Result<SluModel<T>> {
    let mut model = SluModel::new(cfg.model.clone(), cfg.features.clone(), vocab.clone(), seed)?;
    if let Some(p) = &cfg.pretrained_encoder {
        load_pretrained_encoder(&mut model, p)?;
    }
    Ok(model)
}

/// Stable 64-bit mix used to derive per-run seeds.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn subset_seed(mode: SubsetMode, train_seed: u64, point: usize) -> u64 {
    match mode {
        SubsetMode::Independent => mix(train_seed, point as u64 + 1),
        SubsetMode::Nested => mix(train_seed, 0),
    }
}

/// Outcome of one training run, as stored in `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub point: usize,
    pub run: usize,
    pub train_seed: u64,
    pub subset_seed: Option<u64>,
    pub speakers: Vec<String>,
    pub train_size: usize,
    /// Test metrics after the last epoch.
    pub accuracy: f64,
    pub loss: Option<f64>,
    /// Best values over the evaluated epochs, tracked independently.
    pub best_accuracy: f64,
    pub best_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub x: usize,
    pub accuracy: Aggregate,
    pub loss: Option<Aggregate>,
    pub best_accuracy: Aggregate,
    pub best_loss: Option<Aggregate>,
    pub runs: Vec<RunRecord>,
}

impl PointResult {
    pub fn from_runs(x: usize, runs: Vec<RunRecord>) -> Result<Self> {
        let col = |f: &dyn Fn(&RunRecord) -> Option<f64>| -> Result<Option<Aggregate>> {
            let v: Vec<f64> = runs.iter().filter_map(f).collect();
            (v.len() == runs.len()).then(|| aggregate(&v)).transpose()
        };
        Ok(PointResult {
            x,
            accuracy: col(&|r| Some(r.accuracy))?.ok_or_else(|| Error::Input("no runs at this point".into()))?,
            loss: col(&|r| r.loss)?,
            best_accuracy: col(&|r| Some(r.best_accuracy))?.expect("runs are non-empty"),
            best_loss: col(&|r| r.best_loss)?,
            runs,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub name: String,
    pub variable: SweepVariable,
    pub arm: String,
    pub points: Vec<PointResult>,
}

/// Both arms of a real-speaker sweep and its reference lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealSweepResult {
    pub real: SweepResult,
    pub augmented: Option<SweepResult>,
    pub all_real: Option<PointResult>,
    pub all_synthetic: Option<PointResult>,
    /// Mean accuracy gain of augmentation over every (point, run) pair with
    /// more than [`DELTA_THRESHOLD`] real speakers.
    pub delta_beyond_threshold: Option<f64>,
}

pub const DELTA_THRESHOLD: usize = 40;

/// Mean of `augmented - real` accuracy over runs at points above
/// `threshold`; `None` if no point qualifies.
pub fn augmentation_delta(real: &SweepResult, augmented: &SweepResult, threshold: usize) -> Option<f64> {
    let diffs: Vec<f64> = real
        .points
        .iter()
        .zip(&augmented.points)
        .filter(|(p, _)| p.x > threshold)
        .flat_map(|(p, q)| p.runs.iter().zip(&q.runs).map(|(a, b)| b.accuracy - a.accuracy))
        .collect();
    (!diffs.is_empty()).then(|| diffs.iter().sum::<f64>() / diffs.len() as f64)
}

/// Training-set composition of one job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Arm {
    Synthetic,
    Real,
    RealUpsampled,
    Augmented,
}

#[derive(Debug, Clone, Serialize)]
struct Job {
    sweep: String,
    arm: Arm,
    point: usize,
    run: usize,
    train_seed: u64,
    subset_seed: Option<u64>,
}

/// Everything a job identity depends on; a stored run is reused only if
/// this matches.
#[derive(Serialize)]
struct JobIdentity<'a> {
    job: &'a Job,
    features: &'a FeatureConfig,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    pretrained_encoder: &'a Option<PathBuf>,
    data: &'a DataConfig,
    dtype: Dtype,
}

struct Context<'a, T> {
    cfg: &'a ExperimentConfig,
    vocab: LabelVocabulary,
    store: FeatureStore<T>,
    synthetic: Option<Manifest>,
    real: Option<Manifest>,
    test: Manifest,
}

impl<T: Scalar> Context<'_, T> {
    fn pool(&self, arm: Arm) -> &Manifest {
        match arm {
            Arm::Synthetic => self.synthetic.as_ref().expect("synthetic data loaded"),
            _ => self.real.as_ref().expect("real data loaded"),
        }
    }

    fn training_set(&self, job: &Job) -> Result<Manifest> {
        let pool = self.pool(job.arm);
        let subset = match job.subset_seed {
            None => pool.clone(),
            Some(seed) => {
                let order = shuffled_speakers(pool, seed);
                if job.point > order.len() {
                    return Err(Error::Range(format!(
                        "cannot select {} of {} speakers",
                        job.point,
                        order.len()
                    )));
                }
                pool.filter_speakers(&order[..job.point])
            }
        };
        match job.arm {
            Arm::Synthetic | Arm::Real => Ok(subset),
            Arm::RealUpsampled => {
                let syn = self.synthetic.as_ref().expect("synthetic data loaded");
                upsample(&subset, subset.records.len() + syn.records.len())
            }
            Arm::Augmented => concat_datasets(&subset, self.synthetic.as_ref().expect("synthetic data loaded")),
        }
    }

    fn run_dir(&self, job: &Job) -> PathBuf {
        self.cfg
            .experiment_dir()
            .join(&job.sweep)
            .join(job.point.to_string())
            .join(format!("run{}", job.run))
    }

    fn execute(&self, job: &Job) -> Result<RunRecord> {
        let dir = self.run_dir(job);
        let identity = to_json(&JobIdentity {
            job,
            features: &self.cfg.features,
            model: &self.cfg.model,
            train: &self.cfg.train,
            pretrained_encoder: &self.cfg.pretrained_encoder,
            data: &self.cfg.data,
            dtype: self.cfg.dtype,
        });
        let metrics_path = dir.join("metrics.json");
        if metrics_path.exists() {
            let stored = fs::read(dir.join("config.json")).map_err(|e| Error::io(&dir, e))?;
            if stored != identity {
                return Err(Error::Config(format!(
                    "{} holds results of a different configuration; remove it or rename the experiment",
                    dir.display()
                )));
            }
            info!("{}: reusing stored run", dir.display());
            return read_json(&metrics_path);
        }
        let started = SystemTime::now();
        let clock = Instant::now();
        let train_m = self.training_set(job)?;
        let mut model = build_model::<T>(self.cfg, &self.vocab, job.train_seed)?;
        let tcfg = TrainConfig {
            seed: job.train_seed,
            ..self.cfg.train.clone()
        };
        let history = train(&mut model, &train_m, &self.test, &tcfg, &self.store)?;
        let last = history.epochs.last().ok_or_else(|| Error::Config("training ran no epochs".into()))?;
        let (best_accuracy, best_loss) = track_best(&history)?;
        let record = RunRecord {
            point: job.point,
            run: job.run,
            train_seed: job.train_seed,
            subset_seed: job.subset_seed,
            speakers: train_m.speakers(),
            train_size: train_m.records.len(),
            accuracy: last.test_accuracy.expect("the last epoch is evaluated"),
            loss: last.test_loss,
            best_accuracy,
            best_loss: best_loss.is_finite().then_some(best_loss),
        };
        commit_run(&dir, &identity, &record, &history, started, clock.elapsed().as_secs_f64())?;
        info!(
            "{} point {} run {}: accuracy {:.4}",
            job.sweep, job.point, job.run, record.accuracy
        );
        Ok(record)
    }
}

/// History without timing, so reruns produce identical files.
fn history_jsonl(h: &RunHistory) -> Vec<u8> {
    let mut out = Vec::new();
    for e in &h.epochs {
        let e = EpochRecord {
            wall_clock_s: 0.0,
            ..e.clone()
        };
        out.extend(serde_json::to_vec(&e).expect("epoch serializes"));
        out.push(b'\n');
    }
    out
}

fn unix_seconds(t: SystemTime) -> f64 {
    t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Writes a run into a scratch directory, then renames it into place.
fn commit_run(
    dir: &Path,
    identity: &[u8],
    record: &RunRecord,
    history: &RunHistory,
    started: SystemTime,
    wall_clock_s: f64,
) -> Result<()> {
    let parent = dir.parent().expect("run directories have a parent");
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let put = |name: &str, bytes: &[u8]| fs::write(tmp.join(name), bytes).map_err(|e| Error::io(tmp.join(name), e));
    put("config.json", identity)?;
    put("history.jsonl", &history_jsonl(history))?;
    put(
        "provenance.json",
        &to_json(&serde_json::json!({
            "started_unix_s": unix_seconds(started),
            "finished_unix_s": unix_seconds(SystemTime::now()),
            "wall_clock_s": wall_clock_s,
            "epoch_wall_clock_s": history.epochs.iter().map(|e| e.wall_clock_s).collect::<Vec<_>>(),
        })),
    )?;
    put("metrics.json", &to_json(record))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

fn run_jobs<T: Scalar>(ctx: &Context<'_, T>, jobs: &[Job]) -> Result<Vec<RunRecord>> {
    let threads = ctx.cfg.jobs.unwrap_or_else(rayon::current_num_threads);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let results: Vec<Result<RunRecord>> = pool.install(|| jobs.par_iter().map(|j| ctx.execute(j)).collect());
    results.into_iter().collect()
}

fn group_points(points: &[usize], runs: usize, records: Vec<RunRecord>) -> Result<Vec<PointResult>> {
    let mut it = records.into_iter();
    points
        .iter()
        .map(|&x| PointResult::from_runs(x, it.by_ref().take(runs).collect()))
        .collect()
}

fn load_context<T: Scalar>(cfg: &ExperimentConfig, need_synthetic: bool, need_real: bool) -> Result<Context<'_, T>> {
    let synthetic = need_synthetic
        .then(|| cfg.manifest("synthetic", &cfg.data.synthetic))
        .transpose()?;
    let real = need_real.then(|| cfg.manifest("real", &cfg.data.real)).transpose()?;
    let test = cfg.manifest("test", &cfg.data.test)?;
    let all: Vec<&Manifest> = synthetic.iter().chain(real.iter()).chain(std::iter::once(&test)).collect();
    let vocab = experiment_vocabulary(&all)?;
    Ok(Context {
        cfg,
        vocab,
        store: FeatureStore::new(cfg.features.clone()),
        synthetic,
        real,
        test,
    })
}

fn sweep_config(cfg: &ExperimentConfig, variable: SweepVariable) -> Result<&SweepConfig> {
    let s = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("the configuration has no [sweep] section".into()))?;
    if s.variable != variable {
        return Err(Error::Config(format!("the configured sweep variable is {:?}", s.variable)));
    }
    Ok(s)
}

fn point_jobs(sweep: &str, arm: Arm, s: &SweepConfig, seeds: &[u64]) -> Vec<Job> {
    s.points
        .iter()
        .flat_map(|&k| {
            seeds.iter().enumerate().map(move |(r, &seed)| Job {
                sweep: sweep.to_string(),
                arm,
                point: k,
                run: r,
                train_seed: seed,
                subset_seed: Some(subset_seed(s.subsets, seed, k)),
            })
        })
        .collect()
}

fn reference_jobs(sweep: &str, arm: Arm, n_speakers: usize, seeds: &[u64]) -> Vec<Job> {
    seeds
        .iter()
        .enumerate()
        .map(|(r, &seed)| Job {
            sweep: sweep.to_string(),
            arm,
            point: n_speakers,
            run: r,
            train_seed: seed,
            subset_seed: None,
        })
        .collect()
}

fn write_summary<S: Serialize>(cfg: &ExperimentConfig, file: &str, value: &S) -> Result<()> {
    write_atomic(&cfg.experiment_dir().join(file), &to_json(value))
}

/// Accuracy as a function of the number of synthetic training speakers,
/// evaluated on the fixed test set.
pub fn sweep_synthetic_speakers<T: Scalar>(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let s = sweep_config(cfg, SweepVariable::NSyntheticSpeakers)?;
    cfg.freeze()?;
    let ctx = load_context::<T>(cfg, true, false)?;
    let seeds = s.seeds(cfg.train.seed);
    let jobs = point_jobs("synthetic", Arm::Synthetic, s, &seeds);
    let records = run_jobs(&ctx, &jobs)?;
    let result = SweepResult {
        name: cfg.name.clone(),
        variable: s.variable,
        arm: "synthetic".into(),
        points: group_points(&s.points, seeds.len(), records)?,
    };
    write_summary(cfg, "sweep.json", &result)?;
    Ok(result)
}

/// Accuracy as a function of the number of real training speakers, with
/// and without every synthetic speaker added. Both arms see the same real
/// subsets.
pub fn sweep_real_speakers<T: Scalar>(cfg: &ExperimentConfig) -> Result<RealSweepResult> {
    let s = sweep_config(cfg, SweepVariable::NRealSpeakers)?;
    cfg.freeze()?;
    let need_syn = s.augment || s.references;
    let ctx = load_context::<T>(cfg, need_syn, true)?;
    let seeds = s.seeds(cfg.train.seed);
    let real_arm = if s.augment && s.upsample_real {
        Arm::RealUpsampled
    } else {
        Arm::Real
    };
    let mut jobs = point_jobs("real", real_arm, s, &seeds);
    if s.augment {
        jobs.extend(point_jobs("augmented", Arm::Augmented, s, &seeds));
    }
    if s.references {
        let n_real = ctx.pool(Arm::Real).speakers().len();
        let n_syn = ctx.pool(Arm::Synthetic).speakers().len();
        jobs.extend(reference_jobs("all_real", Arm::Real, n_real, &seeds));
        jobs.extend(reference_jobs("all_synthetic", Arm::Synthetic, n_syn, &seeds));
    }
    let mut records = run_jobs(&ctx, &jobs)?.into_iter();
    let per_arm = s.points.len() * seeds.len();
    let arm = |name: &str, recs: Vec<RunRecord>| -> Result<SweepResult> {
        Ok(SweepResult {
            name: cfg.name.clone(),
            variable: s.variable,
            arm: name.into(),
            points: group_points(&s.points, seeds.len(), recs)?,
        })
    };
    let real = arm("real", records.by_ref().take(per_arm).collect())?;
    let augmented = s
        .augment
        .then(|| arm("augmented", records.by_ref().take(per_arm).collect()))
        .transpose()?;
    let mut reference = || -> Result<Option<PointResult>> {
        if !s.references {
            return Ok(None);
        }
        let recs: Vec<RunRecord> = records.by_ref().take(seeds.len()).collect();
        PointResult::from_runs(recs[0].point, recs).map(Some)
    };
    let all_real = reference()?;
    let all_synthetic = reference()?;
    let delta_beyond_threshold = augmented
        .as_ref()
        .and_then(|a| augmentation_delta(&real, a, DELTA_THRESHOLD));
    let result = RealSweepResult {
        real,
        augmented,
        all_real,
        all_synthetic,
        delta_beyond_threshold,
    };
    write_summary(cfg, "sweep.json", &result)?;
    Ok(result)
}

/// One row of a cross-validation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub arm: String,
    pub best_accuracy: Aggregate,
    pub best_loss: Aggregate,
    pub result: CvResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub rows: Vec<CvRow>,
}

fn fmt_aggregate(a: &Aggregate, digits: usize) -> String {
    let n = if a.n == 1 { " (n=1)" } else { "" };
    format!("{:.*} ± {:.*}{n}", digits, a.mean, digits, a.std)
}

impl CvReport {
    /// Plain-text table with best accuracy and best loss per arm.
    pub fn table(&self) -> String {
        let mut out = format!("{:<18} {:<22} {:<22}\n", "", "Best accuracy", "Best loss");
        for r in &self.rows {
            let acc = Aggregate {
                mean: 100.0 * r.best_accuracy.mean,
                std: 100.0 * r.best_accuracy.std,
                n: r.best_accuracy.n,
            };
            out.push_str(&format!(
                "{:<18} {:<22} {:<22}\n",
                r.arm,
                format!("{}%", fmt_aggregate(&acc, 1)),
                fmt_aggregate(&r.best_loss, 2)
            ));
        }
        out
    }
}

/// K-fold cross-validation on the real data, without and with the
/// synthetic renderings of each fold's training transcripts.
pub fn run_cross_validation<T: Scalar>(cfg: &ExperimentConfig) -> Result<CvReport> {
    let cv = cfg
        .cv
        .as_ref()
        .ok_or_else(|| Error::Config("the configuration has no [cv] section".into()))?;
    cfg.freeze()?;
    let real = cfg.manifest("real", &cfg.data.real)?;
    let synthetic = cfg.manifest("synthetic", &cfg.data.synthetic)?;
    let vocab = experiment_vocabulary(&[&real, &synthetic])?;
    let store = FeatureStore::<T>::new(cfg.features.clone());
    let arms = [
        (
            "Real",
            CvArm::Real {
                upsample_like: cv.upsample_real.then_some(&synthetic),
            },
        ),
        ("Real + synthetic", CvArm::Augmented { synthetic: &synthetic }),
    ];
    let rows = arms
        .into_iter()
        .map(|(name, arm)| {
            let result = cross_validate(&real, cv.n_folds, cv.fold_seed, &cfg.train, arm, &store, |_, _| {
                build_model::<T>(cfg, &vocab, cfg.train.seed)
            })?;
            Ok(CvRow {
                arm: name.into(),
                best_accuracy: result.accuracy,
                best_loss: result.loss,
                result,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = CvReport { rows };
    write_summary(cfg, "cv.json", &report)?;
    write_atomic(&cfg.experiment_dir().join("cv_table.txt"), report.table().as_bytes())?;
    Ok(report)
}

/// Writes `x y err` rows (mean accuracy and its standard deviation),
/// ordered by x.
pub fn emit_plot_data(result: &SweepResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if result.points.is_empty() {
        return Err(Error::Input("cannot plot an empty sweep".into()));
    }
    let mut points: Vec<&PointResult> = result.points.iter().collect();
    points.sort_by_key(|p| p.x);
    let mut out = String::from("x y err\n");
    for p in points {
        out.push_str(&format!("{} {} {}\n", p.x, p.accuracy.mean, p.accuracy.std));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Stored sweep summary of either kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StoredSweep {
    Real(RealSweepResult),
    Synthetic(SweepResult),
}

pub fn load_sweep(experiment_dir: impl AsRef<Path>) -> Result<StoredSweep> {
    read_json(&experiment_dir.as_ref().join("sweep.json"))
}

pub fn load_cv_report(experiment_dir: impl AsRef<Path>) -> Result<CvReport> {
    read_json(&experiment_dir.as_ref().join("cv.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(point: usize, run: usize, acc: f64) -> RunRecord {
        RunRecord {
            point,
            run,
            train_seed: run as u64,
            subset_seed: None,
            speakers: vec![],
            train_size: 1,
            accuracy: acc,
            loss: Some(1.0 - acc),
            best_accuracy: acc,
            best_loss: Some(1.0 - acc),
        }
    }

    fn sweep(points: &[(usize, &[f64])]) -> SweepResult {
        SweepResult {
            name: "t".into(),
            variable: SweepVariable::NRealSpeakers,
            arm: "x".into(),
            points: points
                .iter()
                .map(|(x, accs)| {
                    PointResult::from_runs(*x, accs.iter().enumerate().map(|(r, &a)| rec(*x, r, a)).collect()).unwrap()
                })
                .collect(),
        }
    }

    fn sweep_cfg(points: Vec<usize>) -> SweepConfig {
        SweepConfig {
            variable: SweepVariable::NSyntheticSpeakers,
            points,
            runs: None,
            seeds: vec![],
            augment: true,
            upsample_real: true,
            subsets: SubsetMode::Independent,
            references: true,
        }
    }

    #[test]
    fn sweep_points_must_increase() {
        assert!(sweep_cfg(vec![1, 2, 4]).validate().is_ok());
        assert!(sweep_cfg(vec![1, 1]).validate().is_err());
        assert!(sweep_cfg(vec![4, 2]).validate().is_err());
        assert!(sweep_cfg(vec![]).validate().is_err());
        let mut c = sweep_cfg(vec![1]);
        c.runs = Some(0);
        assert!(c.validate().is_err());
        c.runs = Some(2);
        c.seeds = vec![1, 2, 3];
        assert!(c.validate().is_err());
        assert_eq!(sweep_cfg(vec![1]).runs(), 5);
        assert_eq!(sweep_cfg(vec![1]).seeds(10), vec![10, 11, 12, 13, 14]);
    }

    #[test]
    fn overrides_parse_typed_values() {
        let mut t: toml::Table = toml::from_str("[train]\nlr = 0.1\n").unwrap();
        apply_override(&mut t, "train.lr=0.5").unwrap();
        apply_override(&mut t, "train.epochs=3").unwrap();
        apply_override(&mut t, "name=abc").unwrap();
        apply_override(&mut t, "sweep.points=[1, 2]").unwrap();
        assert_eq!(t["train"]["lr"].as_float(), Some(0.5));
        assert_eq!(t["train"]["epochs"].as_integer(), Some(3));
        assert_eq!(t["name"].as_str(), Some("abc"));
        assert_eq!(t["sweep"]["points"].as_array().unwrap().len(), 2);
        assert!(apply_override(&mut t, "novalue").is_err());
        assert!(apply_override(&mut t, "name.x=1").is_err());
    }

    #[test]
    fn missing_encoder_defaults_to_the_feature_size() {
        let text = "name = \"x\"\n[features]\nmode = { mode = \"log_mel\", n_mels = 24 }\n[model.decoder]\nkind = \"max_pool\"\n[data]\ntest = \"t.csv\"\n";
        let cfg = ExperimentConfig::from_toml(text, &[], Path::new("/d")).unwrap();
        assert_eq!(cfg.model.encoder, EncoderConfig::default_for(24));
        assert_eq!(cfg.model.encoder.output_dim(), 128);
    }

    #[test]
    fn delta_averages_over_points_and_runs_above_threshold() {
        let real = sweep(&[(20, &[0.5, 0.5]), (50, &[0.8, 0.9]), (77, &[0.9, 0.9])]);
        let aug = sweep(&[(20, &[0.9, 0.9]), (50, &[0.9, 0.9]), (77, &[0.9, 1.0])]);
        let d = augmentation_delta(&real, &aug, 40).unwrap();
        assert!((d - 0.05).abs() < 1e-12);
        assert!(augmentation_delta(&real, &aug, 100).is_none());
    }

    #[test]
    fn plot_data_has_header_and_sorted_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = sweep(&[(1, &[0.2, 0.4]), (2, &[0.6, 0.6])]);
        s.points.reverse();
        let p = dir.path().join("plot.txt");
        emit_plot_data(&s, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "x y err");
        assert!(lines[1].starts_with("1 "));
        let err: f64 = lines[1].split(' ').nth(2).unwrap().parse().unwrap();
        assert_eq!(err, aggregate(&[0.2, 0.4]).unwrap().std);
        emit_plot_data(&s, &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), text);
        let empty = SweepResult { points: vec![], ..s };
        assert!(emit_plot_data(&empty, &p).is_err());
    }

    #[test]
    fn single_fold_table_flags_n() {
        let a = aggregate(&[0.7]).unwrap();
        assert_eq!(fmt_aggregate(&a, 2), "0.70 ± 0.00 (n=1)");
    }

    #[test]
    fn nested_subsets_share_order_across_points() {
        assert_eq!(subset_seed(SubsetMode::Nested, 3, 1), subset_seed(SubsetMode::Nested, 3, 8));
        assert_ne!(
            subset_seed(SubsetMode::Independent, 3, 1),
            subset_seed(SubsetMode::Independent, 3, 8)
        );
    }
}
