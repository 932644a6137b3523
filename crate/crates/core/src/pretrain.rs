//! Encoder pre-training with a framewise phone classifier.
//!
//! Recognition manifests are CSV files with header
//! `id,audio_path,alignment`, where `alignment` is a space-separated list of
//! `phone:start:end` segments in seconds.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{FeatureSequence, FeatureStore};
use crate::model::nn::{log_softmax_rows, Linear};
use crate::model::nn::zeros_like;
use crate::model::{Encoder, SeqBatch};
use crate::scalar::Scalar;
use crate::train::{Optimizer, OptimizerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhoneSegment {
    pub phone: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsrRecord {
    pub id: String,
    pub audio_path: PathBuf,
    pub alignment: Vec<PhoneSegment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsrManifest {
    pub records: Vec<AsrRecord>,
    pub base_dir: PathBuf,
}

impl AsrManifest {
    /// Sorted phone inventory.
    pub fn phones(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .records
            .iter()
            .flat_map(|r| r.alignment.iter().map(|s| s.phone.as_str()))
            .collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn resolve_audio(&self, r: &AsrRecord) -> PathBuf {
        self.base_dir.join(&r.audio_path)
    }
}

fn parse_alignment(s: &str) -> std::result::Result<Vec<PhoneSegment>, String> {
    let segs: Vec<PhoneSegment> = s
        .split_whitespace()
        .map(|tok| {
            let parts: Vec<&str> = tok.split(':').collect();
            let [phone, start, end] = parts[..] else {
                return Err(format!("segment {tok:?} is not phone:start:end"));
            };
            let num = |x: &str| x.parse::<f64>().map_err(|_| format!("bad time {x:?} in segment {tok:?}"));
            let (start, end) = (num(start)?, num(end)?);
            if phone.is_empty() || !(start >= 0.0 && end > start) {
                return Err(format!("segment {tok:?} needs a phone and 0 <= start < end"));
            }
            Ok(PhoneSegment {
                phone: phone.to_string(),
                start,
                end,
            })
        })
        .collect::<std::result::Result<_, _>>()?;
    if segs.is_empty() {
        return Err("missing phone alignment".into());
    }
    Ok(segs)
}

pub fn load_asr_manifest(path: impl AsRef<Path>) -> Result<AsrManifest> {
    let path = path.as_ref();
    let source = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(&source, 0, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::format(&source, 0, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "audio_path", "alignment"] {
        return Err(Error::format(&source, 0, "expected header id,audio_path,alignment"));
    }
    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::format(&source, row, e.to_string()))?;
        let alignment = parse_alignment(&rec[2]).map_err(|e| Error::format(&source, row, e))?;
        records.push(AsrRecord {
            id: rec[0].to_string(),
            audio_path: PathBuf::from(&rec[1]),
            alignment,
        });
    }
    Ok(AsrManifest {
        records,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

pub fn save_asr_manifest(m: &AsrManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    w.write_record(["id", "audio_path", "alignment"]).map_err(err)?;
    for r in &m.records {
        let align: Vec<String> = r
            .alignment
            .iter()
            .map(|s| format!("{}:{}:{}", s.phone, s.start, s.end))
            .collect();
        w.write_record([r.id.as_str(), &r.audio_path.to_string_lossy(), &align.join(" ")])
            .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of utterances held out to measure the probe.
    pub held_out: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            lr: 0.003,
            batch_size: 16,
            seed: 0,
            held_out: 0.2,
            optimizer: OptimizerConfig::adam(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub phones: Vec<String>,
    /// Held-out framewise cross-entropy before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub train_losses: Vec<f64>,
}

/// Phone class of every encoder output frame, read at the frame centre.
fn frame_targets(
    align: &[PhoneSegment],
    phones: &[String],
    n_out: usize,
    downsampling: usize,
    frame_shift: f64,
) -> Vec<usize> {
    (0..n_out)
        .map(|u| {
            let t = (u as f64 + 0.5) * downsampling as f64 * frame_shift;
            let seg = align
                .iter()
                .find(|s| s.start <= t && t < s.end)
                .unwrap_or(if t < align[0].start { &align[0] } else { &align[align.len() - 1] });
            phones.binary_search(&seg.phone).expect("phone inventory covers the alignment")
        })
        .collect()
}

struct Probe<'a, T> {
    encoder: &'a Encoder<T>,
    head: &'a Linear<T>,
}

/// `(mean loss, correct, frames)`, with gradients when requested.
#[allow(clippy::type_complexity)]
fn probe_batch<T: Scalar>(
    p: &Probe<'_, T>,
    feats: &[&FeatureSequence<T>],
    targets: &[&Vec<usize>],
    grads: Option<(&mut Encoder<T>, &mut Linear<T>)>,
) -> Result<(f64, usize, usize)> {
    let x = SeqBatch::from_items(feats.iter().map(|f| f.frames.view()));
    let (enc, trace) = p.encoder.forward_batch(&x)?;
    let logits = p.head.forward(&enc.data.view());
    let logp = log_softmax_rows(&logits.view());
    let batch = enc.batch();
    let frames: usize = enc.lengths.iter().sum();
    let norm = T::from_usize(frames).expect("frame count");
    let mut loss = 0.0;
    let mut correct = 0;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    for (b, tgt) in targets.iter().enumerate() {
        for (u, &y) in tgt.iter().enumerate().take(enc.lengths[b]) {
            let row = u * batch + b;
            loss -= logp[[row, y]].to_f64_lossy();
            let argmax = logp
                .row(row)
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |m, (i, &v)| if v > m.1 { (i, v) } else { m })
                .0;
            correct += usize::from(argmax == y);
            for (k, d) in dlogits.row_mut(row).iter_mut().enumerate() {
                *d = (logp[[row, k]].exp() - if k == y { T::one() } else { T::zero() }) / norm;
            }
        }
    }
    if let Some((ge, gh)) = grads {
        let d_enc = p.head.backward(&enc.data.view(), &dlogits.view(), gh);
        p.encoder.backward(&trace, &d_enc, ge);
    }
    Ok((loss / frames as f64, correct, frames))
}

/// Trains `encoder` together with a linear phone probe on framewise
/// targets. Returns held-out probe metrics before and after training.
pub fn pretrain_encoder<T: Scalar>(
    encoder: &mut Encoder<T>,
    manifest: &AsrManifest,
    cfg: &PretrainConfig,
    store: &FeatureStore<T>,
) -> Result<PretrainReport> {
    if manifest.records.len() < 2 {
        return Err(Error::Input("pre-training needs at least two utterances".into()));
    }
    if let Some(r) = manifest.records.iter().find(|r| r.alignment.is_empty()) {
        return Err(Error::format(&r.id, 0, "missing phone alignment"));
    }
    let phones = manifest.phones();
    let paths: Vec<PathBuf> = manifest.records.iter().map(|r| manifest.resolve_audio(r)).collect();
    let feats = store.get_all(&paths).into_iter().collect::<Result<Vec<_>>>()?;
    let ds = encoder.config.downsampling();
    let targets: Vec<Vec<usize>> = manifest
        .records
        .iter()
        .zip(&feats)
        .map(|(r, f)| {
            frame_targets(
                &r.alignment,
                &phones,
                encoder.config.output_len(f.len()),
                ds,
                f.frame_shift,
            )
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..feats.len()).collect();
    order.shuffle(&mut rng);
    let n_test = ((feats.len() as f64 * cfg.held_out).round() as usize).clamp(1, feats.len() - 1);
    let (test_idx, train_idx) = order.split_at(n_test);
    let mut train_idx = train_idx.to_vec();
    let mut head = Linear::new(&mut rng, encoder.output_dim(), phones.len());

    let held_out = |enc: &Encoder<T>, head: &Linear<T>| -> Result<(f64, f64)> {
        let p = Probe { encoder: enc, head };
        let (mut loss, mut correct, mut frames) = (0.0, 0, 0);
        for chunk in test_idx.chunks(cfg.batch_size.max(1)) {
            let f: Vec<&FeatureSequence<T>> = chunk.iter().map(|&i| &*feats[i]).collect();
            let t: Vec<&Vec<usize>> = chunk.iter().map(|&i| &targets[i]).collect();
            let (l, c, n) = probe_batch(&p, &f, &t, None)?;
            loss += l * n as f64;
            correct += c;
            frames += n;
        }
        Ok((loss / frames as f64, correct as f64 / frames as f64))
    };
    let (initial_loss, initial_accuracy) = held_out(encoder, &head)?;
    let mut opt_enc = Optimizer::new(cfg.optimizer, cfg.lr, &*encoder);
    let mut opt_head = Optimizer::new(cfg.optimizer, cfg.lr, &head);
    let mut train_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in train_idx.chunks(cfg.batch_size.max(1)) {
            let f: Vec<&FeatureSequence<T>> = chunk.iter().map(|&i| &*feats[i]).collect();
            let t: Vec<&Vec<usize>> = chunk.iter().map(|&i| &targets[i]).collect();
            let mut ge = zeros_like(&*encoder);
            let mut gh = zeros_like(&head);
            let p = Probe {
                encoder: &*encoder,
                head: &head,
            };
            let (l, _, _) = probe_batch(&p, &f, &t, Some((&mut ge, &mut gh)))?;
            if !l.is_finite() {
                return Err(Error::Divergence {
                    epoch: train_losses.len() + 1,
                    last_good: None,
                });
            }
            opt_enc.step(encoder, &ge);
            opt_head.step(&mut head, &gh);
            total += l * chunk.len() as f64;
        }
        train_losses.push(total / train_idx.len() as f64);
    }
    let (final_loss, final_accuracy) = held_out(encoder, &head)?;
    Ok(PretrainReport {
        phones,
        initial_loss,
        final_loss,
        initial_accuracy,
        final_accuracy,
        train_losses,
    })
}
