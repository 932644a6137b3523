//! Audio loading and feature extraction.

use std::f64::consts::PI;
use std::fs;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const PCM_SCALE: f32 = 32767.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Input("sample_rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Input("waveform contains non-finite samples".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// Writes mono 16-bit PCM, clamping to [-1, 1].
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let audio_err = |e: hound::Error| Error::Audio {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(audio_err)?;
    for &s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * PCM_SCALE).round() as i16;
        writer.write_sample(q).map_err(audio_err)?;
    }
    writer.finalize().map_err(audio_err)
}

/// Reads a WAV file as mono audio at `target_rate`. Channels are averaged,
/// other sample rates are linearly resampled and the result is scaled down
/// if its peak exceeds 1.
pub fn load_audio(path: impl AsRef<Path>, target_rate: u32) -> Result<Waveform> {
    let path = path.as_ref();
    let audio_err = |reason: String| Error::Audio {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| audio_err(e.to_string()))?;
    let spec = reader.spec();
    let channels = usize::from(spec.channels.max(1));
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = if spec.bits_per_sample == 16 {
                PCM_SCALE
            } else {
                ((1u64 << (spec.bits_per_sample - 1)) - 1) as f32
            };
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| (v as f32 / scale).max(-1.0)))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| audio_err(e.to_string()))?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| audio_err(e.to_string()))?,
    };
    let mono: Vec<f32> = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f32>() / c.len() as f32)
        .collect();
    let mut samples = if spec.sample_rate == target_rate {
        mono
    } else {
        resample_linear(&mono, spec.sample_rate, target_rate)
    };
    let peak = samples.iter().fold(0.0f32, |m, s| m.max(s.abs()));
    if peak > 1.0 {
        samples.iter_mut().for_each(|s| *s /= peak);
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(audio_err("non-finite samples".into()));
    }
    Ok(Waveform {
        samples,
        sample_rate: target_rate,
    })
}

fn resample_linear(x: &[f32], from: u32, to: u32) -> Vec<f32> {
    if x.is_empty() {
        return Vec::new();
    }
    let n_out = ((x.len() as u64 * u64::from(to)) / u64::from(from)).max(1) as usize;
    let ratio = f64::from(from) / f64::from(to);
    (0..n_out)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = pos.floor() as usize;
            let frac = (pos - j as f64) as f32;
            let a = x[j.min(x.len() - 1)];
            let b = x[(j + 1).min(x.len() - 1)];
            a + (b - a) * frac
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FeatureMode {
    LogMel { n_mels: usize },
    RawFrames,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub mode: FeatureMode,
    pub sample_rate: u32,
    pub window_s: f64,
    pub hop_s: f64,
    /// Lower bound applied to mel power before the logarithm.
    pub power_floor: f64,
    /// Per-utterance mean and variance normalization of every dimension.
    #[serde(default)]
    pub cmvn: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            mode: FeatureMode::LogMel { n_mels: 40 },
            sample_rate: 16_000,
            window_s: 0.025,
            hop_s: 0.010,
            power_floor: 1e-10,
            cmvn: false,
        }
    }
}

impl FeatureConfig {
    pub fn frame_len(&self) -> usize {
        (self.window_s * f64::from(self.sample_rate)).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        ((self.hop_s * f64::from(self.sample_rate)).round() as usize).max(1)
    }

    pub fn dim(&self) -> usize {
        match self.mode {
            FeatureMode::LogMel { n_mels } => n_mels,
            FeatureMode::RawFrames => self.frame_len(),
        }
    }

    /// Number of frames for `n_samples` of audio, if at least one fits.
    pub fn num_frames(&self, n_samples: usize) -> Option<usize> {
        let frame = self.frame_len();
        (n_samples >= frame).then(|| (n_samples - frame) / self.hop_len() + 1)
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("feature config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<T> {
    /// `T × d` matrix, one row per frame.
    pub frames: Array2<T>,
    pub frame_shift: f64,
    pub fingerprint: String,
}

impl<T: Scalar> FeatureSequence<T> {
    pub fn new(frames: Array2<T>, frame_shift: f64) -> Self {
        FeatureSequence {
            frames,
            frame_shift,
            fingerprint: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, `n_mels × (n_fft/2 + 1)`.
fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let nyquist = f64::from(sample_rate) / 2.0;
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
    let centers: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * f64::from(sample_rate) / n_fft as f64;
    (0..n_mels)
        .map(|m| {
            let (l, c, r) = (centers[m], centers[m + 1], centers[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = bin_hz(k);
                    if f <= l || f >= r {
                        0.0
                    } else if f <= c {
                        (f - l) / (c - l)
                    } else {
                        (r - f) / (r - c)
                    }
                })
                .collect()
        })
        .collect()
}

/// Frames `w` and computes features; `T = floor((len - frame) / hop) + 1`.
pub fn compute_features<T: Scalar>(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureSequence<T>> {
    let frame = cfg.frame_len();
    let hop = cfg.hop_len();
    if frame == 0 {
        return Err(Error::Config("feature window is shorter than one sample".into()));
    }
    let n_frames = cfg.num_frames(w.samples.len()).ok_or_else(|| {
        Error::Input(format!(
            "waveform of {} samples is shorter than one {frame}-sample frame",
            w.samples.len()
        ))
    })?;
    let mut frames = Array2::<T>::zeros((n_frames, cfg.dim()));
    match cfg.mode {
        FeatureMode::RawFrames => {
            for (t, mut row) in frames.rows_mut().into_iter().enumerate() {
                for (dst, &src) in row.iter_mut().zip(&w.samples[t * hop..t * hop + frame]) {
                    *dst = T::from_f64_lossy(f64::from(src));
                }
            }
        }
        FeatureMode::LogMel { n_mels } => {
            let n_fft = frame.next_power_of_two();
            let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
            let bank = mel_filterbank(n_mels, n_fft, cfg.sample_rate);
            let window: Vec<f64> = (0..frame)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / frame as f64).cos())
                .collect();
            let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
            let mut power = vec![0.0; n_fft / 2 + 1];
            for (t, mut row) in frames.rows_mut().into_iter().enumerate() {
                let chunk = &w.samples[t * hop..t * hop + frame];
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = if i < frame {
                        Complex::new(f64::from(chunk[i]) * window[i], 0.0)
                    } else {
                        Complex::new(0.0, 0.0)
                    };
                }
                fft.process(&mut buf);
                for (p, b) in power.iter_mut().zip(&buf) {
                    *p = b.norm_sqr();
                }
                for (dst, filt) in row.iter_mut().zip(&bank) {
                    let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
                    *dst = T::from_f64_lossy(e.max(cfg.power_floor).ln());
                }
            }
        }
    }
    if cfg.cmvn {
        normalize_columns(&mut frames);
    }
    Ok(FeatureSequence {
        frames,
        frame_shift: hop as f64 / f64::from(cfg.sample_rate),
        fingerprint: cfg.fingerprint(),
    })
}

fn normalize_columns<T: Scalar>(x: &mut Array2<T>) {
    let n = x.nrows() as f64;
    for mut col in x.columns_mut() {
        let mean = col.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
        let var = col.iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / var.sqrt().max(1e-5);
        col.mapv_inplace(|v| T::from_f64_lossy((v.to_f64_lossy() - mean) * inv));
    }
}

/// Thread-safe cache of features keyed by audio path.
#[derive(Debug)]
pub struct FeatureStore<T> {
    config: FeatureConfig,
    cache: Mutex<HashMap<PathBuf, Arc<FeatureSequence<T>>>>,
}

impl<T: Scalar> FeatureStore<T> {
    pub fn new(config: FeatureConfig) -> Self {
        FeatureStore {
            config,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.cache.lock().expect("feature cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Features of the audio at `path`, computed on first use.
    pub fn get(&self, path: &Path) -> Result<Arc<FeatureSequence<T>>> {
        if let Some(f) = self.cache.lock().expect("feature cache lock").get(path) {
            return Ok(Arc::clone(f));
        }
        let w = load_audio(path, self.config.sample_rate)?;
        let f = Arc::new(compute_features(&w, &self.config).map_err(|e| Error::Audio {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?);
        self.cache
            .lock()
            .expect("feature cache lock")
            .insert(path.to_path_buf(), Arc::clone(&f));
        Ok(f)
    }

    /// Loads many files in parallel, keeping per-file results in order.
    pub fn get_all(&self, paths: &[PathBuf]) -> Vec<Result<Arc<FeatureSequence<T>>>> {
        paths.par_iter().map(|p| self.get(p)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f32, n: usize, sr: u32) -> Waveform {
        Waveform::new(
            (0..n)
                .map(|i| amp * (2.0 * PI * freq * i as f64 / f64::from(sr)).sin() as f32)
                .collect(),
            sr,
        )
        .unwrap()
    }

    #[test]
    fn framing_formula() {
        let cfg = FeatureConfig::default();
        assert_eq!((cfg.frame_len(), cfg.hop_len()), (400, 160));
        let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        let f = compute_features::<f64>(&w, &cfg).unwrap();
        assert_eq!(f.len(), 98);
        assert_eq!(f.dim(), 40);
        for t in 0..1000usize {
            assert_eq!(cfg.num_frames(400 + t), Some(t / 160 + 1));
        }
        let raw = FeatureConfig {
            mode: FeatureMode::RawFrames,
            ..cfg
        };
        assert_eq!(compute_features::<f32>(&w, &raw).unwrap().frames.dim(), (98, 400));
    }

    #[test]
    fn silence_gives_floor() {
        let cfg = FeatureConfig::default();
        let w = Waveform::new(vec![0.0; 4000], 16_000).unwrap();
        let f = compute_features::<f64>(&w, &cfg).unwrap();
        let floor = cfg.power_floor.ln();
        assert!(f.frames.iter().all(|&v| v == floor));
    }

    #[test]
    fn short_waveform_is_rejected() {
        let w = Waveform::new(vec![0.1; 399], 16_000).unwrap();
        assert!(matches!(
            compute_features::<f32>(&w, &FeatureConfig::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn doubling_amplitude_shifts_log_mel_by_ln4() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let base: Vec<f32> = (0..8000).map(|_| rng.gen_range(-0.25..0.25)).collect();
        let w1 = Waveform::new(base.clone(), 16_000).unwrap();
        let w2 = Waveform::new(base.iter().map(|s| 2.0 * s).collect(), 16_000).unwrap();
        let cfg = FeatureConfig::default();
        let f1 = compute_features::<f64>(&w1, &cfg).unwrap();
        let f2 = compute_features::<f64>(&w2, &cfg).unwrap();
        let shift = 4f64.ln();
        for (a, b) in f1.frames.iter().zip(f2.frames.iter()) {
            assert!((b - a - shift).abs() < 1e-6, "{a} {b}");
        }
    }

    #[test]
    fn adversarial_inputs_stay_finite() {
        let n = 3200;
        let mut impulse = vec![0.0; n];
        impulse[1234] = 1.0;
        let square: Vec<f32> = (0..n).map(|i| if (i / 40) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        for samples in [vec![0.0; n], impulse, square] {
            let w = Waveform::new(samples, 16_000).unwrap();
            for cfg in [
                FeatureConfig::default(),
                FeatureConfig {
                    mode: FeatureMode::RawFrames,
                    ..FeatureConfig::default()
                },
            ] {
                let f = compute_features::<f32>(&w, &cfg).unwrap();
                assert!(f.frames.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn wav_round_trip_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.wav");
        let w = sine(220.0, 0.9, 1600, 16_000);
        write_wav(&path, &w).unwrap();
        let back = load_audio(&path, 16_000).unwrap();
        assert_eq!(back.samples.len(), w.samples.len());
        let lsb = 1.0 / 32768.0;
        for (a, b) in w.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= lsb);
        }
        let silence = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        write_wav(&path, &silence).unwrap();
        let back = load_audio(&path, 16_000).unwrap();
        assert_eq!(back.samples, vec![0.0; 16_000]);
    }

    #[test]
    fn stereo_is_averaged_and_resampled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..800 {
            wr.write_sample(10000i16).unwrap();
            wr.write_sample(-2000i16).unwrap();
        }
        wr.finalize().unwrap();
        let mono = load_audio(&path, 8000).unwrap();
        assert_eq!(mono.samples.len(), 800);
        let expected = (10000.0 - 2000.0) / 2.0 / PCM_SCALE;
        assert!(mono.samples.iter().all(|s| (s - expected).abs() < 1e-6));
        let up = load_audio(&path, 16_000).unwrap();
        assert_eq!(up.samples.len(), 1600);
        assert!(load_audio(dir.path().join("missing.wav"), 16_000).is_err());
        fs::write(dir.path().join("bad.wav"), b"not a wav").unwrap();
        assert!(matches!(
            load_audio(dir.path().join("bad.wav"), 16_000),
            Err(Error::Audio { .. })
        ));
    }

    #[test]
    fn cmvn_gives_zero_mean_unit_variance_columns() {
        let w = sine(440.0, 0.3, 8000, 16_000);
        let noisy = Waveform::new(
            w.samples.iter().enumerate().map(|(i, s)| s * (1.0 + (i as f32 / 800.0).sin())).collect(),
            16_000,
        )
        .unwrap();
        let cfg = FeatureConfig {
            cmvn: true,
            ..FeatureConfig::default()
        };
        let f = compute_features::<f64>(&noisy, &cfg).unwrap();
        for col in f.frames.columns() {
            let n = col.len() as f64;
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6 || var < 1e-9, "{var}");
        }
        // constant columns stay finite
        let silent = compute_features::<f32>(&Waveform::new(vec![0.0; 4000], 16_000).unwrap(), &cfg).unwrap();
        assert!(silent.frames.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn store_caches_and_reports_unreadable_files() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("a.wav");
        write_wav(&good, &sine(300.0, 0.2, 3200, 16_000)).unwrap();
        let bad = dir.path().join("b.wav");
        fs::write(&bad, b"RIFF").unwrap();
        let store = FeatureStore::<f32>::new(FeatureConfig::default());
        let first = store.get(&good).unwrap();
        let again = store.get(&good).unwrap();
        assert!(Arc::ptr_eq(&first, &again));
        assert_eq!(store.len(), 1);
        let all = store.get_all(&[good.clone(), bad, dir.path().join("missing.wav")]);
        assert!(all[0].is_ok());
        assert!(matches!(all[1], Err(Error::Audio { .. })));
        assert!(all[2].is_err());
        assert_eq!(store.len(), 1);
    }
}
