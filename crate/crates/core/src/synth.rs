//! Multi-speaker synthetic corpus generation.
//!
//! [`TtsAdapter`] is the backend contract: text and a voice in, mono audio
//! out. [`MockTts`] is a deterministic stand-in for a neural multi-speaker
//! synthesizer; [`CommandTts`] wraps an external program.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Manifest, ManifestMeta, Provenance, UtteranceRecord};
use crate::error::{Error, Result};
use crate::frontend::{load_audio, write_wav, Waveform};
use crate::semantics::{parse_label, serialize_label, LabelVariant, SemanticLabel};

pub const MOCK_BACKEND: &str = "mock";

/// Style parameter keys understood by the mock backend.
pub mod style {
    pub const F0_HZ: &str = "f0_hz";
    pub const RATE_CPS: &str = "rate_cps";
    pub const TIMBRE_SEED: &str = "timbre_seed";
    pub const NOISE: &str = "noise";
    pub const DROP_PROB: &str = "drop_prob";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtsVoice {
    pub voice_id: String,
    pub backend: String,
    #[serde(default)]
    pub style_params: BTreeMap<String, f64>,
}

impl TtsVoice {
    pub fn param(&self, key: &str) -> Option<f64> {
        self.style_params.get(key).copied()
    }
}

pub trait TtsAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn voices(&self) -> &[TtsVoice];
    fn sample_rate(&self) -> u32;
    fn synthesize(&self, text: &str, voice: &TtsVoice) -> Result<Waveform>;

    fn voice(&self, voice_id: &str) -> Option<&TtsVoice> {
        self.voices().iter().find(|v| v.voice_id == voice_id)
    }
}

fn synthesis_error(text: &str, voice: &TtsVoice, reason: impl Into<String>) -> Error {
    Error::Synthesis {
        text: text.to_string(),
        voice_id: voice.voice_id.clone(),
        reason: reason.into(),
    }
}

/// Role of a mock voice in the default inventory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoiceStyle {
    /// Stands in for TTS speakers: vocoder noise and occasional dropped
    /// characters.
    Synthetic,
    /// Stands in for recorded speakers: clean rendering, disjoint
    /// pitch/timbre settings.
    Real,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockVoiceSpec {
    pub voice: TtsVoice,
    pub style: VoiceStyle,
}

/// Settings of the default mock inventory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InventoryConfig {
    pub n_synthetic: usize,
    pub n_real: usize,
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    pub rate_min_cps: f64,
    pub rate_max_cps: f64,
    pub synthetic_noise: f64,
    pub real_noise: f64,
    /// Probability that a synthetic-style voice drops a character.
    pub drop_prob: f64,
}

impl Default for InventoryConfig {
    fn default() -> Self {
        InventoryConfig {
            n_synthetic: 22,
            n_real: 8,
            f0_min_hz: 85.0,
            f0_max_hz: 255.0,
            rate_min_cps: 14.0,
            rate_max_cps: 20.0,
            synthetic_noise: 0.015,
            real_noise: 0.004,
            drop_prob: 0.02,
        }
    }
}

/// Builds the mock voice inventory: fundamental frequencies on a geometric
/// grid, with the real-style voices interleaved among the synthetic-style
/// ones so the two groups never share a pitch or timbre seed.
pub fn default_inventory(cfg: &InventoryConfig) -> Vec<MockVoiceSpec> {
    let total = cfg.n_synthetic + cfg.n_real;
    let real_slots: HashSet<usize> = if cfg.n_real == 0 {
        HashSet::new()
    } else if total <= 4 || cfg.n_real == 1 {
        (0..cfg.n_real).map(|j| (j * total) / cfg.n_real).collect()
    } else {
        // interior grid positions, away from the pitch extremes
        let span = (total - 4) as f64;
        (0..cfg.n_real)
            .map(|j| 2 + (j as f64 * span / (cfg.n_real - 1) as f64).round() as usize)
            .collect()
    };
    let mut out = Vec::with_capacity(total);
    let (mut n_syn, mut n_real) = (0usize, 0usize);
    for i in 0..total {
        let f0 = if total == 1 {
            cfg.f0_min_hz
        } else {
            cfg.f0_min_hz * (cfg.f0_max_hz / cfg.f0_min_hz).powf(i as f64 / (total - 1) as f64)
        };
        let is_real = real_slots.contains(&i) && n_real < cfg.n_real;
        let (voice_id, seed, style, noise, drop) = if is_real {
            n_real += 1;
            (
                format!("real{:02}", n_real - 1),
                5000 + n_real as u64 - 1,
                VoiceStyle::Real,
                cfg.real_noise,
                0.0,
            )
        } else {
            n_syn += 1;
            (
                format!("syn{:02}", n_syn - 1),
                1000 + n_syn as u64 - 1,
                VoiceStyle::Synthetic,
                cfg.synthetic_noise,
                cfg.drop_prob,
            )
        };
        let rate = ChaCha8Rng::seed_from_u64(seed).gen_range(cfg.rate_min_cps..=cfg.rate_max_cps);
        let style_params = BTreeMap::from([
            (style::F0_HZ.to_string(), f0),
            (style::RATE_CPS.to_string(), rate),
            (style::TIMBRE_SEED.to_string(), seed as f64),
            (style::NOISE.to_string(), noise),
            (style::DROP_PROB.to_string(), drop),
        ]);
        out.push(MockVoiceSpec {
            voice: TtsVoice {
                voice_id,
                backend: MOCK_BACKEND.to_string(),
                style_params,
            },
            style,
        });
    }
    out
}

/// Deterministic formant-style synthesizer.
///
/// Every character owns three partial frequencies. A voice rescales them by
/// a pitch-dependent vocal-tract factor, snaps each to the nearest harmonic
/// of its fundamental, adds a decaying harmonic series at the fundamental,
/// and weights the partials with gains drawn from its timbre seed. Characters
/// last `1 / rate` seconds; spaces, punctuation and unknown characters are
/// silent. Seeded noise emulates vocoder artifacts, and with probability
/// `drop_prob` a character segment is left silent.
#[derive(Debug, Clone)]
pub struct MockTts {
    voices: Vec<TtsVoice>,
    sample_rate: u32,
}

const MOCK_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789";

fn frac(x: f64) -> f64 {
    x - x.floor()
}

fn char_partials(c: char) -> Option<[f64; 3]> {
    let i = MOCK_ALPHABET.find(c.to_ascii_lowercase())? as f64;
    Some([
        250.0 + 650.0 * frac(0.618_034 * i + 0.11),
        950.0 + 1350.0 * frac(0.414_214 * i + 0.37),
        2350.0 + 1150.0 * frac(0.732_051 * i + 0.71),
    ])
}

struct VoiceParams {
    f0: f64,
    rate: f64,
    warp: f64,
    gains: [f64; 3],
    voicing: f64,
    noise: f64,
    drop_prob: f64,
    seed: u64,
}

impl VoiceParams {
    fn from_voice(v: &TtsVoice) -> std::result::Result<Self, String> {
        let get = |k: &str| v.param(k).ok_or_else(|| format!("mock voice lacks style parameter {k:?}"));
        let f0 = get(style::F0_HZ)?;
        let rate = get(style::RATE_CPS)?;
        let seed = get(style::TIMBRE_SEED)? as u64;
        if !(f0 > 0.0 && rate > 0.0) {
            return Err("f0_hz and rate_cps must be positive".into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7157_a1b3);
        let mut gains = [0.0; 3];
        for g in &mut gains {
            *g = (rng.gen_range(-0.45..0.45f64)).exp();
        }
        Ok(VoiceParams {
            f0,
            rate,
            warp: (f0 / 150.0).powf(0.25),
            gains,
            voicing: rng.gen_range(0.08..0.2),
            noise: v.param(style::NOISE).unwrap_or(0.0),
            drop_prob: v.param(style::DROP_PROB).unwrap_or(0.0),
            seed,
        })
    }
}

fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

impl MockTts {
    pub fn new(voices: Vec<TtsVoice>, sample_rate: u32) -> Self {
        MockTts { voices, sample_rate }
    }

    pub fn with_inventory(cfg: &InventoryConfig, sample_rate: u32) -> Self {
        Self::new(default_inventory(cfg).into_iter().map(|s| s.voice).collect(), sample_rate)
    }

    fn render(&self, text: &str, p: &VoiceParams) -> Vec<f32> {
        let sr = f64::from(self.sample_rate);
        let chars: Vec<char> = text.chars().collect();
        let seg = sr / p.rate;
        let total = (chars.len() as f64 * seg).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[text.as_bytes(), &p.seed.to_le_bytes()]));
        let mut out = vec![0.0f32; total];
        let base = [1.0, 0.55, 0.3];
        for (ci, &c) in chars.iter().enumerate() {
            let start = (ci as f64 * seg).round() as usize;
            let end = (((ci + 1) as f64) * seg).round() as usize;
            let dropped = rng.gen_bool(p.drop_prob.clamp(0.0, 1.0));
            let Some(partials) = char_partials(c) else {
                continue;
            };
            if dropped {
                continue;
            }
            let mut comps: Vec<(f64, f64)> = partials
                .iter()
                .zip(base.iter().zip(&p.gains))
                .map(|(f, (b, g))| {
                    let h = (f * p.warp / p.f0).round().max(1.0);
                    (h * p.f0, b * g)
                })
                .collect();
            for h in 1..=3 {
                comps.push((h as f64 * p.f0, p.voicing / h as f64));
            }
            let norm = 0.8 / comps.iter().map(|(_, a)| a).sum::<f64>();
            let len = (end - start).max(1) as f64;
            let ramp = (0.15 * len).max(1.0);
            for (k, sample) in out[start..end.min(total)].iter_mut().enumerate() {
                let t = (start + k) as f64 / sr;
                let pos = k as f64;
                let env = (pos / ramp).min((len - pos) / ramp).min(1.0);
                let v: f64 = comps.iter().map(|(f, a)| a * (2.0 * PI * f * t).sin()).sum();
                *sample = (v * norm * env) as f32;
            }
        }
        if p.noise > 0.0 {
            for s in &mut out {
                *s += (p.noise * rng.gen_range(-1.0..1.0f64)) as f32;
            }
        }
        for s in &mut out {
            *s = s.clamp(-1.0, 1.0);
        }
        out
    }
}

impl TtsAdapter for MockTts {
    fn name(&self) -> &str {
        MOCK_BACKEND
    }

    fn voices(&self) -> &[TtsVoice] {
        &self.voices
    }

    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn synthesize(&self, text: &str, voice: &TtsVoice) -> Result<Waveform> {
        if text.is_empty() {
            return Err(synthesis_error(text, voice, "empty text"));
        }
        let params = VoiceParams::from_voice(voice).map_err(|e| synthesis_error(text, voice, e))?;
        Waveform::new(self.render(text, &params), self.sample_rate)
    }
}

/// Runs an external synthesizer once per utterance.
///
/// Each argument may contain `{text}`, `{voice}` and `{out}` placeholders;
/// the program must write a WAV file to `{out}`.
#[derive(Debug, Clone)]
pub struct CommandTts {
    pub name: String,
    pub program: PathBuf,
    pub args: Vec<String>,
    pub voices: Vec<TtsVoice>,
    pub sample_rate: u32,
}

static COMMAND_COUNTER: AtomicU64 = AtomicU64::new(0);

impl TtsAdapter for CommandTts {
    fn name(&self) -> &str {
        &self.name
    }

    fn voices(&self) -> &[TtsVoice] {
        &self.voices
    }

    fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    fn synthesize(&self, text: &str, voice: &TtsVoice) -> Result<Waveform> {
        if text.is_empty() {
            return Err(synthesis_error(text, voice, "empty text"));
        }
        let out = std::env::temp_dir().join(format!(
            "slu-tts-{}-{}.wav",
            std::process::id(),
            COMMAND_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let out_str = out.to_string_lossy();
        let args: Vec<String> = self
            .args
            .iter()
            .map(|a| {
                a.replace("{text}", text)
                    .replace("{voice}", &voice.voice_id)
                    .replace("{out}", &out_str)
            })
            .collect();
        let result = Command::new(&self.program)
            .args(&args)
            .output()
            .map_err(|e| synthesis_error(text, voice, format!("cannot run {}: {e}", self.program.display())))?;
        if !result.status.success() {
            let _ = fs::remove_file(&out);
            return Err(synthesis_error(
                text,
                voice,
                format!(
                    "{} exited with {}: {}",
                    self.program.display(),
                    result.status,
                    String::from_utf8_lossy(&result.stderr).trim()
                ),
            ));
        }
        let wav = load_audio(&out, self.sample_rate).map_err(|e| synthesis_error(text, voice, e.to_string()));
        let _ = fs::remove_file(&out);
        wav
    }
}

/// One labeled transcript to be synthesized.
#[derive(Debug, Clone, PartialEq)]
pub struct TextRow {
    pub id: String,
    pub transcript: String,
    pub label: SemanticLabel,
}

/// Distinct transcripts of `m`, first occurrence wins.
pub fn unique_transcripts(m: &Manifest) -> Vec<TextRow> {
    let mut seen = HashSet::new();
    m.records
        .iter()
        .filter(|r| seen.insert(r.transcript.clone()))
        .map(|r| TextRow {
            id: r.id.clone(),
            transcript: r.transcript.clone(),
            label: r.label.clone(),
        })
        .collect()
}

/// Reads a text dataset: CSV with header `id,transcript,label`.
pub fn load_text_dataset(path: impl AsRef<Path>) -> Result<(LabelVariant, Vec<TextRow>)> {
    let path = path.as_ref();
    let source = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(&source, 0, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::format(&source, 0, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "transcript", "label"] {
        return Err(Error::format(&source, 0, "expected header id,transcript,label"));
    }
    let mut variant = None;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::format(&source, row, e.to_string()))?;
        let v = match variant {
            Some(v) => v,
            None => *variant.insert(
                LabelVariant::infer(&rec[2]).ok_or_else(|| Error::format(&source, row, "cannot infer label variant"))?,
            ),
        };
        let label = parse_label(&rec[2], v).map_err(|e| Error::format(&source, row, e.to_string()))?;
        rows.push(TextRow {
            id: rec[0].to_string(),
            transcript: rec[1].to_string(),
            label,
        });
    }
    let variant = variant.ok_or_else(|| Error::format(&source, 0, "text dataset is empty"))?;
    Ok((variant, rows))
}

pub fn save_text_dataset(rows: &[TextRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    w.write_record(["id", "transcript", "label"]).map_err(io)?;
    for r in rows {
        w.write_record([r.id.as_str(), &r.transcript, &serialize_label(&r.label)?])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct SynthesisPlan {
    pub name: String,
    pub label_variant: LabelVariant,
    pub source: Vec<TextRow>,
    pub voice_ids: Vec<String>,
    pub output_dir: PathBuf,
}

/// Content-addressed relative audio path of one synthesized utterance.
pub fn synthesized_audio_path(voice_id: &str, transcript: &str) -> PathBuf {
    let digest = Sha256::digest(transcript.as_bytes());
    let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    Path::new(voice_id).join(format!("{hex}.wav"))
}

/// Renders every transcript with every voice of the plan.
///
/// Existing audio files are reused, so an interrupted run can be resumed.
/// Records are ordered by (transcript index, voice index) whatever order the
/// parallel workers finish in.
pub fn synthesize_corpus(adapter: &dyn TtsAdapter, plan: &SynthesisPlan) -> Result<Manifest> {
    if plan.voice_ids.is_empty() {
        return Err(Error::Config("synthesis plan has no voices".into()));
    }
    let voices: Vec<&TtsVoice> = plan
        .voice_ids
        .iter()
        .map(|id| {
            adapter
                .voice(id)
                .ok_or_else(|| Error::Config(format!("voice {id:?} is not offered by adapter {}", adapter.name())))
        })
        .collect::<Result<_>>()?;
    let items: Vec<(usize, usize)> = (0..plan.source.len())
        .flat_map(|t| (0..voices.len()).map(move |v| (t, v)))
        .collect();
    let results: Vec<Result<UtteranceRecord>> = items
        .par_iter()
        .map(|&(t, v)| {
            let row = &plan.source[t];
            let voice = voices[v];
            let rel = synthesized_audio_path(&voice.voice_id, &row.transcript);
            let abs = plan.output_dir.join(&rel);
            if !abs.exists() {
                let wav = adapter.synthesize(&row.transcript, voice)?;
                let mut tmp = abs.clone().into_os_string();
                tmp.push(format!(".tmp{}", t * voices.len() + v));
                let tmp = PathBuf::from(tmp);
                write_wav(&tmp, &wav)?;
                fs::rename(&tmp, &abs).map_err(|e| Error::io(&abs, e))?;
            }
            Ok(UtteranceRecord {
                id: format!("{}@{}", row.id, voice.voice_id),
                audio_path: rel,
                transcript: row.transcript.clone(),
                label: row.label.clone(),
                speaker_id: voice.voice_id.clone(),
                provenance: Provenance::Synthetic,
                fold: None,
            })
        })
        .collect();
    let mut records = Vec::with_capacity(results.len());
    let mut failed = Vec::new();
    for (res, &(t, v)) in results.into_iter().zip(&items) {
        match res {
            Ok(r) => records.push(r),
            Err(e) => failed.push((format!("{}@{}", plan.source[t].id, voices[v].voice_id), e.to_string())),
        }
    }
    if !failed.is_empty() {
        return Err(Error::CorpusSynthesis {
            completed: records.len(),
            first: failed[0].1.clone(),
            failed,
        });
    }
    Manifest::new(
        ManifestMeta {
            name: plan.name.clone(),
            sample_rate: adapter.sample_rate(),
            label_variant: plan.label_variant,
        },
        records,
        plan.output_dir.clone(),
    )
}

/// Autocorrelation pitch estimate in Hz over `[f_lo, f_hi]`.
pub fn estimate_pitch(samples: &[f32], sample_rate: u32, f_lo: f64, f_hi: f64) -> Option<f64> {
    let sr = f64::from(sample_rate);
    let min_lag = (sr / f_hi).floor() as usize;
    let max_lag = (sr / f_lo).ceil() as usize;
    if samples.len() <= max_lag + 1 || min_lag < 1 {
        return None;
    }
    let n = samples.len() - max_lag - 1;
    let x: Vec<f64> = samples.iter().map(|&s| f64::from(s)).collect();
    let energy: f64 = x[..n].iter().map(|v| v * v).sum();
    if energy <= 0.0 {
        return None;
    }
    let ac: Vec<f64> = (min_lag - 1..=max_lag + 1)
        .map(|lag| x[..n].iter().zip(&x[lag..lag + n]).map(|(a, b)| a * b).sum::<f64>() / energy)
        .collect();
    let best = ac[1..ac.len() - 1].iter().cloned().fold(f64::MIN, f64::max);
    // first local peak close to the global maximum, to avoid octave errors
    let i = (1..ac.len() - 1).find(|&i| ac[i] >= 0.9 * best && ac[i] >= ac[i - 1] && ac[i] >= ac[i + 1])?;
    let (a, b, c) = (ac[i - 1], ac[i], ac[i + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 { 0.5 * (a - c) / denom } else { 0.0 };
    let lag = (min_lag - 1 + i) as f64 + shift;
    Some(sr / lag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantics::FixedSlotLabel;

    fn voice(id: &str, f0: f64, rate: f64, seed: f64) -> TtsVoice {
        TtsVoice {
            voice_id: id.into(),
            backend: MOCK_BACKEND.into(),
            style_params: BTreeMap::from([
                (style::F0_HZ.into(), f0),
                (style::RATE_CPS.into(), rate),
                (style::TIMBRE_SEED.into(), seed),
                (style::NOISE.into(), 0.01),
                (style::DROP_PROB.into(), 0.02),
            ]),
        }
    }

    #[test]
    fn duration_follows_speaking_rate() {
        let v = voice("a", 120.0, 20.0, 1.0);
        let tts = MockTts::new(vec![v.clone()], 16_000);
        let text = "turn on the lights in the kitchen please";
        assert_eq!(text.len(), 40);
        let w = tts.synthesize(&format!("{text}."), &v).unwrap();
        let expected = 41.0 / 20.0;
        assert!((w.duration() - expected).abs() <= 0.010, "{}", w.duration());
        let w40 = tts.synthesize(text, &v).unwrap();
        assert!((w40.duration() - 2.0).abs() <= 0.010);
        assert!(w40.samples.iter().all(|s| s.abs() <= 1.0));
    }

    #[test]
    fn mock_is_deterministic_and_rejects_empty_text() {
        let v = voice("a", 120.0, 18.0, 4.0);
        let tts = MockTts::new(vec![v.clone()], 16_000);
        assert_eq!(tts.synthesize("bring me juice", &v).unwrap(), tts.synthesize("bring me juice", &v).unwrap());
        assert!(matches!(tts.synthesize("", &v), Err(Error::Synthesis { .. })));
        let mut broken = v.clone();
        broken.style_params.remove(style::F0_HZ);
        assert!(matches!(tts.synthesize("x", &broken), Err(Error::Synthesis { .. })));
    }

    #[test]
    fn distinct_voices_have_distinct_pitch() {
        let a = voice("a", 110.0, 18.0, 1.0);
        let b = voice("b", 170.0, 18.0, 2.0);
        let tts = MockTts::new(vec![a.clone(), b.clone()], 16_000);
        let text = "decrease the heating in the bedroom";
        let pa = estimate_pitch(&tts.synthesize(text, &a).unwrap().samples, 16_000, 60.0, 400.0).unwrap();
        let pb = estimate_pitch(&tts.synthesize(text, &b).unwrap().samples, 16_000, 60.0, 400.0).unwrap();
        assert!((pa - 110.0).abs() < 3.0, "{pa}");
        assert!((pb - 170.0).abs() < 4.0, "{pb}");
    }

    #[test]
    fn every_pair_of_mock_voices_is_separable_by_mean_pitch() {
        let specs = default_inventory(&InventoryConfig::default());
        let voices: Vec<TtsVoice> = specs.iter().map(|s| s.voice.clone()).collect();
        let tts = MockTts::new(voices.clone(), 8000);
        let texts: Vec<String> = crate::toy::fixed_slot_grammar()
            .into_iter()
            .map(|r| r.transcript)
            .chain(["lights", "warmer", "music please", "stop"].map(String::from))
            .collect();
        assert_eq!(texts.len(), 50);
        let pitches: Vec<Vec<f64>> = voices
            .iter()
            .map(|v| {
                texts
                    .iter()
                    .map(|t| estimate_pitch(&tts.synthesize(t, v).unwrap().samples, 8000, 60.0, 400.0).unwrap())
                    .collect()
            })
            .collect();
        // nearest class mean, with means from the first ten utterances
        let means: Vec<f64> = pitches.iter().map(|p| p[..10].iter().sum::<f64>() / 10.0).collect();
        for a in 0..voices.len() {
            for b in a + 1..voices.len() {
                let correct = [(a, b), (b, a)]
                    .iter()
                    .flat_map(|&(own, other)| {
                        let (m_own, m_other) = (means[own], means[other]);
                        pitches[own]
                            .iter()
                            .map(move |&p| (p - m_own).abs() < (p - m_other).abs())
                    })
                    .filter(|&ok| ok)
                    .count();
                assert!(correct > 95, "{} vs {}: {correct}/100", voices[a].voice_id, voices[b].voice_id);
            }
        }
    }

    #[test]
    fn inventory_layout() {
        let inv = default_inventory(&InventoryConfig::default());
        assert_eq!(inv.len(), 30);
        let syn: Vec<_> = inv.iter().filter(|s| s.style == VoiceStyle::Synthetic).collect();
        let real: Vec<_> = inv.iter().filter(|s| s.style == VoiceStyle::Real).collect();
        assert_eq!((syn.len(), real.len()), (22, 8));
        let ids: HashSet<&str> = inv.iter().map(|s| s.voice.voice_id.as_str()).collect();
        assert_eq!(ids.len(), 30);
        let f0s: Vec<f64> = inv.iter().map(|s| s.voice.param(style::F0_HZ).unwrap()).collect();
        assert!(f0s.windows(2).all(|w| w[1] > w[0] * 1.03));
        assert!(real.iter().all(|s| s.voice.param(style::DROP_PROB) == Some(0.0)));
    }

    #[test]
    fn corpus_cardinality_labels_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let tts = MockTts::with_inventory(&InventoryConfig::default(), 8000);
        let rows: Vec<TextRow> = ["bring juice", "lights on", "heat up"]
            .iter()
            .enumerate()
            .map(|(i, t)| TextRow {
                id: format!("t{i}"),
                transcript: t.to_string(),
                label: FixedSlotLabel::new("a", format!("o{i}"), "none").into(),
            })
            .collect();
        let plan = SynthesisPlan {
            name: "syn".into(),
            label_variant: LabelVariant::FixedSlot,
            source: rows.clone(),
            voice_ids: vec!["syn00".into(), "syn05".into()],
            output_dir: dir.path().to_path_buf(),
        };
        let m = synthesize_corpus(&tts, &plan).unwrap();
        assert_eq!(m.len(), 6);
        for (i, r) in m.records.iter().enumerate() {
            assert_eq!(r.label, rows[i / 2].label);
            assert_eq!(r.provenance, Provenance::Synthetic);
            assert!(m.resolve_audio(r).exists());
        }
        let first = fs::read(m.resolve_audio(&m.records[0])).unwrap();
        fs::remove_file(m.resolve_audio(&m.records[0])).unwrap();
        let again = synthesize_corpus(&tts, &plan).unwrap();
        assert_eq!(again, m);
        assert_eq!(fs::read(m.resolve_audio(&m.records[0])).unwrap(), first);

        let bad = SynthesisPlan {
            voice_ids: vec!["nobody".into()],
            ..plan.clone()
        };
        assert!(matches!(synthesize_corpus(&tts, &bad), Err(Error::Config(_))));
        let empty = SynthesisPlan {
            voice_ids: vec![],
            ..plan
        };
        assert!(synthesize_corpus(&tts, &empty).is_err());
    }

    #[test]
    fn failing_external_backend_aborts_with_report() {
        let dir = tempfile::tempdir().unwrap();
        let adapter = CommandTts {
            name: "broken".into(),
            program: PathBuf::from("sh"),
            args: vec!["-c".into(), "echo nope >&2; exit 3".into()],
            voices: vec![TtsVoice {
                voice_id: "v".into(),
                backend: "broken".into(),
                style_params: BTreeMap::new(),
            }],
            sample_rate: 16_000,
        };
        let plan = SynthesisPlan {
            name: "x".into(),
            label_variant: LabelVariant::FixedSlot,
            source: vec![TextRow {
                id: "t".into(),
                transcript: "hello".into(),
                label: FixedSlotLabel::new("a", "b", "c").into(),
            }],
            voice_ids: vec!["v".into()],
            output_dir: dir.path().to_path_buf(),
        };
        match synthesize_corpus(&adapter, &plan) {
            Err(Error::CorpusSynthesis { completed, failed, first }) => {
                assert_eq!(completed, 0);
                assert_eq!(failed.len(), 1);
                assert!(first.contains("nope"), "{first}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn external_backend_round_trip() {
        // the "external" program copies a prepared wav to {out}
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src.wav");
        write_wav(&src, &Waveform::new(vec![0.25; 800], 16_000).unwrap()).unwrap();
        let adapter = CommandTts {
            name: "copy".into(),
            program: PathBuf::from("cp"),
            args: vec![src.to_string_lossy().into_owned(), "{out}".into()],
            voices: vec![TtsVoice {
                voice_id: "v".into(),
                backend: "copy".into(),
                style_params: BTreeMap::new(),
            }],
            sample_rate: 16_000,
        };
        let w = adapter.synthesize("hi", &adapter.voices()[0]).unwrap();
        assert_eq!(w.samples.len(), 800);
    }
}
