//! Utterance manifests and the dataset operations used by the experiments.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semantics::{parse_label, serialize_label, LabelVariant, SemanticLabel};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const CSV_COLUMNS: [&str; 7] = ["id", "audio_path", "transcript", "label", "speaker_id", "provenance", "fold"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Real => "real",
            Provenance::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "real" => Ok(Provenance::Real),
            "synthetic" => Ok(Provenance::Synthetic),
            other => Err(format!("unknown provenance {other:?} (expected real or synthetic)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub id: String,
    /// Relative to the manifest's base directory unless absolute.
    pub audio_path: PathBuf,
    pub transcript: String,
    pub label: SemanticLabel,
    pub speaker_id: String,
    pub provenance: Provenance,
    pub fold: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub name: String,
    pub sample_rate: u32,
    pub label_variant: LabelVariant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub meta: ManifestMeta,
    pub records: Vec<UtteranceRecord>,
    /// Directory that relative audio paths are resolved against.
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeakerInventory {
    pub speakers: Vec<(String, Provenance)>,
}

impl SpeakerInventory {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.speakers.iter().map(|(s, _)| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }
}

impl Manifest {
    /// Validates the manifest invariants.
    pub fn new(meta: ManifestMeta, records: Vec<UtteranceRecord>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        if meta.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        let mut ids = HashSet::with_capacity(records.len());
        for (row, r) in records.iter().enumerate() {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::format(&meta.name, row + 1, format!("duplicate id {:?}", r.id)));
            }
            if r.label.variant() != meta.label_variant {
                return Err(Error::format(
                    &meta.name,
                    row + 1,
                    format!("label variant {} differs from manifest variant {}", r.label.variant(), meta.label_variant),
                ));
            }
        }
        Ok(Manifest {
            meta,
            records,
            base_dir: base_dir.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve_audio(&self, record: &UtteranceRecord) -> PathBuf {
        self.base_dir.join(&record.audio_path)
    }

    /// Distinct speakers in sorted order.
    pub fn speaker_inventory(&self) -> SpeakerInventory {
        let set: BTreeSet<(String, Provenance)> = self
            .records
            .iter()
            .map(|r| (r.speaker_id.clone(), r.provenance))
            .collect();
        SpeakerInventory {
            speakers: set.into_iter().collect(),
        }
    }

    pub fn speakers(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.speaker_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Keeps the records matching `keep`, preserving order.
    pub fn filter(&self, mut keep: impl FnMut(&UtteranceRecord) -> bool) -> Manifest {
        Manifest {
            meta: self.meta.clone(),
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    pub fn filter_provenance(&self, provenance: Provenance) -> Manifest {
        self.filter(|r| r.provenance == provenance)
    }

    pub fn filter_speakers<S: AsRef<str>>(&self, speakers: &[S]) -> Manifest {
        let set: HashSet<&str> = speakers.iter().map(AsRef::as_ref).collect();
        self.filter(|r| set.contains(r.speaker_id.as_str()))
    }

    /// Rewrites relative audio paths against `base_dir` so the records stay
    /// valid under a different base.
    fn rebased(&self, base_dir: &Path) -> Vec<UtteranceRecord> {
        if self.base_dir == base_dir {
            return self.records.clone();
        }
        self.records
            .iter()
            .map(|r| UtteranceRecord {
                audio_path: absolute(&self.base_dir.join(&r.audio_path)),
                ..r.clone()
            })
            .collect()
    }
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonRecord {
    id: String,
    audio_path: String,
    transcript: String,
    label: String,
    speaker_id: String,
    provenance: String,
    #[serde(default)]
    fold: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonHeader {
    manifest: ManifestMetaPartial,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ManifestMetaPartial {
    name: Option<String>,
    sample_rate: Option<u32>,
    label_variant: Option<LabelVariant>,
}

fn is_jsonl(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("jsonl") | Some("json"))
}

/// Reads a CSV (or JSON-lines, by `.jsonl` extension) manifest.
///
/// CSV files may start with `# key=value` lines carrying `name`,
/// `sample_rate` and `label_variant`; otherwise the name defaults to the
/// file stem, the sample rate to 16 kHz and the variant is inferred from the
/// first label.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    let (partial, rows) = if is_jsonl(path) {
        parse_jsonl(&source, &text)?
    } else {
        parse_csv(&source, &text)?
    };
    let variant = match partial.label_variant {
        Some(v) => v,
        None => rows
            .first()
            .and_then(|(_, r)| LabelVariant::infer(&r.label))
            .ok_or_else(|| Error::format(&source, 1, "cannot infer label variant"))?,
    };
    let meta = ManifestMeta {
        name: partial.name.unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        }),
        sample_rate: partial.sample_rate.unwrap_or(DEFAULT_SAMPLE_RATE),
        label_variant: variant,
    };
    let mut records = Vec::with_capacity(rows.len());
    for (row, raw) in rows {
        let label = parse_label(&raw.label, variant).map_err(|e| Error::format(&source, row, e.to_string()))?;
        let provenance = raw
            .provenance
            .parse()
            .map_err(|e: String| Error::format(&source, row, e))?;
        if raw.id.is_empty() {
            return Err(Error::format(&source, row, "empty id"));
        }
        records.push(UtteranceRecord {
            id: raw.id,
            audio_path: PathBuf::from(raw.audio_path),
            transcript: raw.transcript,
            label,
            speaker_id: raw.speaker_id,
            provenance,
            fold: raw.fold,
        });
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Manifest::new(meta, records, base).map_err(|e| match e {
        Error::Format { row, reason, .. } => Error::format(&source, row, reason),
        other => other,
    })
}

fn parse_csv(source: &str, text: &str) -> Result<(ManifestMetaPartial, Vec<(usize, JsonRecord)>)> {
    let mut meta = ManifestMetaPartial::default();
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        let Some((key, value)) = line.trim_start_matches('#').split_once('=') else {
            continue;
        };
        let value = value.trim();
        match key.trim() {
            "name" => meta.name = Some(value.to_string()),
            "sample_rate" => {
                meta.sample_rate = Some(
                    value
                        .parse()
                        .map_err(|_| Error::format(source, 0, format!("bad sample_rate {value:?}")))?,
                )
            }
            "label_variant" => {
                meta.label_variant = Some(
                    serde_json::from_value(serde_json::Value::String(value.to_string()))
                        .map_err(|_| Error::format(source, 0, format!("bad label_variant {value:?}")))?,
                )
            }
            other => return Err(Error::format(source, 0, format!("unknown metadata key {other:?}"))),
        }
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::format(source, 0, e.to_string()))?
        .clone();
    let mut positions = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        if !CSV_COLUMNS.contains(&h) {
            return Err(Error::format(source, 0, format!("unknown column {h:?}")));
        }
        if positions.insert(h.to_string(), i).is_some() {
            return Err(Error::format(source, 0, format!("duplicated column {h:?}")));
        }
    }
    for col in &CSV_COLUMNS[..6] {
        if !positions.contains_key(*col) {
            return Err(Error::format(source, 0, format!("missing column {col:?}")));
        }
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::format(source, row, e.to_string()))?;
        let get = |c: &str| positions.get(c).and_then(|&p| rec.get(p)).unwrap_or("").to_string();
        let fold = match get("fold").trim() {
            "" => None,
            f => Some(
                f.parse()
                    .map_err(|_| Error::format(source, row, format!("bad fold {f:?}")))?,
            ),
        };
        rows.push((
            row,
            JsonRecord {
                id: get("id"),
                audio_path: get("audio_path"),
                transcript: get("transcript"),
                label: get("label"),
                speaker_id: get("speaker_id"),
                provenance: get("provenance"),
                fold,
            },
        ));
    }
    Ok((meta, rows))
}

fn parse_jsonl(source: &str, text: &str) -> Result<(ManifestMetaPartial, Vec<(usize, JsonRecord)>)> {
    let mut meta = ManifestMetaPartial::default();
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if i == 0 {
            if let Ok(h) = serde_json::from_str::<JsonHeader>(line) {
                meta = h.manifest;
                continue;
            }
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::format(source, rows.len() + 1, e.to_string()))?;
        if let Some(obj) = value.as_object() {
            if let Some(k) = obj.keys().find(|k| !CSV_COLUMNS.contains(&k.as_str())) {
                return Err(Error::format(source, rows.len() + 1, format!("unknown field {k:?}")));
            }
        }
        let rec: JsonRecord =
            serde_json::from_value(value).map_err(|e| Error::format(source, rows.len() + 1, e.to_string()))?;
        rows.push((rows.len() + 1, rec));
    }
    Ok((meta, rows))
}

/// Audio path of `rel` (stored against `base`) as seen from `dest`:
/// relative when the file lies under `dest`, absolute otherwise.
fn path_from(base: &Path, rel: &Path, dest: &Path) -> PathBuf {
    if base == dest {
        return rel.to_path_buf();
    }
    let full = base.join(rel);
    match full.strip_prefix(dest) {
        Ok(p) if !dest.as_os_str().is_empty() => p.to_path_buf(),
        _ => absolute(&full),
    }
}

/// Writes `m` in CSV (or JSON-lines, by extension) form. Relative audio
/// paths are rewritten so they resolve from the manifest's new location.
pub fn save_manifest(m: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dest = path.parent().unwrap_or(Path::new(""));
    let mut out: Vec<u8> = Vec::new();
    let rows = m
        .records
        .iter()
        .map(|r| {
            Ok(JsonRecord {
                id: r.id.clone(),
                audio_path: path_from(&m.base_dir, &r.audio_path, dest).to_string_lossy().into_owned(),
                transcript: r.transcript.clone(),
                label: serialize_label(&r.label)?,
                speaker_id: r.speaker_id.clone(),
                provenance: r.provenance.to_string(),
                fold: r.fold,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if is_jsonl(path) {
        let header = JsonHeader {
            manifest: ManifestMetaPartial {
                name: Some(m.meta.name.clone()),
                sample_rate: Some(m.meta.sample_rate),
                label_variant: Some(m.meta.label_variant),
            },
        };
        writeln!(out, "{}", serde_json::to_string(&header).expect("serializable")).expect("in-memory write");
        for r in &rows {
            writeln!(out, "{}", serde_json::to_string(r).expect("serializable")).expect("in-memory write");
        }
    } else {
        writeln!(out, "# name={}", m.meta.name).expect("in-memory write");
        writeln!(out, "# sample_rate={}", m.meta.sample_rate).expect("in-memory write");
        writeln!(out, "# label_variant={}", m.meta.label_variant).expect("in-memory write");
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(CSV_COLUMNS).expect("in-memory write");
        for r in &rows {
            let fold = r.fold.map(|f| f.to_string()).unwrap_or_default();
            w.write_record([
                r.id.as_str(),
                &r.audio_path,
                &r.transcript,
                &r.label,
                &r.speaker_id,
                &r.provenance,
                &fold,
            ])
            .expect("in-memory write");
        }
        w.flush().expect("in-memory write");
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Speakers of `m` in a seeded random order. Taking the first `k` gives a
/// uniformly random `k`-subset; prefixes for one seed are nested.
pub fn shuffled_speakers(m: &Manifest, seed: u64) -> Vec<String> {
    let mut speakers = m.speakers();
    speakers.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    speakers
}

/// Records of a seeded, uniformly random `k`-subset of the speakers of `m`.
pub fn select_speakers(m: &Manifest, k: usize, seed: u64) -> Result<Manifest> {
    let n = m.speakers().len();
    if k == 0 || k > n {
        return Err(Error::Range(format!("cannot select {k} of {n} speakers")));
    }
    let chosen = shuffled_speakers(m, seed);
    Ok(m.filter_speakers(&chosen[..k]))
}

/// Concatenates real and synthetic manifests. When ids collide, every id is
/// prefixed with its record's provenance.
pub fn concat_datasets(real: &Manifest, synthetic: &Manifest) -> Result<Manifest> {
    if real.meta.label_variant != synthetic.meta.label_variant {
        return Err(Error::Config(format!(
            "label variants differ: {} vs {}",
            real.meta.label_variant, synthetic.meta.label_variant
        )));
    }
    if real.meta.sample_rate != synthetic.meta.sample_rate {
        return Err(Error::Config(format!(
            "sample rates differ: {} vs {}",
            real.meta.sample_rate, synthetic.meta.sample_rate
        )));
    }
    let mut records = real.records.clone();
    records.extend(synthetic.rebased(&real.base_dir));
    let ids: HashSet<&str> = real.records.iter().map(|r| r.id.as_str()).collect();
    if synthetic.records.iter().any(|r| ids.contains(r.id.as_str())) {
        for r in &mut records {
            r.id = format!("{}:{}", r.provenance, r.id);
        }
    }
    Manifest::new(real.meta.clone(), records, real.base_dir.clone())
}

/// Repeats records cyclically until `target` records exist. Copies after the
/// first receive a `~upN` id suffix.
pub fn upsample(m: &Manifest, target: usize) -> Result<Manifest> {
    let n = m.len();
    if target < n {
        return Err(Error::Range(format!("upsample target {target} is below the manifest size {n}")));
    }
    if n == 0 && target > 0 {
        return Err(Error::Range("cannot upsample an empty manifest".into()));
    }
    let records = (0..target)
        .map(|i| {
            let src = &m.records[i % n];
            let rep = i / n;
            let mut r = src.clone();
            if rep > 0 {
                r.id = format!("{}~up{rep}", src.id);
            }
            r
        })
        .collect();
    Manifest::new(m.meta.clone(), records, m.base_dir.clone())
}

/// One cross-validation split.
#[derive(Debug, Clone)]
pub struct Fold {
    pub index: usize,
    pub train: Manifest,
    pub test: Manifest,
}

/// Splits `m` into `n_folds` folds at the transcript level: distinct
/// transcripts are shuffled with `seed` and dealt into contiguous chunks whose
/// sizes differ by at most one. Test records get their fold index set.
pub fn make_folds(m: &Manifest, n_folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if n_folds < 2 {
        return Err(Error::Range(format!("need at least 2 folds, got {n_folds}")));
    }
    if n_folds > m.len() {
        return Err(Error::Range(format!("{n_folds} folds requested for {} records", m.len())));
    }
    let mut transcripts: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for r in &m.records {
        if seen.insert(r.transcript.as_str()) {
            transcripts.push(&r.transcript);
        }
    }
    if n_folds > transcripts.len() {
        return Err(Error::Range(format!(
            "{n_folds} folds requested for {} distinct transcripts",
            transcripts.len()
        )));
    }
    transcripts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_t = transcripts.len();
    let fold_of: HashMap<&str, usize> = transcripts
        .iter()
        .enumerate()
        .map(|(j, t)| (*t, j * n_folds / n_t))
        .collect();
    Ok((0..n_folds)
        .map(|f| {
            let test_fold = u32::try_from(f).expect("fold count fits in u32");
            let mut test = m.filter(|r| fold_of[r.transcript.as_str()] == f);
            for r in &mut test.records {
                r.fold = Some(test_fold);
            }
            Fold {
                index: f,
                train: m.filter(|r| fold_of[r.transcript.as_str()] != f),
                test,
            }
        })
        .collect())
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use crate::semantics::FixedSlotLabel;

    pub fn record(id: &str, transcript: &str, speaker: &str, provenance: Provenance) -> UtteranceRecord {
        UtteranceRecord {
            id: id.to_string(),
            audio_path: PathBuf::from(format!("{id}.wav")),
            transcript: transcript.to_string(),
            label: FixedSlotLabel::new("activate", transcript.replace(' ', "_"), "none").into(),
            speaker_id: speaker.to_string(),
            provenance,
            fold: None,
        }
    }

    pub fn manifest(records: Vec<UtteranceRecord>) -> Manifest {
        Manifest::new(
            ManifestMeta {
                name: "test".into(),
                sample_rate: DEFAULT_SAMPLE_RATE,
                label_variant: LabelVariant::FixedSlot,
            },
            records,
            "",
        )
        .unwrap()
    }

    /// `n_speakers × n_transcripts` real records.
    pub fn grid(n_speakers: usize, n_transcripts: usize) -> Manifest {
        let mut records = Vec::new();
        for s in 0..n_speakers {
            for t in 0..n_transcripts {
                records.push(record(&format!("s{s}-t{t}"), &format!("sentence {t}"), &format!("spk{s:02}"), Provenance::Real));
            }
        }
        manifest(records)
    }
}
