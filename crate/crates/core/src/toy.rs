//! Small command grammars and corpora rendered by the mock synthesizer.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Manifest, Provenance};
use crate::error::Result;
use crate::frontend::write_wav;
use crate::pretrain::{AsrManifest, AsrRecord, PhoneSegment};
use crate::semantics::{FixedSlotLabel, LabelVariant, OpenSlotLabel, SemanticLabel, Slot};
use crate::synth::{default_inventory, synthesize_corpus, InventoryConfig, MockTts, SynthesisPlan, TextRow, TtsAdapter, VoiceStyle};

const ROOMS: [&str; 3] = ["kitchen", "bedroom", "washroom"];

/// Smart-home commands labeled with action, object and location: 46
/// transcripts over 28 distinct labels.
pub fn fixed_slot_grammar() -> Vec<TextRow> {
    let mut items: Vec<(String, [&str; 3])> = Vec::new();
    let mut add = |t: String, l: [&'static str; 3]| items.push((t, l));
    add("turn on the lights".into(), ["activate", "lights", "none"]);
    add("lights on".into(), ["activate", "lights", "none"]);
    add("switch off the lights".into(), ["deactivate", "lights", "none"]);
    add("lights off".into(), ["deactivate", "lights", "none"]);
    for room in ROOMS {
        add(format!("turn on the lights in the {room}"), ["activate", "lights", room]);
        add(format!("{room} lights on"), ["activate", "lights", room]);
        add(format!("switch off the lights in the {room}"), ["deactivate", "lights", room]);
        add(format!("{room} lights off"), ["deactivate", "lights", room]);
        add(format!("turn up the heat in the {room}"), ["increase", "heat", room]);
        add(format!("make the {room} warmer"), ["increase", "heat", room]);
        add(format!("turn down the heat in the {room}"), ["decrease", "heat", room]);
        add(format!("make the {room} cooler"), ["decrease", "heat", room]);
    }
    add("turn up the heat".into(), ["increase", "heat", "none"]);
    add("too cold".into(), ["increase", "heat", "none"]);
    add("turn down the heat".into(), ["decrease", "heat", "none"]);
    add("too hot".into(), ["decrease", "heat", "none"]);
    add("turn up the volume".into(), ["increase", "volume", "none"]);
    add("louder please".into(), ["increase", "volume", "none"]);
    add("turn down the volume".into(), ["decrease", "volume", "none"]);
    add("too loud".into(), ["decrease", "volume", "none"]);
    add("mute the sound".into(), ["deactivate", "volume", "none"]);
    add("play the music".into(), ["activate", "music", "none"]);
    add("stop the music".into(), ["deactivate", "music", "none"]);
    add("bring me my shoes".into(), ["bring", "shoes", "none"]);
    add("get my socks".into(), ["bring", "socks", "none"]);
    add("bring the newspaper".into(), ["bring", "newspaper", "none"]);
    add("fetch me some juice".into(), ["bring", "juice", "none"]);
    add("switch to german".into(), ["change", "german", "none"]);
    add("use korean".into(), ["change", "korean", "none"]);
    add("language english".into(), ["change", "english", "none"]);
    items
        .into_iter()
        .enumerate()
        .map(|(i, (t, [a, o, l]))| TextRow {
            id: format!("fs{i:03}"),
            transcript: t,
            label: FixedSlotLabel::new(a, o, l).into(),
        })
        .collect()
}

/// Lighting commands with a variable number of slots.
pub fn open_slot_grammar() -> Vec<TextRow> {
    let room = |r: &str| Slot::new("room", "room", r);
    let mut items: Vec<(String, SemanticLabel)> = Vec::new();
    let colors = ["red", "blue", "green"];
    let levels = ["ten", "fifty"];
    items.push(("lights on".into(), OpenSlotLabel::new("on", vec![]).into()));
    items.push(("lights off".into(), OpenSlotLabel::new("off", vec![]).into()));
    for r in ROOMS {
        items.push((format!("{r} lights on"), OpenSlotLabel::new("on", vec![room(r)]).into()));
        items.push((format!("{r} lights off"), OpenSlotLabel::new("off", vec![room(r)]).into()));
    }
    for c in colors {
        items.push((format!("make it {c}"), OpenSlotLabel::new("color", vec![Slot::new("color", "color", c)]).into()));
        for r in &ROOMS[..2] {
            items.push((
                format!("{r} lights {c}"),
                OpenSlotLabel::new("color", vec![room(r), Slot::new("color", "color", c)]).into(),
            ));
        }
    }
    for l in levels {
        items.push((format!("dim to {l}"), OpenSlotLabel::new("level", vec![Slot::new("number", "level", l)]).into()));
        items.push((
            format!("kitchen to {l}"),
            OpenSlotLabel::new("level", vec![room("kitchen"), Slot::new("number", "level", l)]).into(),
        ));
    }
    items
        .into_iter()
        .enumerate()
        .map(|(i, (t, label))| TextRow {
            id: format!("os{i:03}"),
            transcript: t,
            label,
        })
        .collect()
}

/// Mock renderings of a grammar: one manifest for the synthetic-style voices
/// and one (provenance `real`) for the real-style voices.
#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub synthetic: Manifest,
    pub real: Manifest,
}

/// Renders `rows` with every voice of the default inventory under `dir`.
pub fn build_toy_corpus(
    rows: &[TextRow],
    variant: LabelVariant,
    inventory: &InventoryConfig,
    sample_rate: u32,
    dir: &Path,
) -> Result<ToyCorpus> {
    let specs = default_inventory(inventory);
    let tts = MockTts::new(specs.iter().map(|s| s.voice.clone()).collect(), sample_rate);
    let ids = |style| -> Vec<String> {
        specs
            .iter()
            .filter(|s| s.style == style)
            .map(|s| s.voice.voice_id.clone())
            .collect()
    };
    let plan = |name: &str, voice_ids| SynthesisPlan {
        name: name.to_string(),
        label_variant: variant,
        source: rows.to_vec(),
        voice_ids,
        output_dir: dir.to_path_buf(),
    };
    let synthetic = synthesize_corpus(&tts, &plan("toy-synthetic", ids(VoiceStyle::Synthetic)))?;
    let mut real = synthesize_corpus(&tts, &plan("toy-real", ids(VoiceStyle::Real)))?;
    for r in &mut real.records {
        r.provenance = Provenance::Real;
    }
    Ok(ToyCorpus { synthetic, real })
}

/// Phones of the toy recognition corpus, each rendered as one character.
pub const TOY_PHONES: [&str; 5] = ["a", "i", "u", "s", "m"];

/// Random phone strings rendered by mock voices, with alignments derived
/// from each voice's speaking rate.
pub fn build_asr_corpus(n_utterances: usize, seed: u64, sample_rate: u32, dir: &Path) -> Result<AsrManifest> {
    let specs = default_inventory(&InventoryConfig::default());
    let voices: Vec<_> = specs.iter().map(|s| s.voice.clone()).collect();
    let tts = MockTts::new(voices.clone(), sample_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_utterances);
    for i in 0..n_utterances {
        let voice = voices.choose(&mut rng).expect("non-empty inventory");
        let rate = voice.param(crate::synth::style::RATE_CPS).expect("mock voices carry a rate");
        let n_phones = rng.gen_range(4..=8);
        let mut text = String::new();
        let mut alignment = Vec::new();
        for _ in 0..n_phones {
            let phone = *TOY_PHONES.choose(&mut rng).expect("phones");
            let dur = rng.gen_range(1..=3);
            let start = text.len() as f64 / rate;
            for _ in 0..dur {
                text.push_str(phone);
            }
            alignment.push(PhoneSegment {
                phone: phone.to_string(),
                start,
                end: text.len() as f64 / rate,
            });
        }
        let wav = tts.synthesize(&text, voice)?;
        let rel = Path::new("asr").join(format!("u{i:04}.wav"));
        write_wav(dir.join(&rel), &wav)?;
        records.push(AsrRecord {
            id: format!("asr{i:04}"),
            audio_path: rel,
            alignment,
        });
    }
    Ok(AsrManifest {
        records,
        base_dir: dir.to_path_buf(),
    })
}
