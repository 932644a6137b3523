//! Semantic labels for fixed-slot and open-slot datasets.
//!
//! Labels serialize to compact strings that the autoregressive decoder
//! predicts one character at a time:
//!
//! * fixed-slot: `action|object|location`
//! * open-slot: `intent|name=text;name=text` with slots sorted by name
//!
//! The characters `|`, `;` and `=` are reserved, as are the control
//! characters used for begin/end of sequence. Slot entities are carried as
//! metadata only; they are not part of the serialized string and do not take
//! part in equality (the slot name determines the entity).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Manifest;
use crate::error::{Error, Result};

pub const FIELD_SEP: char = '|';
pub const SLOT_SEP: char = ';';
pub const KV_SEP: char = '=';
pub const BOS: char = '\u{2}';
pub const EOS: char = '\u{3}';

const RESERVED: [char; 5] = [FIELD_SEP, SLOT_SEP, KV_SEP, BOS, EOS];

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum LabelError {
    #[error("field {field} contains reserved character {ch:?} in {value:?}")]
    ReservedCharacter {
        field: &'static str,
        ch: char,
        value: String,
    },
    #[error("field {0} must not be empty")]
    Empty(&'static str),
    #[error("slot name {0:?} appears more than once")]
    DuplicateSlot(String),
}

#[derive(Error, Debug, Clone, PartialEq, Eq)]
#[error("cannot parse label {input:?}: {reason}")]
pub struct ParseError {
    pub input: String,
    pub reason: String,
}

impl ParseError {
    fn new(input: &str, reason: impl Into<String>) -> Self {
        ParseError {
            input: input.to_string(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelVariant {
    FixedSlot,
    OpenSlot,
}

impl LabelVariant {
    /// Guesses the variant from a serialized label: fixed-slot strings carry
    /// exactly two field separators, open-slot strings exactly one.
    pub fn infer(serialized: &str) -> Option<LabelVariant> {
        match serialized.matches(FIELD_SEP).count() {
            1 => Some(LabelVariant::OpenSlot),
            2 => Some(LabelVariant::FixedSlot),
            _ => None,
        }
    }
}

impl fmt::Display for LabelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelVariant::FixedSlot => f.write_str("fixed_slot"),
            LabelVariant::OpenSlot => f.write_str("open_slot"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedSlotLabel {
    pub action: String,
    pub object: String,
    pub location: String,
}

impl FixedSlotLabel {
    pub fn new(action: impl Into<String>, object: impl Into<String>, location: impl Into<String>) -> Self {
        FixedSlotLabel {
            action: action.into(),
            object: object.into(),
            location: location.into(),
        }
    }

    pub fn fields(&self) -> [&str; 3] {
        [&self.action, &self.object, &self.location]
    }

    fn validate(&self) -> Result<(), LabelError> {
        check_field("action", &self.action)?;
        check_field("object", &self.object)?;
        check_field("location", &self.location)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub entity: String,
    pub slot_name: String,
    pub text: String,
}

impl Slot {
    pub fn new(entity: impl Into<String>, slot_name: impl Into<String>, text: impl Into<String>) -> Self {
        Slot {
            entity: entity.into(),
            slot_name: slot_name.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpenSlotLabel {
    pub intent: String,
    pub slots: Vec<Slot>,
}

impl OpenSlotLabel {
    pub fn new(intent: impl Into<String>, slots: Vec<Slot>) -> Self {
        OpenSlotLabel {
            intent: intent.into(),
            slots,
        }
    }

    /// Slots sorted by name; the order used for serialization and comparison.
    pub fn canonical_slots(&self) -> Vec<&Slot> {
        let mut slots: Vec<&Slot> = self.slots.iter().collect();
        slots.sort_by(|a, b| a.slot_name.cmp(&b.slot_name));
        slots
    }

    fn validate(&self) -> Result<(), LabelError> {
        check_field("intent", &self.intent)?;
        let mut seen = BTreeSet::new();
        for slot in &self.slots {
            check_field("slot_name", &slot.slot_name)?;
            check_reserved("slot_text", &slot.text)?;
            if !seen.insert(slot.slot_name.as_str()) {
                return Err(LabelError::DuplicateSlot(slot.slot_name.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "variant", content = "payload", rename_all = "snake_case")]
pub enum SemanticLabel {
    FixedSlot(FixedSlotLabel),
    OpenSlot(OpenSlotLabel),
}

impl SemanticLabel {
    pub fn variant(&self) -> LabelVariant {
        match self {
            SemanticLabel::FixedSlot(_) => LabelVariant::FixedSlot,
            SemanticLabel::OpenSlot(_) => LabelVariant::OpenSlot,
        }
    }

    pub fn validate(&self) -> Result<(), LabelError> {
        match self {
            SemanticLabel::FixedSlot(l) => l.validate(),
            SemanticLabel::OpenSlot(l) => l.validate(),
        }
    }

    pub fn as_fixed(&self) -> Option<&FixedSlotLabel> {
        match self {
            SemanticLabel::FixedSlot(l) => Some(l),
            SemanticLabel::OpenSlot(_) => None,
        }
    }
}

impl From<FixedSlotLabel> for SemanticLabel {
    fn from(l: FixedSlotLabel) -> Self {
        SemanticLabel::FixedSlot(l)
    }
}

impl From<OpenSlotLabel> for SemanticLabel {
    fn from(l: OpenSlotLabel) -> Self {
        SemanticLabel::OpenSlot(l)
    }
}

fn check_reserved(field: &'static str, value: &str) -> Result<(), LabelError> {
    match value.chars().find(|c| RESERVED.contains(c)) {
        Some(ch) => Err(LabelError::ReservedCharacter {
            field,
            ch,
            value: value.to_string(),
        }),
        None => Ok(()),
    }
}

fn check_field(field: &'static str, value: &str) -> Result<(), LabelError> {
    if value.is_empty() {
        return Err(LabelError::Empty(field));
    }
    check_reserved(field, value)
}

/// Renders a label as its canonical character string.
pub fn serialize_label(label: &SemanticLabel) -> Result<String, LabelError> {
    label.validate()?;
    Ok(match label {
        SemanticLabel::FixedSlot(l) => {
            format!("{}{FIELD_SEP}{}{FIELD_SEP}{}", l.action, l.object, l.location)
        }
        SemanticLabel::OpenSlot(l) => {
            let slots: Vec<String> = l
                .canonical_slots()
                .into_iter()
                .map(|s| format!("{}{KV_SEP}{}", s.slot_name, s.text))
                .collect();
            format!("{}{FIELD_SEP}{}", l.intent, slots.join(&SLOT_SEP.to_string()))
        }
    })
}

/// Inverse of [`serialize_label`]. Any string is accepted as input; the
/// entity of every parsed slot is left empty (see
/// [`LabelVocabulary::reattach_entities`]).
pub fn parse_label(s: &str, variant: LabelVariant) -> Result<SemanticLabel, ParseError> {
    if s.contains(BOS) || s.contains(EOS) {
        return Err(ParseError::new(s, "contains sequence delimiter"));
    }
    let label = match variant {
        LabelVariant::FixedSlot => {
            let parts: Vec<&str> = s.split(FIELD_SEP).collect();
            if parts.len() != 3 {
                return Err(ParseError::new(
                    s,
                    format!("expected 3 fields separated by {FIELD_SEP:?}, found {}", parts.len()),
                ));
            }
            SemanticLabel::FixedSlot(FixedSlotLabel::new(parts[0], parts[1], parts[2]))
        }
        LabelVariant::OpenSlot => {
            let (intent, rest) = s
                .split_once(FIELD_SEP)
                .ok_or_else(|| ParseError::new(s, format!("missing {FIELD_SEP:?} after intent")))?;
            let mut slots = Vec::new();
            if !rest.is_empty() {
                for item in rest.split(SLOT_SEP) {
                    let (name, text) = item
                        .split_once(KV_SEP)
                        .ok_or_else(|| ParseError::new(s, format!("slot {item:?} lacks {KV_SEP:?}")))?;
                    slots.push(Slot::new("", name, text));
                }
            }
            let label = OpenSlotLabel::new(intent, slots);
            // sorted order is part of the canonical form
            if label
                .slots
                .windows(2)
                .any(|w| w[0].slot_name >= w[1].slot_name)
            {
                return Err(ParseError::new(s, "slots not in canonical order"));
            }
            SemanticLabel::OpenSlot(label)
        }
    };
    label
        .validate()
        .map_err(|e| ParseError::new(s, e.to_string()))?;
    Ok(label)
}

/// Exact-match comparison: every field must agree. Open-slot labels are
/// compared on intent and the name-sorted `(slot_name, text)` pairs.
pub fn labels_equal(a: &SemanticLabel, b: &SemanticLabel) -> bool {
    match (a, b) {
        (SemanticLabel::FixedSlot(x), SemanticLabel::FixedSlot(y)) => x == y,
        (SemanticLabel::OpenSlot(x), SemanticLabel::OpenSlot(y)) => {
            x.intent == y.intent
                && x.slots.len() == y.slots.len()
                && x
                    .canonical_slots()
                    .iter()
                    .zip(y.canonical_slots())
                    .all(|(p, q)| p.slot_name == q.slot_name && p.text == q.text)
        }
        _ => false,
    }
}

/// Character inventory of the decoder. Index 0 is BOS, index 1 is EOS; the
/// remaining characters follow in code-point order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<char>", into = "Vec<char>")]
pub struct LabelAlphabet {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl From<Vec<char>> for LabelAlphabet {
    fn from(symbols: Vec<char>) -> Self {
        Self::from_symbols(symbols)
    }
}

impl From<LabelAlphabet> for Vec<char> {
    fn from(a: LabelAlphabet) -> Self {
        a.symbols
    }
}

impl LabelAlphabet {
    pub const BOS_INDEX: usize = 0;
    pub const EOS_INDEX: usize = 1;

    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = chars.into_iter().filter(|c| *c != BOS && *c != EOS).collect();
        let symbols: Vec<char> = [BOS, EOS].into_iter().chain(set).collect();
        Self::from_symbols(symbols)
    }

    fn from_symbols(symbols: Vec<char>) -> Self {
        let index = symbols.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        LabelAlphabet { symbols, index }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    /// Token ids for `s` followed by EOS.
    pub fn encode(&self, s: &str) -> Result<Vec<usize>> {
        s.chars()
            .map(|c| {
                self.index_of(c)
                    .ok_or_else(|| Error::Input(format!("character {c:?} is not in the label alphabet")))
            })
            .chain(std::iter::once(Ok(Self::EOS_INDEX)))
            .collect()
    }

    /// Characters for `tokens`, stopping at the first EOS and dropping BOS.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .take_while(|&&t| t != Self::EOS_INDEX)
            .filter(|&&t| t != Self::BOS_INDEX)
            .filter_map(|&t| self.symbols.get(t))
            .collect()
    }
}

/// Slot vocabularies for the three fixed slots, each sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedSlotVocab {
    pub slots: [Vec<String>; 3],
}

impl FixedSlotVocab {
    pub const SLOT_NAMES: [&'static str; 3] = ["action", "object", "location"];

    pub fn sizes(&self) -> [usize; 3] {
        [self.slots[0].len(), self.slots[1].len(), self.slots[2].len()]
    }

    pub fn encode(&self, label: &FixedSlotLabel) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for (i, value) in label.fields().into_iter().enumerate() {
            out[i] = self.slots[i]
                .binary_search_by(|v| v.as_str().cmp(value))
                .map_err(|_| {
                    Error::Input(format!(
                        "{} value {value:?} is not in the slot vocabulary",
                        Self::SLOT_NAMES[i]
                    ))
                })?;
        }
        Ok(out)
    }

    pub fn decode(&self, classes: [usize; 3]) -> FixedSlotLabel {
        FixedSlotLabel::new(
            self.slots[0][classes[0]].clone(),
            self.slots[1][classes[1]].clone(),
            self.slots[2][classes[2]].clone(),
        )
    }
}

/// Output vocabularies frozen from a training manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    pub variant: LabelVariant,
    pub fixed: Option<FixedSlotVocab>,
    pub alphabet: LabelAlphabet,
    /// Entity for each open-slot slot name.
    pub entities: BTreeMap<String, String>,
    /// Longest serialized label, in characters (EOS excluded).
    pub max_label_chars: usize,
}

impl LabelVocabulary {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a SemanticLabel>) -> Result<Self> {
        let mut variant = None;
        let mut fixed: [BTreeSet<String>; 3] = Default::default();
        let mut chars = BTreeSet::new();
        let mut entities = BTreeMap::new();
        let mut max_label_chars = 0;
        for label in labels {
            match variant {
                None => variant = Some(label.variant()),
                Some(v) if v != label.variant() => {
                    return Err(Error::Config("manifest mixes label variants".into()))
                }
                _ => {}
            }
            let text = serialize_label(label)?;
            max_label_chars = max_label_chars.max(text.chars().count());
            chars.extend(text.chars());
            match label {
                SemanticLabel::FixedSlot(l) => {
                    for (set, value) in fixed.iter_mut().zip(l.fields()) {
                        set.insert(value.to_string());
                    }
                }
                SemanticLabel::OpenSlot(l) => {
                    for slot in &l.slots {
                        entities
                            .entry(slot.slot_name.clone())
                            .or_insert_with(|| slot.entity.clone());
                    }
                }
            }
        }
        let variant = variant.ok_or_else(|| Error::Config("cannot build vocabularies from an empty manifest".into()))?;
        let fixed = (variant == LabelVariant::FixedSlot).then(|| FixedSlotVocab {
            slots: fixed.map(|s| s.into_iter().collect()),
        });
        Ok(LabelVocabulary {
            variant,
            fixed,
            alphabet: LabelAlphabet::from_chars(chars),
            entities,
            max_label_chars,
        })
    }

    /// Fills in slot entities of a parsed open-slot label from the
    /// vocabulary's slot-name mapping.
    pub fn reattach_entities(&self, label: &mut SemanticLabel) {
        if let SemanticLabel::OpenSlot(l) = label {
            for slot in &mut l.slots {
                if let Some(e) = self.entities.get(&slot.slot_name) {
                    slot.entity = e.clone();
                }
            }
        }
    }
}

/// Derives slot vocabularies and the label alphabet from a manifest.
pub fn build_vocabularies(manifest: &Manifest) -> Result<LabelVocabulary> {
    LabelVocabulary::from_labels(manifest.records.iter().map(|r| &r.label))
}
