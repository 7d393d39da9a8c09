//! Annotated corpora, slot registries and leave-one-domain-out splits.
//!
//! Corpus files hold one `token tag` pair per line with a blank line between
//! utterances. Slot descriptions live in a sibling registry file whose lines
//! read `domain<TAB>slot<TAB>description tokens`.

pub mod bio;
mod split;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bio::SlotSpan;
pub use split::{few_shot_augment, leave_one_out_split, unseen_seen_partition, SplitSpec, DEFAULT_VALIDATION_SIZE};

use crate::error::{Error, Result};

/// A tokenized utterance with one BIO slot tag per token.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledUtterance {
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
    pub domain: String,
}

impl LabeledUtterance {
    /// Validates lengths, tag syntax and BIO well-formedness.
    pub fn new(tokens: Vec<String>, labels: Vec<String>, domain: impl Into<String>) -> Result<Self> {
        if tokens.is_empty() || tokens.len() != labels.len() {
            return Err(Error::Invalid(format!(
                "utterance needs equal, nonzero token and label counts (got {} and {})",
                tokens.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| bio::Tag::parse(l).is_none()) {
            return Err(Error::Invalid(format!("malformed tag {bad:?}")));
        }
        if !bio::is_well_formed(&labels) {
            return Err(Error::Invalid(format!("ill-formed BIO sequence {labels:?}")));
        }
        Ok(Self {
            tokens,
            labels,
            domain: domain.into(),
        })
    }

    /// Convenience constructor from whitespace-separated strings.
    pub fn from_str_pairs(tokens: &str, labels: &str, domain: &str) -> Result<Self> {
        Self::new(
            tokens.split_whitespace().map(str::to_owned).collect(),
            labels.split_whitespace().map(str::to_owned).collect(),
            domain,
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn spans(&self) -> Vec<SlotSpan> {
        bio::spans(&self.labels)
    }

    pub fn slot_names(&self) -> BTreeSet<String> {
        self.spans().into_iter().map(|s| s.slot).collect()
    }
}

/// A slot label and the tokens that describe it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotType {
    pub name: String,
    pub description_tokens: Vec<String>,
}

impl SlotType {
    pub fn new(name: impl Into<String>, description: &str) -> Self {
        Self {
            name: name.into(),
            description_tokens: description.split_whitespace().map(str::to_owned).collect(),
        }
    }
}

/// All known slot types, plus the slot subset belonging to each domain.
///
/// Slot order is insertion order and fixes the row order of description
/// matrices built from the registry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotRegistry {
    slots: Vec<SlotType>,
    domains: BTreeMap<String, Vec<usize>>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl SlotRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `slot` under `domain`. A slot shared by several domains must
    /// carry the same description everywhere.
    pub fn insert(&mut self, domain: &str, slot: SlotType) -> Result<usize> {
        if slot.description_tokens.is_empty() {
            return Err(Error::Registry(format!("slot {:?} has an empty description", slot.name)));
        }
        let idx = match self.index.get(&slot.name) {
            Some(&i) => {
                if self.slots[i].description_tokens != slot.description_tokens {
                    return Err(Error::Registry(format!(
                        "slot {:?} has conflicting descriptions",
                        slot.name
                    )));
                }
                i
            }
            None => {
                self.index.insert(slot.name.clone(), self.slots.len());
                self.slots.push(slot);
                self.slots.len() - 1
            }
        };
        let members = self.domains.entry(domain.to_owned()).or_default();
        if !members.contains(&idx) {
            members.push(idx);
        }
        Ok(idx)
    }

    pub fn slots(&self) -> &[SlotType] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.domains.keys().map(String::as_str)
    }

    /// Registry indices of the slots that belong to `domain`.
    pub fn domain_slots(&self, domain: &str) -> Option<&[usize]> {
        self.domains.get(domain).map(Vec::as_slice)
    }

    /// Rebuilds the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .slots
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
    }

    /// Fails if any slot used in `utterances` is unknown to the registry or
    /// to the utterance's domain.
    pub fn check_covers(&self, utterances: &[LabeledUtterance]) -> Result<()> {
        for u in utterances {
            let members = self
                .domain_slots(&u.domain)
                .ok_or_else(|| Error::Registry(format!("domain {:?} has no slots", u.domain)))?;
            for slot in u.slot_names() {
                match self.index_of(&slot) {
                    Some(i) if members.contains(&i) => {}
                    _ => {
                        return Err(Error::Registry(format!(
                            "slot {slot:?} is not registered for domain {:?}",
                            u.domain
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

/// Reads a slot registry file (`domain<TAB>slot<TAB>description`). Blank
/// lines and lines starting with `#` are ignored.
pub fn load_slot_registry(path: &Path) -> Result<SlotRegistry> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut registry = SlotRegistry::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.trim().is_empty()) {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                message: "expected domain<TAB>slot<TAB>description".into(),
            });
        }
        registry
            .insert(fields[0].trim(), SlotType::new(fields[1].trim(), fields[2]))
            .map_err(|e| Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                message: e.to_string(),
            })?;
    }
    Ok(registry)
}

/// Column layout of a corpus file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    /// `token tag`
    #[default]
    Bio,
    /// CoNLL-2003 `token POS chunk NER`; `-DOCSTART-` lines are skipped.
    Conll,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadedCorpus {
    pub utterances: Vec<LabeledUtterance>,
    /// Number of orphan `I-X` tags rewritten to `B-X`.
    pub repaired_tags: usize,
}

pub fn load_bio_corpus(path: &Path, domain: &str, format: CorpusFormat) -> Result<LoadedCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, path, domain, format)
}

pub fn parse_corpus(text: &str, path: &Path, domain: &str, format: CorpusFormat) -> Result<LoadedCorpus> {
    let mut out = LoadedCorpus::default();
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    let flush = |tokens: &mut Vec<String>, labels: &mut Vec<String>, out: &mut LoadedCorpus| {
        if tokens.is_empty() {
            return;
        }
        out.repaired_tags += bio::repair(labels);
        out.utterances.push(LabeledUtterance {
            tokens: std::mem::take(tokens),
            labels: std::mem::take(labels),
            domain: domain.to_owned(),
        });
    };
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            flush(&mut tokens, &mut labels, &mut out);
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message,
        };
        let (token, tag) = match format {
            CorpusFormat::Bio => {
                if fields.len() != 2 {
                    return Err(parse_err(format!("expected `token tag`, found {} field(s)", fields.len())));
                }
                (fields[0], fields[1])
            }
            CorpusFormat::Conll => {
                if fields[0] == "-DOCSTART-" {
                    continue;
                }
                if fields.len() != 4 {
                    return Err(parse_err(format!(
                        "expected `token POS chunk NER`, found {} field(s)",
                        fields.len()
                    )));
                }
                (fields[0], fields[3])
            }
        };
        if bio::Tag::parse(tag).is_none() {
            return Err(parse_err(format!("malformed tag {tag:?}")));
        }
        tokens.push(token.to_owned());
        labels.push(tag.to_owned());
    }
    flush(&mut tokens, &mut labels, &mut out);
    Ok(out)
}

/// Reads untagged input: the first column of each line is a token, blank
/// lines separate utterances.
pub fn load_token_sequences(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut current = Vec::new();
    for line in text.lines() {
        match line.split_whitespace().next() {
            Some(tok) => current.push(tok.to_owned()),
            None if !current.is_empty() => out.push(std::mem::take(&mut current)),
            None => {}
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    Ok(out)
}

/// Writes token/tag pairs in the corpus file format.
pub fn write_bio<W: Write, T: AsRef<str>, L: AsRef<str>>(w: &mut W, utterances: &[(&[T], &[L])]) -> std::io::Result<()> {
    for (i, (tokens, labels)) in utterances.iter().enumerate() {
        if i > 0 {
            writeln!(w)?;
        }
        for (t, l) in tokens.iter().zip(labels.iter()) {
            writeln!(w, "{} {}", t.as_ref(), l.as_ref())?;
        }
    }
    Ok(())
}

pub fn write_bio_corpus<W: Write>(w: &mut W, utterances: &[LabeledUtterance]) -> std::io::Result<()> {
    let pairs: Vec<(&[String], &[String])> = utterances
        .iter()
        .map(|u| (u.tokens.as_slice(), u.labels.as_slice()))
        .collect();
    write_bio(w, &pairs)
}
