use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

/// Maximum number of context tokens kept on each side of a mention.
pub const CONTEXT_WINDOW: usize = 5;

pub const KB_FILE: &str = "kb.jsonl";
pub const MENTIONS_FILE: &str = "mentions.jsonl";
pub const TYPES_FILE: &str = "types.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateEntity {
    pub entity_id: String,
    pub name: String,
    pub known_type_ids: BTreeSet<usize>,
}

impl CandidateEntity {
    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionRecord {
    pub mention_id: String,
    pub doc_id: String,
    pub split: Split,
    pub text: String,
    pub left_context: Vec<String>,
    pub right_context: Vec<String>,
    pub gold_entity_id: String,
    pub known_type_ids: BTreeSet<usize>,
}

impl MentionRecord {
    /// Mention tokens framed by their context, cut to at most `max_len`
    /// tokens. The mention itself is kept first; the remaining budget is
    /// shared between the two sides, nearest tokens first.
    pub fn sequence_tokens(&self, max_len: usize) -> Vec<String> {
        let mention = tokenize(&self.text);
        let left: Vec<String> = self.left_context.iter().flat_map(|t| tokenize(t)).collect();
        let right: Vec<String> = self.right_context.iter().flat_map(|t| tokenize(t)).collect();
        let core = mention.len().min(max_len);
        let budget = max_len - core;
        let mut n_left = left.len().min(budget / 2);
        let n_right = right.len().min(budget - n_left);
        n_left = left.len().min(budget - n_right);
        let mut out = Vec::with_capacity(n_left + core + n_right);
        out.extend_from_slice(&left[left.len() - n_left..]);
        out.extend_from_slice(&mention[..core]);
        out.extend_from_slice(&right[..n_right]);
        out
    }
}

/// A mention with its gold entity and `N` retrieved negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkingInstance {
    pub mention: MentionRecord,
    pub positive: CandidateEntity,
    pub negatives: Vec<CandidateEntity>,
}

impl LinkingInstance {
    /// Positive first, then negatives in retrieval order.
    pub fn candidates(&self) -> impl Iterator<Item = &CandidateEntity> {
        std::iter::once(&self.positive).chain(&self.negatives)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeEntry {
    pub type_id: usize,
    pub name: String,
}

/// Entities keyed by id. Iteration order is entity-id order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBase {
    entities: BTreeMap<String, CandidateEntity>,
}

impl KnowledgeBase {
    pub fn new(entities: Vec<CandidateEntity>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for e in entities {
            if map.contains_key(&e.entity_id) {
                return Err(Error::integrity(
                    format!("entity {}", e.entity_id),
                    "duplicate entity_id",
                ));
            }
            map.insert(e.entity_id.clone(), e);
        }
        Ok(Self { entities: map })
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CandidateEntity> {
        self.entities.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &CandidateEntity> {
        self.entities.values()
    }

    /// Rejects type ids outside `[0, num_types)`.
    pub fn check_types(&self, num_types: usize) -> Result<()> {
        for e in self.iter() {
            if let Some(&t) = e.known_type_ids.iter().find(|&&t| t >= num_types) {
                return Err(Error::integrity(
                    format!("entity {}", e.entity_id),
                    format!("type id {t} out of range for {num_types} types"),
                ));
            }
        }
        Ok(())
    }
}

/// A loaded dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kb: KnowledgeBase,
    pub mentions: Vec<MentionRecord>,
    pub types: Vec<TypeEntry>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &MentionRecord> {
        self.mentions.iter().filter(move |m| m.split == split)
    }

    pub fn num_types(&self) -> usize {
        self.types.iter().map(|t| t.type_id + 1).max().unwrap_or(0)
    }

    pub fn type_name(&self, id: usize) -> Option<&str> {
        self.types
            .iter()
            .find(|t| t.type_id == id)
            .map(|t| t.name.as_str())
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{}:{}", path.display(), i + 1), e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads `kb.jsonl`, `mentions.jsonl` and `types.jsonl` from `dir` and
/// checks referential integrity.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let kb_path = dir.join(KB_FILE);
    let kb = KnowledgeBase::new(read_jsonl(&kb_path)?)?;
    let types: Vec<TypeEntry> = read_jsonl(&dir.join(TYPES_FILE))?;
    let mentions_path = dir.join(MENTIONS_FILE);
    let mentions: Vec<MentionRecord> = read_jsonl(&mentions_path)?;
    let dataset = Dataset { kb, mentions, types };
    kb_integrity(&dataset, &kb_path)?;
    mention_integrity(&dataset, &mentions_path)?;
    if dataset.mentions.is_empty() {
        log::warn!("{} holds no mentions", mentions_path.display());
    }
    Ok(dataset)
}

fn kb_integrity(ds: &Dataset, path: &Path) -> Result<()> {
    let mut seen = BTreeSet::new();
    for t in &ds.types {
        if !seen.insert(t.type_id) {
            return Err(Error::integrity(
                path.with_file_name(TYPES_FILE).display().to_string(),
                format!("duplicate type_id {}", t.type_id),
            ));
        }
    }
    ds.kb.check_types(ds.num_types()).map_err(|e| match e {
        Error::Integrity { location, message } => {
            Error::integrity(format!("{}: {location}", path.display()), message)
        }
        other => other,
    })
}

fn mention_integrity(ds: &Dataset, path: &Path) -> Result<()> {
    let num_types = ds.num_types();
    let mut ids = BTreeSet::new();
    for (i, m) in ds.mentions.iter().enumerate() {
        let loc = || format!("{}:{} (mention {})", path.display(), i + 1, m.mention_id);
        if !ids.insert(m.mention_id.as_str()) {
            return Err(Error::integrity(loc(), "duplicate mention_id"));
        }
        if ds.kb.get(&m.gold_entity_id).is_none() {
            return Err(Error::integrity(
                loc(),
                format!("gold entity {} not in knowledge base", m.gold_entity_id),
            ));
        }
        if m.left_context.len() > CONTEXT_WINDOW || m.right_context.len() > CONTEXT_WINDOW {
            return Err(Error::integrity(
                loc(),
                format!("context longer than {CONTEXT_WINDOW} tokens"),
            ));
        }
        if m.text.trim().is_empty() {
            return Err(Error::integrity(loc(), "empty mention text"));
        }
        if let Some(&t) = m.known_type_ids.iter().find(|&&t| t >= num_types) {
            return Err(Error::integrity(loc(), format!("type id {t} out of range")));
        }
    }
    Ok(())
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join(KB_FILE), ds.kb.iter())?;
    write_jsonl(&dir.join(MENTIONS_FILE), &ds.mentions)?;
    write_jsonl(&dir.join(TYPES_FILE), &ds.types)
}
