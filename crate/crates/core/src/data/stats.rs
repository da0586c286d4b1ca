use std::collections::BTreeSet;
use std::fmt;

use super::records::{Dataset, Split};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SplitStats {
    pub documents: usize,
    pub mentions: usize,
    /// Unique gold entities.
    pub entities: usize,
}

/// Per-split document, mention and unique-entity counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetStats {
    pub splits: [(Split, SplitStats); 3],
    pub kb_entities: usize,
    pub types: usize,
}

impl DatasetStats {
    pub fn compute(ds: &Dataset) -> Self {
        let splits = Split::ALL.map(|split| {
            let mut docs = BTreeSet::new();
            let mut ents = BTreeSet::new();
            let mut mentions = 0;
            for m in ds.split(split) {
                docs.insert(m.doc_id.as_str());
                ents.insert(m.gold_entity_id.as_str());
                mentions += 1;
            }
            (
                split,
                SplitStats {
                    documents: docs.len(),
                    mentions,
                    entities: ents.len(),
                },
            )
        });
        Self {
            splits,
            kb_entities: ds.kb.len(),
            types: ds.types.len(),
        }
    }

    pub fn get(&self, split: Split) -> SplitStats {
        self.splits
            .iter()
            .find(|(s, _)| *s == split)
            .map(|(_, st)| *st)
            .unwrap_or_default()
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12}{:>10}{:>10}{:>10}", "statistic", "train", "dev", "test")?;
        type Row = (&'static str, fn(&SplitStats) -> usize);
        let rows: [Row; 3] = [
            ("#documents", |s| s.documents),
            ("#mentions", |s| s.mentions),
            ("#entities", |s| s.entities),
        ];
        for (name, get) in rows {
            write!(f, "{name:<12}")?;
            for (_, s) in &self.splits {
                write!(f, "{:>10}", get(s))?;
            }
            writeln!(f)?;
        }
        writeln!(f, "kb entities: {}", self.kb_entities)?;
        write!(f, "known types: {}", self.types)
    }
}
