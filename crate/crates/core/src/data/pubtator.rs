use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use super::records::{
    CandidateEntity, Dataset, KnowledgeBase, MentionRecord, Split, TypeEntry, CONTEXT_WINDOW,
};
use crate::error::{Error, Result};

/// Inputs of a PubTator import. Without split lists every document is
/// treated as training data.
#[derive(Debug, Clone, Default)]
pub struct PubtatorOptions {
    pub corpus: PathBuf,
    pub train_pmids: Option<PathBuf>,
    pub dev_pmids: Option<PathBuf>,
    pub test_pmids: Option<PathBuf>,
    /// Optional `entity_id<TAB>name` file; otherwise each entity is named
    /// after its most frequent surface form.
    pub entity_names: Option<PathBuf>,
    /// Optional `type_code<TAB>name` file for readable type names.
    pub type_names: Option<PathBuf>,
}

struct Annotation {
    start: usize,
    end: usize,
    text: String,
    types: Vec<String>,
    entity: String,
    line: usize,
}

#[derive(Default)]
struct Document {
    title: String,
    abstract_text: String,
    annotations: Vec<Annotation>,
}

/// Converts a PubTator corpus into records. Context windows are the five
/// whitespace-separated words on each side of the mention span.
pub fn import_pubtator(opts: &PubtatorOptions) -> Result<Dataset> {
    let docs = parse_corpus(&opts.corpus)?;
    let mut split_of: BTreeMap<String, Split> = BTreeMap::new();
    let lists = [
        (Split::Train, &opts.train_pmids),
        (Split::Dev, &opts.dev_pmids),
        (Split::Test, &opts.test_pmids),
    ];
    let any_list = lists.iter().any(|(_, p)| p.is_some());
    for (split, path) in lists {
        if let Some(path) = path {
            for pmid in read_lines(path)? {
                split_of.insert(pmid, split);
            }
        }
    }

    let mut type_codes = BTreeSet::new();
    for doc in docs.values() {
        for a in &doc.annotations {
            type_codes.extend(a.types.iter().cloned());
        }
    }
    let type_index: BTreeMap<String, usize> = type_codes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.clone(), i))
        .collect();
    let readable = match &opts.type_names {
        Some(p) => read_tsv(p)?,
        None => BTreeMap::new(),
    };
    let types = type_codes
        .iter()
        .enumerate()
        .map(|(i, code)| TypeEntry {
            type_id: i,
            name: readable.get(code).cloned().unwrap_or_else(|| code.clone()),
        })
        .collect();

    let mut surface: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut entity_types: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    let mut mentions = Vec::new();
    let mut skipped = 0usize;
    for (pmid, doc) in &docs {
        let split = match split_of.get(pmid) {
            Some(&s) => s,
            None if !any_list => Split::Train,
            None => {
                skipped += 1;
                continue;
            }
        };
        let full: Vec<char> = format!("{} {}", doc.title, doc.abstract_text).chars().collect();
        for a in &doc.annotations {
            let loc = || format!("{}:{}", opts.corpus.display(), a.line);
            if a.end > full.len() || a.start >= a.end {
                return Err(Error::integrity(loc(), "annotation span outside the document"));
            }
            let span: String = full[a.start..a.end].iter().collect();
            if span != a.text {
                return Err(Error::integrity(
                    loc(),
                    format!("span text {span:?} differs from annotation {:?}", a.text),
                ));
            }
            let type_ids: BTreeSet<usize> = a.types.iter().map(|t| type_index[t]).collect();
            *surface
                .entry(a.entity.clone())
                .or_default()
                .entry(a.text.clone())
                .or_insert(0) += 1;
            entity_types
                .entry(a.entity.clone())
                .or_default()
                .extend(type_ids.iter().copied());
            let left: String = full[..a.start].iter().collect();
            let right: String = full[a.end..].iter().collect();
            let mut left_ctx: Vec<String> = left
                .split_whitespace()
                .rev()
                .take(CONTEXT_WINDOW)
                .map(str::to_string)
                .collect();
            left_ctx.reverse();
            mentions.push(MentionRecord {
                mention_id: format!("{pmid}:{}", a.start),
                doc_id: pmid.clone(),
                split,
                text: a.text.clone(),
                left_context: left_ctx,
                right_context: right
                    .split_whitespace()
                    .take(CONTEXT_WINDOW)
                    .map(str::to_string)
                    .collect(),
                gold_entity_id: a.entity.clone(),
                known_type_ids: type_ids,
            });
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} documents are in no split list and were skipped");
    }

    let names = match &opts.entity_names {
        Some(p) => read_tsv(p)?,
        None => BTreeMap::new(),
    };
    let entities = entity_types
        .into_iter()
        .map(|(id, types)| {
            let name = names.get(&id).cloned().unwrap_or_else(|| {
                // most frequent surface form, lexicographically first on ties
                let forms = &surface[&id];
                let best = forms.values().max().copied().unwrap_or(0);
                forms
                    .iter()
                    .find(|(_, &c)| c == best)
                    .map(|(s, _)| s.clone())
                    .unwrap_or_default()
            });
            CandidateEntity {
                entity_id: id,
                name,
                known_type_ids: types,
            }
        })
        .collect();
    Ok(Dataset {
        kb: KnowledgeBase::new(entities)?,
        mentions,
        types,
    })
}

fn parse_corpus(path: &Path) -> Result<BTreeMap<String, Document>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs: BTreeMap<String, Document> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let n = i + 1;
        let loc = || format!("{}:{n}", path.display());
        if line.trim().is_empty() {
            continue;
        }
        let bars: Vec<&str> = line.splitn(3, '|').collect();
        if bars.len() == 3 && (bars[1] == "t" || bars[1] == "a") && !bars[0].contains('\t') {
            let doc = docs.entry(bars[0].to_string()).or_default();
            if bars[1] == "t" {
                doc.title = bars[2].to_string();
            } else {
                doc.abstract_text = bars[2].to_string();
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(Error::format(
                loc(),
                format!("expected 6 tab-separated fields, found {}", cols.len()),
            ));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format(loc(), format!("bad offset {s:?}")))
        };
        let types: Vec<String> = cols[4]
            .split(',')
            .map(|t| t.trim().to_string())
            .filter(|t| !t.is_empty())
            .collect();
        let entity = cols[5].trim();
        let entity = entity.strip_prefix("UMLS:").unwrap_or(entity);
        if entity.is_empty() {
            return Err(Error::format(loc(), "missing entity id"));
        }
        let Some(doc) = docs.get_mut(cols[0]) else {
            return Err(Error::format(loc(), format!("annotation for unknown document {}", cols[0])));
        };
        doc.annotations.push(Annotation {
            start: num(cols[1])?,
            end: num(cols[2])?,
            text: cols[3].to_string(),
            types,
            entity: entity.to_string(),
            line: n,
        });
    }
    Ok(docs)
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn read_tsv(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in read_lines(path)?.into_iter().enumerate() {
        let (k, v) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(format!("{}:{}", path.display(), i + 1), "expected key<TAB>value"))?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}
