use std::collections::BTreeMap;

use super::records::{KnowledgeBase, LinkingInstance, MentionRecord};
use crate::error::{Error, Result};

pub const DEFAULT_NGRAMS: (usize, usize) = (1, 5);

/// Counts of every contiguous character n-gram with `n` in `lo..=hi`,
/// taken over the lowercased, trimmed string.
pub fn char_ngrams(s: &str, (lo, hi): (usize, usize)) -> Result<BTreeMap<String, usize>> {
    let norm = s.trim().to_lowercase();
    if norm.is_empty() {
        return Err(Error::EmptyInput("char_ngrams of an empty string"));
    }
    let chars: Vec<char> = norm.chars().collect();
    let mut out = BTreeMap::new();
    for n in lo.max(1)..=hi {
        for window in chars.windows(n) {
            *out.entry(window.iter().collect::<String>()).or_insert(0) += 1;
        }
    }
    Ok(out)
}

/// TF-IDF index over entity names. TF is the raw n-gram count and
/// `idf = ln((1 + N) / (1 + df)) + 1`; vectors are L2-normalised. Query
/// n-grams absent from the index carry no weight.
#[derive(Debug, Clone)]
pub struct TfIdfIndex {
    ngram_range: (usize, usize),
    idf: BTreeMap<String, f64>,
    /// `term -> [(doc, weight)]`, docs ascending.
    postings: BTreeMap<String, Vec<(usize, f64)>>,
    ids: Vec<String>,
}

impl TfIdfIndex {
    pub fn build(kb: &KnowledgeBase, ngram_range: (usize, usize)) -> Result<Self> {
        let docs: Vec<(String, String)> = kb
            .iter()
            .map(|e| (e.entity_id.clone(), e.name.clone()))
            .collect();
        Self::from_docs(&docs, ngram_range)
    }

    /// `docs` are `(id, text)` pairs; ids must be unique.
    pub fn from_docs(docs: &[(String, String)], ngram_range: (usize, usize)) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::EmptyInput("tf-idf corpus"));
        }
        let counts: Vec<BTreeMap<String, usize>> = docs
            .iter()
            .map(|(_, text)| char_ngrams(text, ngram_range))
            .collect::<Result<_>>()?;
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for c in &counts {
            for term in c.keys() {
                *df.entry(term).or_insert(0) += 1;
            }
        }
        let n = docs.len() as f64;
        let idf: BTreeMap<String, f64> = df
            .iter()
            .map(|(t, &d)| (t.to_string(), ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0))
            .collect();
        let mut postings: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
        for (doc, c) in counts.iter().enumerate() {
            let weights = weigh(c, &idf);
            for (term, w) in weights {
                postings.entry(term).or_default().push((doc, w));
            }
        }
        Ok(Self {
            ngram_range,
            idf,
            postings,
            ids: docs.iter().map(|(id, _)| id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Normalised TF-IDF vector of arbitrary text under this index's IDF.
    pub fn vectorize(&self, text: &str) -> Result<BTreeMap<String, f64>> {
        Ok(weigh(&char_ngrams(text, self.ngram_range)?, &self.idf))
    }

    /// Cosine similarity of `query` against every indexed document.
    pub fn scores(&self, query: &str) -> Result<Vec<f64>> {
        let q = self.vectorize(query)?;
        let mut scores = vec![0.0; self.ids.len()];
        for (term, qw) in &q {
            if let Some(list) = self.postings.get(term) {
                for &(doc, dw) in list {
                    scores[doc] += qw * dw;
                }
            }
        }
        scores.iter_mut().for_each(|s| *s = s.clamp(0.0, 1.0));
        Ok(scores)
    }

    pub fn score(&self, query: &str, doc: &str) -> Result<f64> {
        let q = self.vectorize(query)?;
        let d = self.vectorize(doc)?;
        let dot: f64 = q.iter().filter_map(|(t, w)| d.get(t).map(|v| w * v)).sum();
        Ok(dot.clamp(0.0, 1.0))
    }

    /// All documents by score descending, ties by id ascending.
    pub fn rank(&self, query: &str) -> Result<Vec<(&str, f64)>> {
        let scores = self.scores(query)?;
        let mut ranked: Vec<(&str, f64)> = self
            .ids
            .iter()
            .map(String::as_str)
            .zip(scores)
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(ranked)
    }
}

fn weigh(counts: &BTreeMap<String, usize>, idf: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let mut v: BTreeMap<String, f64> = counts
        .iter()
        .filter_map(|(t, &c)| idf.get(t).map(|w| (t.clone(), c as f64 * w)))
        .collect();
    let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.values_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Pairs a mention with its gold entity and the `n` most similar other
/// entities of the knowledge base.
pub fn generate_candidates(
    mention: &MentionRecord,
    kb: &KnowledgeBase,
    index: &TfIdfIndex,
    n: usize,
) -> Result<LinkingInstance> {
    if kb.len() < n + 1 {
        return Err(Error::Config(format!(
            "knowledge base has {} entities, {} candidates need at least {}",
            kb.len(),
            n + 1,
            n + 1
        )));
    }
    let positive = kb.get(&mention.gold_entity_id).cloned().ok_or_else(|| {
        Error::integrity(
            format!("mention {}", mention.mention_id),
            format!("gold entity {} not in knowledge base", mention.gold_entity_id),
        )
    })?;
    let negatives = index
        .rank(&mention.text)?
        .into_iter()
        .filter(|(id, _)| *id != positive.entity_id)
        .take(n)
        .map(|(id, _)| {
            kb.get(id)
                .cloned()
                .ok_or_else(|| Error::Contract(format!("index entity {id} missing from knowledge base")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LinkingInstance {
        mention: mention.clone(),
        positive,
        negatives,
    })
}
