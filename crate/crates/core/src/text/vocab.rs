use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

const PAD_WORD: &str = "<pad>";
const UNK_WORD: &str = "<unk>";

/// Word and character vocabularies. Ids 0 and 1 are PAD and UNK in both;
/// corpus entries start at 2, ordered by descending frequency then
/// lexicographically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    words: Vec<String>,
    chars: Vec<char>,
    word_index: HashMap<String, usize>,
    char_index: HashMap<char, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    words: Vec<String>,
    chars: Vec<char>,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        Vocabulary::from_lists(r.words, r.chars)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr {
            words: v.words,
            chars: v.chars,
        }
    }
}

/// Builds the vocabulary of a tokenised corpus. Words seen fewer than
/// `min_count` times are left out and resolve to UNK; every character of
/// the corpus gets a char id.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Vocabulary> {
    if corpus.iter().all(|seq| seq.is_empty()) {
        return Err(Error::EmptyInput("vocabulary corpus"));
    }
    let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut char_counts: BTreeMap<char, usize> = BTreeMap::new();
    for token in corpus.iter().flatten() {
        let token = token.as_ref();
        *word_counts.entry(token).or_default() += 1;
        for ch in token.chars() {
            *char_counts.entry(ch).or_default() += 1;
        }
    }
    let mut words: Vec<(&str, usize)> = word_counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count.max(1))
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut chars: Vec<(char, usize)> = char_counts.into_iter().collect();
    chars.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut word_list = vec![PAD_WORD.to_string(), UNK_WORD.to_string()];
    word_list.extend(words.into_iter().map(|(w, _)| w.to_string()));
    let mut char_list = vec!['\0', '\u{1}'];
    char_list.extend(chars.into_iter().map(|(c, _)| c));
    Ok(Vocabulary::from_lists(word_list, char_list))
}

impl Vocabulary {
    fn from_lists(words: Vec<String>, chars: Vec<char>) -> Self {
        let word_index = words
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, w)| (w.clone(), i))
            .collect();
        let char_index = chars.iter().enumerate().skip(2).map(|(i, &c)| (c, i)).collect();
        Self {
            words,
            chars,
            word_index,
            char_index,
        }
    }

    /// Number of word ids, specials included.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 2
    }

    pub fn num_chars(&self) -> usize {
        self.chars.len()
    }

    pub fn word_id(&self, word: &str) -> usize {
        self.word_index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn char_id(&self, ch: char) -> usize {
        self.char_index.get(&ch).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.word_index.contains_key(word)
    }

    /// Corpus words (specials excluded) in id order.
    pub fn corpus_words(&self) -> impl Iterator<Item = (usize, &str)> {
        self.words
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, w)| (i, w.as_str()))
    }

    /// Maps tokens to ids, truncating or right-padding to `max_len`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], max_len: usize) -> TokenizedSeq {
        let live = tokens.len().min(max_len);
        let mut word_ids = vec![PAD; max_len];
        let mut chars = Vec::with_capacity(live);
        for (slot, token) in word_ids.iter_mut().zip(tokens) {
            let token = token.as_ref();
            *slot = self.word_id(token);
            chars.push(token.chars().map(|c| self.char_id(c)).collect());
        }
        let mut mask = vec![false; max_len];
        mask[..live].iter_mut().for_each(|m| *m = true);
        TokenizedSeq {
            word_ids,
            chars,
            mask,
        }
    }
}

/// A token sequence resolved against a [`Vocabulary`] and right-padded to a
/// fixed length. `chars[t]` holds the char ids of live token `t`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenizedSeq {
    pub word_ids: Vec<usize>,
    pub chars: Vec<Vec<usize>>,
    pub mask: Vec<bool>,
}

impl TokenizedSeq {
    pub fn max_len(&self) -> usize {
        self.word_ids.len()
    }

    pub fn live_len(&self) -> usize {
        self.chars.len()
    }
}
