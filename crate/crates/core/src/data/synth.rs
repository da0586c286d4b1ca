use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::records::{
    CandidateEntity, Dataset, KnowledgeBase, MentionRecord, Split, TypeEntry, CONTEXT_WINDOW,
};
use crate::error::{Error, Result};

const FILLER: [&str; 14] = [
    "the", "a", "of", "with", "and", "was", "in", "for", "on", "patient", "noted", "showed",
    "after", "history",
];
const CONSONANTS: &[u8] = b"bcdfghklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Sizes of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_entities: usize,
    pub num_types: usize,
    pub train_mentions: usize,
    pub dev_mentions: usize,
    pub test_mentions: usize,
    /// Entities sharing the same modifiers, each of a different type.
    pub family_size: usize,
    pub heads_per_type: usize,
    pub context_words_per_type: usize,
    pub modifiers: usize,
    pub mentions_per_doc: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_entities: 200,
            num_types: 8,
            train_mentions: 1000,
            dev_mentions: 200,
            test_mentions: 200,
            family_size: 4,
            heads_per_type: 5,
            context_words_per_type: 6,
            modifiers: 40,
            mentions_per_doc: 5,
        }
    }
}

struct Lexicon {
    used: BTreeSet<String>,
}

impl Lexicon {
    fn new() -> Self {
        Self {
            used: FILLER.iter().map(|w| w.to_string()).collect(),
        }
    }

    fn word(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let syllables = rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
                w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
            }
            if rng.gen_bool(0.5) {
                w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn words(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
        (0..n).map(|_| self.word(rng)).collect()
    }
}

struct TypeLexicon {
    heads: Vec<String>,
    synonyms: Vec<String>,
    context: Vec<String>,
}

/// Generates a knowledge base of templated names grouped into known types
/// and mentions that are corrupted names inside type-flavoured contexts.
/// Output depends only on `config`.
pub fn synth_generate(config: &SynthConfig) -> Result<Dataset> {
    validate(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut lex = Lexicon::new();
    let types: Vec<TypeLexicon> = (0..config.num_types)
        .map(|_| TypeLexicon {
            heads: lex.words(config.heads_per_type, &mut rng),
            synonyms: lex.words(config.heads_per_type, &mut rng),
            context: lex.words(config.context_words_per_type, &mut rng),
        })
        .collect();
    let modifiers = lex.words(config.modifiers, &mut rng);

    let mut entities = Vec::with_capacity(config.num_entities);
    let mut names = BTreeSet::new();
    let all_types: Vec<usize> = (0..config.num_types).collect();
    while entities.len() < config.num_entities {
        let pair: Vec<&String> = modifiers.choose_multiple(&mut rng, 2).collect();
        let short = rng.gen_bool(0.3);
        let family_types: Vec<usize> = all_types
            .choose_multiple(&mut rng, config.family_size)
            .copied()
            .collect();
        for t in family_types {
            if entities.len() == config.num_entities {
                break;
            }
            let head = types[t].heads.choose(&mut rng).expect("non-empty head pool");
            let name = if short {
                format!("{} {head}", pair[0])
            } else {
                format!("{} {} {head}", pair[0], pair[1])
            };
            if !names.insert(name.clone()) {
                continue;
            }
            entities.push(CandidateEntity {
                entity_id: format!("E{:04}", entities.len()),
                name,
                known_type_ids: [t].into(),
            });
        }
    }

    let mut mentions = Vec::new();
    let mut doc = 0;
    for (split, count) in [
        (Split::Train, config.train_mentions),
        (Split::Dev, config.dev_mentions),
        (Split::Test, config.test_mentions),
    ] {
        for i in 0..count {
            if i % config.mentions_per_doc == 0 {
                doc += 1;
            }
            let entity = entities.choose(&mut rng).expect("non-empty knowledge base");
            let t = *entity.known_type_ids.iter().next().expect("one type per entity");
            let text = corrupt(&entity.name, &types[t], &mut rng);
            let left = context(&types, t, &mut rng);
            let right = context(&types, t, &mut rng);
            mentions.push(MentionRecord {
                mention_id: format!("M{:05}", mentions.len()),
                doc_id: format!("D{doc:04}"),
                split,
                text,
                left_context: left,
                right_context: right,
                gold_entity_id: entity.entity_id.clone(),
                known_type_ids: entity.known_type_ids.clone(),
            });
        }
    }

    let type_entries = (0..config.num_types)
        .map(|t| TypeEntry {
            type_id: t,
            name: format!("synthetic type {t} ({})", types[t].heads[0]),
        })
        .collect();
    Ok(Dataset {
        kb: KnowledgeBase::new(entities)?,
        mentions,
        types: type_entries,
    })
}

fn validate(c: &SynthConfig) -> Result<()> {
    if c.num_types == 0 || c.num_entities == 0 || c.heads_per_type == 0 {
        return Err(Error::Config("synthetic corpus sizes must be positive".into()));
    }
    if c.family_size == 0 || c.family_size > c.num_types {
        return Err(Error::Config(format!(
            "family_size must be in 1..={} (the number of types)",
            c.num_types
        )));
    }
    if c.modifiers < 2 || c.mentions_per_doc == 0 {
        return Err(Error::Config(
            "need at least two modifiers and one mention per document".into(),
        ));
    }
    let capacity = c.modifiers * (c.modifiers - 1) * c.num_types * c.heads_per_type;
    if c.num_entities > capacity / 4 {
        return Err(Error::Config(format!(
            "{} entities do not fit the name space of {} modifiers",
            c.num_entities, c.modifiers
        )));
    }
    Ok(())
}

/// Applies random surface corruptions, falling back to the clean name when
/// no character trigram would survive.
fn corrupt(name: &str, ty: &TypeLexicon, rng: &mut ChaCha8Rng) -> String {
    let mut tokens: Vec<String> = name.split(' ').map(str::to_string).collect();
    let head = tokens.len() - 1;
    if rng.gen_bool(0.25) {
        if let Some(pos) = ty.heads.iter().position(|h| *h == tokens[head]) {
            tokens[head] = ty.synonyms[pos].clone();
        }
    }
    if rng.gen_bool(0.35) {
        let i = rng.gen_range(0..tokens.len());
        if tokens[i].len() >= 5 {
            let at = rng.gen_range(1..tokens[i].len());
            tokens[i].remove(at);
        }
    }
    if rng.gen_bool(0.15) && head > 0 {
        let i = rng.gen_range(0..head);
        let keep = rng.gen_range(3..=4).min(tokens[i].len());
        tokens[i].truncate(keep);
    }
    if rng.gen_bool(0.2) {
        tokens.shuffle(rng);
    }
    let text = tokens.join(" ");
    if shares_trigram(&text, name) {
        text
    } else {
        name.to_string()
    }
}

fn shares_trigram(a: &str, b: &str) -> bool {
    let grams = |s: &str| -> BTreeSet<Vec<char>> {
        let c: Vec<char> = s.chars().collect();
        c.windows(3).map(<[char]>::to_vec).collect()
    };
    !grams(a).is_disjoint(&grams(b))
}

/// Context words mostly drawn from the entity type's pool, sometimes from
/// another type, mixed with shared filler.
fn context(types: &[TypeLexicon], t: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let len = rng.gen_range(1..=CONTEXT_WINDOW);
    let source = if rng.gen_bool(0.8) {
        t
    } else {
        rng.gen_range(0..types.len())
    };
    (0..len)
        .map(|_| {
            if rng.gen_bool(0.5) {
                types[source].context.choose(rng).expect("non-empty pool").clone()
            } else {
                FILLER.choose(rng).expect("non-empty filler").to_string()
            }
        })
        .collect()
}
