//! Dataset records, JSONL storage, TF-IDF candidate generation, a seeded
//! synthetic corpus and a PubTator importer.

mod pubtator;
mod records;
mod stats;
mod synth;
mod tfidf;

pub use pubtator::{import_pubtator, PubtatorOptions};
pub use records::{
    load_dataset, read_jsonl, save_dataset, write_jsonl, CandidateEntity, Dataset, KnowledgeBase,
    LinkingInstance, MentionRecord, Split, TypeEntry, CONTEXT_WINDOW, KB_FILE, MENTIONS_FILE,
    TYPES_FILE,
};
pub use stats::{DatasetStats, SplitStats};
pub use synth::{synth_generate, SynthConfig};
pub use tfidf::{char_ngrams, generate_candidates, TfIdfIndex, DEFAULT_NGRAMS};
