//! Tokenisation, vocabularies and the word + character-CNN embedding layer.

mod embed;
mod vocab;

pub use embed::{
    char_cnn, embed_sequence, load_pretrained, random_word_table, EmbeddingConfig,
    EmbeddingParams, Pretrained,
};
pub use vocab::{build_vocab, TokenizedSeq, Vocabulary, PAD, UNK};

/// Lowercases and splits on whitespace; every punctuation character becomes
/// a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            flush(&mut current, &mut tokens);
        } else if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else {
            flush(&mut current, &mut tokens);
            tokens.push(ch.to_lowercase().collect());
        }
    }
    flush(&mut current, &mut tokens);
    tokens
}

fn flush(current: &mut String, tokens: &mut Vec<String>) {
    if !current.is_empty() {
        tokens.push(std::mem::take(current));
    }
}
