use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenizedSeq, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

const PRETRAINED_INIT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    /// Total char-CNN output width, split as evenly as possible over
    /// `kernel_widths` (earlier widths take the remainder).
    pub char_cnn_dim: usize,
    pub kernel_widths: Vec<usize>,
    pub use_chars: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            word_dim: 32,
            char_dim: 16,
            char_cnn_dim: 24,
            kernel_widths: vec![3, 4, 5],
            use_chars: true,
        }
    }
}

impl EmbeddingConfig {
    pub fn output_dim(&self) -> usize {
        self.word_dim + if self.use_chars { self.char_cnn_dim } else { 0 }
    }

    pub fn filters_per_width(&self) -> Vec<usize> {
        let n = self.kernel_widths.len();
        (0..n)
            .map(|i| self.char_cnn_dim / n + usize::from(i < self.char_cnn_dim % n))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.word_dim == 0 {
            return Err(Error::Config("word_dim must be positive".into()));
        }
        if self.use_chars {
            if self.char_dim == 0 || self.kernel_widths.is_empty() {
                return Err(Error::Config("char CNN needs char_dim and kernel widths".into()));
            }
            if self.kernel_widths.contains(&0) || self.char_cnn_dim < self.kernel_widths.len() {
                return Err(Error::Config(format!(
                    "char_cnn_dim {} cannot be split over kernel widths {:?}",
                    self.char_cnn_dim, self.kernel_widths
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvFilter {
    pub width: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Handles to the embedding tables and char-CNN filters inside a store.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    pub config: EmbeddingConfig,
    pub word_table: ParamId,
    pub char_table: Option<ParamId>,
    pub filters: Vec<ConvFilter>,
}

impl EmbeddingParams {
    /// Registers the tables. `word_table` must be `[vocab.len(), word_dim]`;
    /// its PAD row is zeroed and frozen.
    pub fn register(
        store: &mut ParamStore,
        vocab: &Vocabulary,
        config: &EmbeddingConfig,
        mut word_table: Tensor,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let expected = [vocab.len(), config.word_dim];
        if word_table.shape() != expected {
            return Err(Error::dim("word_table", word_table.shape(), &expected));
        }
        zero_row(&mut word_table, PAD);
        let word = store.register_frozen_rows("embed.word", word_table, vec![PAD]);
        let mut char_table = None;
        let mut filters = Vec::new();
        if config.use_chars {
            let mut table = Tensor::uniform(vec![vocab.num_chars(), config.char_dim], 0.5, rng);
            zero_row(&mut table, PAD);
            char_table = Some(store.register_frozen_rows("embed.char", table, vec![PAD]));
            for (&width, count) in config.kernel_widths.iter().zip(config.filters_per_width()) {
                let fan_in = width * config.char_dim;
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = store.register(
                    format!("embed.conv{width}.w"),
                    Tensor::uniform(vec![fan_in, count], bound, rng),
                );
                let bias = store.register(format!("embed.conv{width}.b"), Tensor::zeros(vec![count]));
                filters.push(ConvFilter {
                    width,
                    weight,
                    bias,
                });
            }
        }
        Ok(Self {
            config: config.clone(),
            word_table: word,
            char_table,
            filters,
        })
    }
}

fn zero_row(t: &mut Tensor, row: usize) {
    let cols = t.shape()[1];
    t.data_mut()[row * cols..(row + 1) * cols]
        .iter_mut()
        .for_each(|x| *x = 0.0);
}

/// Word table initialised from a pretrained text file.
#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub table: Tensor,
    /// Fraction of corpus words (specials excluded) absent from the file.
    pub oov_rate: f64,
}

/// Randomly initialised `[vocab.len(), dim]` word table; PAD row zero.
pub fn random_word_table(vocab: &Vocabulary, dim: usize, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::uniform(vec![vocab.len(), dim], PRETRAINED_INIT, rng);
    zero_row(&mut t, PAD);
    t
}

/// Reads a GloVe-style file (`token v1 v2 ... vd` per line). Rows of words
/// found in the file are copied; every other row keeps its seeded
/// uniform(-0.05, 0.05) initialisation.
pub fn load_pretrained(path: &Path, vocab: &Vocabulary, rng: &mut impl Rng) -> Result<Pretrained> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut dim = None;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let location = format!("{}:{}", path.display(), lineno + 1);
        let mut parts = line.split(' ').filter(|s| !s.is_empty());
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(&location, format!("bad float: {e}")))?;
        match dim {
            None if values.is_empty() => {
                return Err(Error::format(&location, "line has no vector"));
            }
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::format(
                    &location,
                    format!("expected {d} values, found {}", values.len()),
                ));
            }
            Some(_) => {}
        }
        if vocab.contains(token) {
            rows.entry(vocab.word_id(token)).or_insert(values);
        }
    }
    let dim = dim.ok_or(Error::EmptyInput("pretrained embedding file"))?;
    let mut table = random_word_table(vocab, dim, rng);
    for (&id, values) in &rows {
        table.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(values);
    }
    let corpus_words = vocab.len() - 2;
    let oov_rate = if corpus_words == 0 {
        0.0
    } else {
        (corpus_words - rows.len()) as f64 / corpus_words as f64
    };
    Ok(Pretrained { table, oov_rate })
}

/// Character CNN for one word: per kernel width, convolution over the char
/// embeddings, ReLU and max-pool over positions; widths concatenated.
/// Words shorter than a kernel are right-padded with char PAD up to that
/// width only, so trailing padding never opens extra windows.
pub fn char_cnn(g: &mut Graph<'_>, params: &EmbeddingParams, chars: &[usize]) -> Result<Var> {
    if chars.is_empty() {
        return Err(Error::EmptyInput("char_cnn on empty word"));
    }
    let table_id = params
        .char_table
        .ok_or_else(|| Error::Config("char CNN disabled in this model".into()))?;
    let table = g.param(table_id);
    let mut pooled = Vec::with_capacity(params.filters.len());
    for filter in &params.filters {
        let mut ids = chars.to_vec();
        if ids.len() < filter.width {
            ids.resize(filter.width, PAD);
        }
        let e = g.gather_rows(table, &ids)?;
        let windows = g.unfold(e, filter.width)?;
        let w = g.param(filter.weight);
        let b = g.param(filter.bias);
        let z = g.matmul(windows, w)?;
        let z = g.add(z, b)?;
        let z = g.relu(z)?;
        pooled.push(g.max_rows(z)?);
    }
    g.concat(&pooled, 0)
}

/// Embeds a padded sequence into `[L, word_dim (+ char_cnn_dim)]`. Masked
/// rows are exactly zero. `cache` memoises char-CNN outputs per spelling
/// within one graph.
pub fn embed_sequence(
    g: &mut Graph<'_>,
    params: &EmbeddingParams,
    seq: &TokenizedSeq,
    cache: &mut HashMap<Vec<usize>, Var>,
) -> Result<Var> {
    let table = g.param(params.word_table);
    let words = g.gather_rows(table, &seq.word_ids)?;
    if !params.config.use_chars {
        return Ok(words);
    }
    let d = params.config.char_cnn_dim;
    let mut rows = Vec::with_capacity(seq.max_len());
    let mut live = seq.chars.iter();
    let mut zero = None;
    for &m in &seq.mask {
        let row = match (m, live.next()) {
            (true, Some(chars)) => {
                let v = match cache.get(chars) {
                    Some(&v) => v,
                    None => {
                        let v = char_cnn(g, params, chars)?;
                        cache.insert(chars.clone(), v);
                        v
                    }
                };
                g.reshape(v, &[1, d])?
            }
            _ => *zero.get_or_insert_with(|| g.constant(Tensor::zeros(vec![1, d]))),
        };
        rows.push(row);
    }
    let chars = g.concat(&rows, 0)?;
    g.concat(&[words, chars], 1)
}
