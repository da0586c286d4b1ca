//! Mention-candidate matching network: cross-attention relevance, latent
//! and known type heads, and score fusion.

mod attention;
mod types;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attention::{
    attention_relevance, bidirectional_attention, mask_rows, similarity_matrix, AttentionOutput,
    AttentionParams, FeedForward,
};
pub use types::{
    known_type_scores, latent_type_distribution, latent_type_similarity, rank_score, FusionParams,
    TypeParams,
};

use crate::data::{CandidateEntity, MentionRecord};
use crate::encoder::{bilstm_encode, LstmParams};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::text::{embed_sequence, random_word_table, EmbeddingConfig, EmbeddingParams, TokenizedSeq, Vocabulary};

/// Model variants of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Word embeddings only, position-wise product interaction, no types.
    Base,
    /// Adds characters, cross-attention and latent type similarity.
    #[serde(alias = "nkt", alias = "base+lt")]
    BaseLt,
    /// Base plus the known-type classification loss.
    #[serde(alias = "base+kt")]
    BaseKt,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::BaseLt, Variant::BaseKt, Variant::Full];

    pub fn uses_chars(self) -> bool {
        matches!(self, Variant::BaseLt | Variant::Full)
    }

    pub fn cross_attention(self) -> bool {
        self.uses_chars()
    }

    /// Whether the latent similarity enters the ranking score.
    pub fn latent_in_score(self) -> bool {
        self.uses_chars()
    }

    pub fn known_types(self) -> bool {
        matches!(self, Variant::BaseKt | Variant::Full)
    }

    pub fn has_latent(self) -> bool {
        self != Variant::Base
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::BaseLt => "base-lt",
            Variant::BaseKt => "base-kt",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Variant::Base),
            "base-lt" | "base+lt" | "lt" | "nkt" => Ok(Variant::BaseLt),
            "base-kt" | "base+kt" | "kt" => Ok(Variant::BaseKt),
            "full" | "latte" => Ok(Variant::Full),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected base, base-lt, base-kt, full or nkt)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub max_len: usize,
    pub embedding: EmbeddingConfig,
    pub hidden: usize,
    pub lstm_layers: usize,
    pub ff_hidden: Vec<usize>,
    pub latent_types: usize,
    pub known_types: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            max_len: 16,
            embedding: EmbeddingConfig::default(),
            hidden: 32,
            lstm_layers: 1,
            ff_hidden: vec![128],
            latent_types: 64,
            known_types: 8,
        }
    }
}

impl ModelConfig {
    /// Embedding settings with the character path set by the variant.
    pub fn embedding_config(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            use_chars: self.variant.uses_chars(),
            ..self.embedding.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_len", self.max_len),
            ("hidden", self.hidden),
            ("lstm_layers", self.lstm_layers),
            ("latent_types", self.latent_types),
            ("known_types", self.known_types),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.ff_hidden.contains(&0) {
            return Err(Error::Config("ff_hidden widths must be positive".into()));
        }
        self.embedding_config().validate()
    }
}

/// Per-text encoder outputs inside one graph.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[L, 2h]` contextual states, zero on masked rows.
    pub u: Var,
    pub mask: Vec<bool>,
    /// `(v, v_hat)` latent logits and distribution.
    pub latent: Option<(Var, Var)>,
    /// Known-type scores `y`.
    pub known: Option<Var>,
}

/// Graph nodes of one mention-candidate pair.
#[derive(Debug, Clone, Copy)]
pub struct PairOutput {
    pub f: Var,
    pub g: Option<Var>,
    pub r: Var,
}

/// Memoised encodings within one graph.
#[derive(Debug, Default)]
pub struct ForwardCache {
    chars: HashMap<Vec<usize>, Var>,
    texts: HashMap<TokenizedSeq, Encoded>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub entity_id: String,
    pub f: f64,
    /// Latent type similarity, when the variant has a latent head.
    pub g: Option<f64>,
    pub r: f64,
    /// Softmax of the candidate's known-type scores.
    pub type_distribution: Option<Vec<f64>>,
}

/// Parameters and structure of a full matching model.
#[derive(Debug, Clone)]
pub struct LatteModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub embed: EmbeddingParams,
    pub encoder: LstmParams,
    pub attention: AttentionParams,
    pub types: Option<TypeParams>,
    pub fusion: FusionParams,
}

impl LatteModel {
    /// Registers all parameters. `word_table` defaults to a random table.
    pub fn new(
        config: ModelConfig,
        vocab: Vocabulary,
        word_table: Option<Tensor>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let emb_cfg = config.embedding_config();
        let table = word_table.unwrap_or_else(|| random_word_table(&vocab, emb_cfg.word_dim, rng));
        let mut store = ParamStore::new();
        let embed = EmbeddingParams::register(&mut store, &vocab, &emb_cfg, table, rng)?;
        let encoder = LstmParams::register(
            &mut store,
            emb_cfg.output_dim(),
            config.hidden,
            config.lstm_layers,
            rng,
        )?;
        let width = encoder.output_dim();
        let len = config.max_len;
        let variant = config.variant;
        let w_a = variant.cross_attention().then(|| {
            let bound = 1.0 / ((3 * width) as f64).sqrt();
            store.register("attention.w_a", Tensor::uniform(vec![3 * width, 1], bound, rng))
        });
        let ff_input = if variant.cross_attention() { len * 4 * width } else { len * width };
        let ff = FeedForward::register(&mut store, "relevance", ff_input, &config.ff_hidden, rng)?;
        let types = if variant.has_latent() {
            Some(TypeParams::register(
                &mut store,
                len * width,
                config.latent_types,
                variant.known_types().then_some(config.known_types),
                rng,
            )?)
        } else {
            None
        };
        let fusion = FusionParams::register(&mut store, variant.latent_in_score());
        Ok(Self {
            config,
            vocab,
            store,
            embed,
            encoder,
            attention: AttentionParams { w_a, ff },
            types,
            fusion,
        })
    }

    pub fn prepare_mention(&self, mention: &MentionRecord) -> Result<TokenizedSeq> {
        let tokens = mention.sequence_tokens(self.config.max_len);
        if tokens.is_empty() {
            return Err(Error::EmptyInput("mention has no tokens"));
        }
        Ok(self.vocab.encode(&tokens, self.config.max_len))
    }

    pub fn prepare_entity(&self, entity: &CandidateEntity) -> Result<TokenizedSeq> {
        let tokens = entity.tokens();
        if tokens.is_empty() {
            return Err(Error::EmptyInput("entity name has no tokens"));
        }
        Ok(self.vocab.encode(&tokens, self.config.max_len))
    }

    /// Embeds and encodes one sequence, reusing earlier work in `cache`.
    pub fn encode(&self, g: &mut Graph<'_>, seq: &TokenizedSeq, cache: &mut ForwardCache) -> Result<Encoded> {
        if let Some(e) = cache.texts.get(seq) {
            return Ok(e.clone());
        }
        if seq.max_len() != self.config.max_len {
            return Err(Error::dim("encode", &[seq.max_len()], &[self.config.max_len]));
        }
        let emb = embed_sequence(g, &self.embed, seq, &mut cache.chars)?;
        let u = bilstm_encode(g, emb, &seq.mask, &self.encoder)?;
        let mut latent = None;
        let mut known = None;
        if let Some(types) = &self.types {
            let (v, v_hat) = latent_type_distribution(g, u, types)?;
            if types.known.is_some() {
                known = Some(known_type_scores(g, v, types)?);
            }
            latent = Some((v, v_hat));
        }
        let e = Encoded {
            u,
            mask: seq.mask.clone(),
            latent,
            known,
        };
        cache.texts.insert(seq.clone(), e.clone());
        Ok(e)
    }

    /// Relevance, latent similarity and fused score of an encoded pair.
    pub fn pair(&self, g: &mut Graph<'_>, mention: &Encoded, candidate: &Encoded) -> Result<PairOutput> {
        let x = match self.attention.w_a {
            Some(w_a) => {
                let w_a = g.param(w_a);
                let s = similarity_matrix(g, candidate.u, mention.u, w_a)?;
                bidirectional_attention(g, s, candidate.u, mention.u, &candidate.mask, &mention.mask)?.x
            }
            None => g.mul(mention.u, candidate.u)?,
        };
        let f = attention_relevance(g, x, &self.attention.ff)?;
        let sim = match (mention.latent, candidate.latent) {
            (Some((_, p)), Some((_, c))) => Some(latent_type_similarity(g, p, c)?),
            _ => None,
        };
        let r = rank_score(g, f, sim, &self.fusion)?;
        Ok(PairOutput { f, g: sim, r })
    }

    /// Scores each candidate against the mention, in input order.
    pub fn score_candidates(
        &self,
        mention: &MentionRecord,
        candidates: &[CandidateEntity],
    ) -> Result<Vec<ScoredCandidate>> {
        let m_seq = self.prepare_mention(mention)?;
        let c_seqs = candidates
            .iter()
            .map(|c| self.prepare_entity(c))
            .collect::<Result<Vec<_>>>()?;
        self.score_sequences(&m_seq, candidates, &c_seqs)
    }

    pub fn score_sequences(
        &self,
        mention: &TokenizedSeq,
        candidates: &[CandidateEntity],
        seqs: &[TokenizedSeq],
    ) -> Result<Vec<ScoredCandidate>> {
        let mut g = Graph::with_params(&self.store);
        let mut cache = ForwardCache::default();
        let m = self.encode(&mut g, mention, &mut cache)?;
        let mut out = Vec::with_capacity(candidates.len());
        for (entity, seq) in candidates.iter().zip(seqs) {
            let c = self.encode(&mut g, seq, &mut cache)?;
            let p = self.pair(&mut g, &m, &c)?;
            let type_distribution = match c.known {
                Some(y) => {
                    let d = g.softmax(y)?;
                    Some(g.value(d).data().to_vec())
                }
                None => None,
            };
            out.push(ScoredCandidate {
                entity_id: entity.entity_id.clone(),
                f: g.item(p.f),
                g: p.g.map(|v| g.item(v)),
                r: g.item(p.r),
                type_distribution,
            });
        }
        Ok(out)
    }

    pub fn score_pair(&self, mention: &MentionRecord, candidate: &CandidateEntity) -> Result<ScoredCandidate> {
        let mut scored = self.score_candidates(mention, std::slice::from_ref(candidate))?;
        Ok(scored.remove(0))
    }
}
