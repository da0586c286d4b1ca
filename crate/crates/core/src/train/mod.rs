//! Run configuration, training loop, checkpoints, evaluation and
//! prediction.

mod checkpoint;
mod config;
mod trainer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{LossSettings, PathsConfig, RunConfig};
pub use trainer::{train, EpochRecord, TrainOutcome};

use crate::data::{
    generate_candidates, CandidateEntity, Dataset, KnowledgeBase, MentionRecord, Split, TfIdfIndex,
    DEFAULT_NGRAMS,
};
use crate::error::{Error, Result};
use crate::losses::KnownTypeLabel;
use crate::matchnet::{LatteModel, ScoredCandidate};
use crate::metrics::RankingResult;
use crate::text::{build_vocab, load_pretrained, TokenizedSeq, Vocabulary};

/// Vocabulary over the training mentions (with context) and all entity names.
pub fn build_vocabulary(ds: &Dataset, max_len: usize, min_count: usize) -> Result<Vocabulary> {
    let mut corpus: Vec<Vec<String>> = ds
        .split(Split::Train)
        .map(|m| m.sequence_tokens(max_len))
        .collect();
    corpus.extend(ds.kb.iter().map(CandidateEntity::tokens));
    build_vocab(&corpus, min_count)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCandidate {
    pub entity: CandidateEntity,
    pub seq: TokenizedSeq,
    pub label: Option<KnownTypeLabel>,
}

/// A linking instance resolved against a model's vocabulary. The positive
/// candidate comes first.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInstance {
    pub mention_id: String,
    pub gold: String,
    pub mention: TokenizedSeq,
    pub mention_label: Option<KnownTypeLabel>,
    pub candidates: Vec<PreparedCandidate>,
}

/// Retrieves candidates for every mention of `split` and tokenises them.
/// Known-type labels are attached when the model has a known-type head.
pub fn prepare_split(
    model: &LatteModel,
    ds: &Dataset,
    index: &TfIdfIndex,
    split: Split,
    negatives: usize,
) -> Result<Vec<PreparedInstance>> {
    let mentions: Vec<&MentionRecord> = ds.split(split).collect();
    mentions
        .into_iter()
        .map(|m| prepare_instance(model, &ds.kb, index, m, negatives))
        .collect()
}

pub fn prepare_instance(
    model: &LatteModel,
    kb: &KnowledgeBase,
    index: &TfIdfIndex,
    mention: &MentionRecord,
    negatives: usize,
) -> Result<PreparedInstance> {
    let inst = generate_candidates(mention, kb, index, negatives)?;
    let labelled = model.config.variant.known_types();
    let k = model.config.known_types;
    let label = |types, what: &str| -> Result<Option<KnownTypeLabel>> {
        if !labelled {
            return Ok(None);
        }
        KnownTypeLabel::new(types, k)
            .map(Some)
            .map_err(|e| Error::Label(format!("{what} of mention {}: {e}", mention.mention_id)))
    };
    let mention_label = label(&mention.known_type_ids, "mention")?;
    let mut candidates = Vec::with_capacity(negatives + 1);
    for entity in inst.candidates() {
        candidates.push(PreparedCandidate {
            seq: model.prepare_entity(entity)?,
            label: label(&entity.known_type_ids, &format!("entity {}", entity.entity_id))?,
            entity: entity.clone(),
        });
    }
    Ok(PreparedInstance {
        mention_id: mention.mention_id.clone(),
        gold: mention.gold_entity_id.clone(),
        mention: model.prepare_mention(mention)?,
        mention_label,
        candidates,
    })
}

pub fn build_index(kb: &KnowledgeBase) -> Result<TfIdfIndex> {
    TfIdfIndex::build(kb, DEFAULT_NGRAMS)
}

/// Scores every candidate of one instance, in candidate order.
pub fn score_instance(model: &LatteModel, inst: &PreparedInstance) -> Result<Vec<ScoredCandidate>> {
    let entities: Vec<CandidateEntity> = inst.candidates.iter().map(|c| c.entity.clone()).collect();
    let seqs: Vec<TokenizedSeq> = inst.candidates.iter().map(|c| c.seq.clone()).collect();
    model.score_sequences(&inst.mention, &entities, &seqs)
}

/// Ranks instances with an arbitrary scorer returning one score per
/// candidate. Instances are scored in parallel; results keep input order.
pub fn evaluate_with<F>(instances: &[PreparedInstance], scorer: F) -> Result<Vec<RankingResult>>
where
    F: Fn(&PreparedInstance) -> Result<Vec<f64>> + Sync,
{
    instances
        .par_iter()
        .map(|inst| {
            let scores = scorer(inst)?;
            if scores.len() != inst.candidates.len() {
                return Err(Error::Contract(format!(
                    "{} scores for {} candidates",
                    scores.len(),
                    inst.candidates.len()
                )));
            }
            let pairs = inst
                .candidates
                .iter()
                .zip(scores)
                .map(|(c, s)| (c.entity.entity_id.clone(), s))
                .collect();
            RankingResult::new(inst.mention_id.clone(), &inst.gold, pairs)
        })
        .collect()
}

pub fn evaluate(model: &LatteModel, instances: &[PreparedInstance]) -> Result<Vec<RankingResult>> {
    evaluate_with(instances, |inst| {
        Ok(score_instance(model, inst)?.into_iter().map(|s| s.r).collect())
    })
}

/// Retrieves `negatives + 1` candidates by TF-IDF and returns the best
/// `top_k` by fused score (score descending, id ascending).
pub fn predict(
    model: &LatteModel,
    kb: &KnowledgeBase,
    index: &TfIdfIndex,
    mention: &MentionRecord,
    negatives: usize,
    top_k: usize,
) -> Result<Vec<ScoredCandidate>> {
    if mention.text.trim().is_empty() {
        return Err(Error::EmptyInput("mention text"));
    }
    let candidates = index
        .rank(&mention.text)?
        .into_iter()
        .take(negatives + 1)
        .map(|(id, _)| {
            kb.get(id)
                .cloned()
                .ok_or_else(|| Error::Contract(format!("index entity {id} missing from knowledge base")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut scored = model.score_candidates(mention, &candidates)?;
    scored.sort_by(|a, b| b.r.total_cmp(&a.r).then_with(|| a.entity_id.cmp(&b.entity_id)));
    scored.truncate(top_k);
    Ok(scored)
}

/// Builds the vocabulary and model for `config`, retrieves candidates and
/// trains on the train split with dev-based model selection.
pub fn fit(config: &RunConfig, ds: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let model = init_model(config, ds)?;
    let index = build_index(&ds.kb)?;
    let train_set = prepare_split(&model, ds, &index, Split::Train, config.negatives)?;
    let dev_set = prepare_split(&model, ds, &index, Split::Dev, config.negatives)?;
    log::info!(
        "seed {}: {} train / {} dev instances, {} parameters",
        config.seed,
        train_set.len(),
        dev_set.len(),
        model.store.num_scalars()
    );
    train(config, model, &train_set, &dev_set)
}

/// Freshly initialised model for `config` over the vocabulary of `ds`.
pub fn init_model(config: &RunConfig, ds: &Dataset) -> Result<LatteModel> {
    let vocab = build_vocabulary(ds, config.model.max_len, config.min_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let table = match &config.paths.embeddings {
        Some(path) => {
            let pre = load_pretrained(path, &vocab, &mut rng)?;
            log::info!("pretrained vectors cover all but {:.2}% of the vocabulary", 100.0 * pre.oov_rate);
            Some(pre.table)
        }
        None => None,
    };
    let mut model_cfg = config.model.clone();
    if let Some(table) = &table {
        model_cfg.embedding.word_dim = table.shape()[1];
    }
    LatteModel::new(model_cfg, vocab, table, &mut rng)
}
