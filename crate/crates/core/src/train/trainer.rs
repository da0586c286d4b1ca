use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, PreparedInstance, RunConfig};
use crate::error::{Error, Result};
use crate::losses::{joint_loss, InstanceLabels, InstanceOutputs, JointLossConfig};
use crate::matchnet::{ForwardCache, LatteModel};
use crate::metrics::Metrics;
use crate::tensor::{Adam, Graph};

/// Metrics logged after an epoch; epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub dev: Option<Metrics>,
    pub train: Option<Metrics>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best dev epoch (the last epoch without dev data).
    pub model: LatteModel,
    pub optimizer: Adam,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.history.iter().find(|r| r.epoch == self.best_epoch)
    }
}

/// Minibatch Adam over the mean joint loss of each batch, with per-epoch
/// dev evaluation, best-dev snapshotting and early stopping.
pub fn train(
    config: &RunConfig,
    mut model: LatteModel,
    train_set: &[PreparedInstance],
    dev_set: &[PreparedInstance],
) -> Result<TrainOutcome> {
    config.validate()?;
    let loss_cfg = config.joint_loss();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut optimizer = Adam::new(config.optimizer);
    let mut history = vec![record(config, &model, 0, None, train_set, dev_set)?];
    log_epoch(&history[0]);
    let mut best_epoch = 0;
    let mut best_p1 = history[0].dev.map(|m| m.p_at_1);
    let mut best_store = model.store.clone();
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        if train_set.is_empty() {
            return Err(Error::EmptyInput("training split"));
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&PreparedInstance> = chunk.iter().map(|&i| &train_set[i]).collect();
            let loss = batch_step(&mut model, &mut optimizer, &batch, &loss_cfg)
                .map_err(|e| divergence(e, epoch, b))?;
            total += loss * batch.len() as f64;
        }
        let rec = record(
            config,
            &model,
            epoch,
            Some(total / train_set.len() as f64),
            train_set,
            dev_set,
        )?;
        log_epoch(&rec);
        let p1 = rec.dev.map(|m| m.p_at_1);
        history.push(rec);
        match (p1, best_p1) {
            (Some(p), Some(best)) if p <= best => stale += 1,
            _ => {
                best_p1 = p1;
                best_epoch = epoch;
                best_store = model.store.clone();
                stale = 0;
            }
        }
        if config.patience > 0 && stale >= config.patience {
            log::info!("early stop after epoch {epoch}, best epoch {best_epoch}");
            break;
        }
    }
    model.store = best_store;
    Ok(TrainOutcome {
        model,
        optimizer,
        history,
        best_epoch,
    })
}

fn divergence(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(_) | Error::Divergence(_) => {
            Error::Divergence(format!("epoch {epoch}, batch {batch}: {e}"))
        }
        other => other,
    }
}

fn record(
    config: &RunConfig,
    model: &LatteModel,
    epoch: usize,
    train_loss: Option<f64>,
    train_set: &[PreparedInstance],
    dev_set: &[PreparedInstance],
) -> Result<EpochRecord> {
    let dev = if dev_set.is_empty() {
        None
    } else {
        Some(Metrics::compute(&evaluate(model, dev_set)?)?)
    };
    let train = if config.eval_train && !train_set.is_empty() {
        Some(Metrics::compute(&evaluate(model, train_set)?)?)
    } else {
        None
    };
    Ok(EpochRecord {
        epoch,
        train_loss,
        dev,
        train,
    })
}

fn log_epoch(r: &EpochRecord) {
    let fmt = |m: Option<Metrics>| m.map_or("-".to_string(), |m| format!("{:.4}/{:.4}", m.p_at_1, m.map));
    log::info!(
        "epoch {} loss {} dev P@1/MAP {} train P@1/MAP {}",
        r.epoch,
        r.train_loss.map_or("-".to_string(), |l| format!("{l:.6}")),
        fmt(r.dev),
        fmt(r.train)
    );
}

/// One optimizer update on the mean joint loss of `batch`.
pub(crate) fn batch_step(
    model: &mut LatteModel,
    optimizer: &mut Adam,
    batch: &[&PreparedInstance],
    loss_cfg: &JointLossConfig,
) -> Result<f64> {
    let (value, grads) = {
        let mut g = Graph::with_params(&model.store);
        let loss = batch_loss(model, &mut g, batch, loss_cfg)?;
        (g.item(loss), g.backward(loss)?)
    };
    if !value.is_finite() {
        return Err(Error::Divergence(format!("loss is {value}")));
    }
    grads.accumulate_into(&mut model.store)?;
    optimizer.step(&mut model.store)?;
    model.store.zero_grad();
    if !model.store.all_finite() {
        return Err(Error::Divergence("parameters became non-finite".into()));
    }
    Ok(value)
}

/// Mean joint loss of the instances, built into `g`.
pub(crate) fn batch_loss(
    model: &LatteModel,
    g: &mut Graph<'_>,
    batch: &[&PreparedInstance],
    loss_cfg: &JointLossConfig,
) -> Result<crate::tensor::Var> {
    let mut cache = ForwardCache::default();
    let mut totals = Vec::with_capacity(batch.len());
    for inst in batch {
        let m = model.encode(g, &inst.mention, &mut cache)?;
        let mut rs = Vec::with_capacity(inst.candidates.len());
        let mut types = Vec::new();
        for c in &inst.candidates {
            let e = model.encode(g, &c.seq, &mut cache)?;
            rs.push(model.pair(g, &m, &e)?.r);
            types.extend(e.known);
        }
        let outputs = InstanceOutputs {
            r_pos: rs[0],
            r_negs: rs[1..].to_vec(),
            mention_types: m.known,
            candidate_types: types,
        };
        let labels = match &inst.mention_label {
            Some(mention) => Some(InstanceLabels {
                mention: mention.clone(),
                candidates: inst
                    .candidates
                    .iter()
                    .map(|c| {
                        c.label
                            .clone()
                            .ok_or_else(|| Error::Label(format!("entity {} has no label", c.entity.entity_id)))
                    })
                    .collect::<Result<_>>()?,
            }),
            None => None,
        };
        let loss = joint_loss(g, &outputs, labels.as_ref(), loss_cfg)?;
        totals.push(g.reshape(loss.total, &[1])?);
    }
    let all = g.concat(&totals, 0)?;
    g.mean(all)
}
