//! Known-type cross-entropy, max-margin ranking loss and their joint form.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Gold known types as a uniform target distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct KnownTypeLabel {
    target: Vec<f64>,
}

impl KnownTypeLabel {
    pub fn new(gold: &BTreeSet<usize>, num_types: usize) -> Result<Self> {
        if gold.is_empty() {
            return Err(Error::Label("no gold known type".into()));
        }
        if let Some(&t) = gold.iter().find(|&&t| t >= num_types) {
            return Err(Error::Label(format!("type id {t} outside 0..{num_types}")));
        }
        let w = 1.0 / gold.len() as f64;
        let mut target = vec![0.0; num_types];
        for &t in gold {
            target[t] = w;
        }
        Ok(Self { target })
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointLossConfig {
    pub margin: f64,
    /// Weight of the type terms.
    pub lambda: f64,
    pub enable_latent: bool,
    pub enable_known_type: bool,
}

impl Default for JointLossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            lambda: 1.0,
            enable_latent: true,
            enable_known_type: true,
        }
    }
}

impl JointLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// `-sum_j y_j log softmax(scores)_j`.
pub fn type_loss(g: &mut Graph<'_>, label: &KnownTypeLabel, scores: Var) -> Result<Var> {
    let n = g.value(scores).numel();
    if n != label.target.len() {
        return Err(Error::dim("type_loss", &[n], &[label.target.len()]));
    }
    let log_p = g.log_softmax(scores)?;
    let shape = g.shape(log_p).to_vec();
    let y = g.constant(Tensor::new(shape, label.target.clone())?);
    let weighted = g.mul(y, log_p)?;
    let total = g.sum(weighted)?;
    g.scale(total, -1.0)
}

/// `sum_neg max(0, M - r_pos + r_neg)`.
pub fn ranking_loss(g: &mut Graph<'_>, r_pos: Var, r_negs: &[Var], margin: f64) -> Result<Var> {
    if r_negs.is_empty() {
        return Err(Error::Contract("ranking loss needs at least one negative".into()));
    }
    let mut terms = Vec::with_capacity(r_negs.len());
    for &neg in r_negs {
        let d = g.sub(neg, r_pos)?;
        let d = g.add_scalar(d, margin)?;
        let d = g.relu(d)?;
        terms.push(g.reshape(d, &[1])?);
    }
    let all = g.concat(&terms, 0)?;
    g.sum(all)
}

/// Score and type nodes of one instance. `candidate_types` follows the
/// candidate order of the instance.
#[derive(Debug, Clone)]
pub struct InstanceOutputs {
    pub r_pos: Var,
    pub r_negs: Vec<Var>,
    pub mention_types: Option<Var>,
    pub candidate_types: Vec<Var>,
}

/// Gold labels of one instance, candidates in the same order as the scores.
#[derive(Debug, Clone)]
pub struct InstanceLabels {
    pub mention: KnownTypeLabel,
    pub candidates: Vec<KnownTypeLabel>,
}

#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub total: Var,
    pub rank: Var,
    pub mention_type: Option<Var>,
    pub candidate_type: Option<Var>,
}

/// `L = L_rank + lambda (L_type(mention) + mean_c L_type(c))`. Type terms are
/// skipped when the known-type head is disabled or `lambda` is zero.
pub fn joint_loss(
    g: &mut Graph<'_>,
    outputs: &InstanceOutputs,
    labels: Option<&InstanceLabels>,
    config: &JointLossConfig,
) -> Result<JointLoss> {
    let rank = ranking_loss(g, outputs.r_pos, &outputs.r_negs, config.margin)?;
    let mut out = JointLoss {
        total: rank,
        rank,
        mention_type: None,
        candidate_type: None,
    };
    if !config.enable_known_type || config.lambda == 0.0 {
        return Ok(out);
    }
    let labels =
        labels.ok_or_else(|| Error::Contract("known-type loss enabled without labels".into()))?;
    let scores = outputs
        .mention_types
        .ok_or_else(|| Error::Contract("known-type loss enabled without type scores".into()))?;
    let lm = type_loss(g, &labels.mention, scores)?;
    if outputs.candidate_types.len() != labels.candidates.len() || labels.candidates.is_empty() {
        return Err(Error::Contract(format!(
            "{} candidate type scores for {} labels",
            outputs.candidate_types.len(),
            labels.candidates.len()
        )));
    }
    let mut per = Vec::with_capacity(labels.candidates.len());
    for (&s, label) in outputs.candidate_types.iter().zip(&labels.candidates) {
        let l = type_loss(g, label, s)?;
        per.push(g.reshape(l, &[1])?);
    }
    let per = g.concat(&per, 0)?;
    let lc = g.mean(per)?;
    let types = g.add(lm, lc)?;
    let types = g.scale(types, config.lambda)?;
    out.total = g.add(rank, types)?;
    out.mention_type = Some(lm);
    out.candidate_type = Some(lc);
    Ok(out)
}
