//! Ranking metrics: precision at one and mean average precision.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Candidates of one mention ordered by score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub mention_id: String,
    /// `(candidate id, score)`, score descending then id ascending.
    pub ranked: Vec<(String, f64)>,
    /// 1-based rank of the gold candidate.
    pub rank_of_gold: usize,
}

impl RankingResult {
    /// Sorts `scores` and locates `gold`, which must occur exactly once.
    pub fn new(mention_id: impl Into<String>, gold: &str, mut scores: Vec<(String, f64)>) -> Result<Self> {
        let mention_id = mention_id.into();
        if scores.iter().any(|(_, s)| !s.is_finite()) {
            return Err(Error::NonFinite("ranking scores"));
        }
        let hits = scores.iter().filter(|(id, _)| id == gold).count();
        if hits != 1 {
            return Err(Error::Contract(format!(
                "gold {gold} appears {hits} times among the candidates of {mention_id}"
            )));
        }
        scores.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let rank_of_gold = scores.iter().position(|(id, _)| id == gold).unwrap_or(0) + 1;
        Ok(Self {
            mention_id,
            ranked: scores,
            rank_of_gold,
        })
    }
}

pub fn precision_at_1(results: &[RankingResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyInput("precision_at_1 over no results"));
    }
    let hits = results.iter().filter(|r| r.rank_of_gold == 1).count();
    Ok(hits as f64 / results.len() as f64)
}

/// With a single relevant candidate per mention, AP is `1 / rank_of_gold`.
pub fn mean_average_precision(results: &[RankingResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyInput("mean_average_precision over no results"));
    }
    let total: f64 = results.iter().map(|r| 1.0 / r.rank_of_gold as f64).sum();
    Ok(total / results.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub p_at_1: f64,
    pub map: f64,
    pub count: usize,
}

impl Metrics {
    pub fn compute(results: &[RankingResult]) -> Result<Self> {
        Ok(Self {
            p_at_1: precision_at_1(results)?,
            map: mean_average_precision(results)?,
            count: results.len(),
        })
    }
}

/// Tab-separated `metric split value` lines, values to four decimals.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<(String, Metrics)>,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "metric\tsplit\tvalue")?;
        for (split, m) in &self.rows {
            writeln!(f, "P@1\t{split}\t{:.4}", m.p_at_1)?;
            writeln!(f, "MAP\t{split}\t{:.4}", m.map)?;
        }
        Ok(())
    }
}
