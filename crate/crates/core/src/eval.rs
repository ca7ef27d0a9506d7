//! Filtered ranking evaluation, MRR/Hits@K aggregation and the `(k, λ)`
//! validation sweep.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::EncoderParams;
use crate::error::{CmrError, Result};
use crate::featurize::FeatureSet;
use crate::kg::{EntityId, FilterIndex, RelationId, Triple, Vocabulary};
use crate::retrieval::{
    dedupe_per_target, interpolate, knn_search, p_es, p_ks, Distribution, InferenceConfig,
};
use crate::stores::{EntityStore, KnowledgeStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TieMode {
    /// Ties count half: the expected rank under random tie-breaking.
    #[default]
    Mean,
    Optimistic,
    Pessimistic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankResult {
    pub query: (EntityId, RelationId),
    pub target: EntityId,
    pub rank: f64,
    pub filtered: bool,
}

/// Rank of `target` against every entity except the other known tails of
/// the query.
pub fn filtered_rank(
    dist: &Distribution,
    query: (EntityId, RelationId),
    target: EntityId,
    filter: &FilterIndex,
    ties: TieMode,
) -> Result<RankResult> {
    let probs = dist.probs();
    let p_t = *probs
        .get(target.index())
        .ok_or_else(|| CmrError::UnknownEntity(target.to_string()))?;
    if !p_t.is_finite() {
        return Err(CmrError::numeric("filtered_rank", "target probability is not finite"));
    }
    let known = filter.lookup(query.0, query.1);
    let mut greater = 0usize;
    let mut equal = 0usize;
    for (i, &p) in probs.iter().enumerate() {
        let e = EntityId(i as u32);
        if e == target || known.contains(&e) {
            continue;
        }
        if p > p_t {
            greater += 1;
        } else if p == p_t {
            equal += 1;
        }
    }
    let rank = 1.0
        + greater as f64
        + match ties {
            TieMode::Mean => equal as f64 / 2.0,
            TieMode::Optimistic => 0.0,
            TieMode::Pessimistic => equal as f64,
        };
    Ok(RankResult {
        query,
        target,
        rank,
        filtered: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub mean_rank: f64,
    pub count: usize,
}

impl Metrics {
    /// Means over the given ranks, summed in input order.
    pub fn from_ranks(ranks: &[f64]) -> Self {
        if ranks.is_empty() {
            return Self::default();
        }
        let n = ranks.len() as f64;
        let frac = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Self {
            mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
            hits1: frac(1.0),
            hits3: frac(3.0),
            hits10: frac(10.0),
            mean_rank: ranks.iter().sum::<f64>() / n,
            count: ranks.len(),
        }
    }

    /// Aligned text table in the column order MRR, Hits@1, Hits@3, Hits@10.
    pub fn table(rows: &[(&str, Metrics)]) -> String {
        let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>8}",
            "model", "MRR", "Hits@1", "Hits@3", "Hits@10", "MR"
        );
        for (name, m) in rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>7.3}  {:>7.3}  {:>7.3}  {:>7.3}  {:>8.2}",
                name, m.mrr, m.hits1, m.hits3, m.hits10, m.mean_rank
            );
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    Full,
    EsOnly,
    KsOnly,
}

/// Frozen encoders plus both stores: everything needed to score a query.
pub struct Predictor<'a> {
    pub params: &'a EncoderParams,
    pub ks: &'a KnowledgeStore,
    pub es: &'a EntityStore,
    pub vocab: &'a Vocabulary,
    pub features: &'a FeatureSet,
}

impl Predictor<'_> {
    pub fn encode(&self, head: EntityId, relation: RelationId) -> Result<Vec<f64>> {
        if head.index() >= self.vocab.num_entities() {
            return Err(CmrError::UnknownEntity(head.to_string()));
        }
        let x = self.features.query(self.vocab, head, relation)?;
        self.params.encode_query(&x.values)
    }

    /// Output distribution for an already-encoded query.
    pub fn distribution_for(
        &self,
        q: &[f64],
        query: (EntityId, RelationId),
        cfg: &InferenceConfig,
        mode: EvalMode,
    ) -> Result<Distribution> {
        let n = self.vocab.num_entities();
        if self.es.len() != n {
            return Err(CmrError::DimensionMismatch {
                expected: n,
                actual: self.es.len(),
            });
        }
        let es = p_es(self.es, q, cfg.es_temperature);
        if mode == EvalMode::EsOnly {
            return Ok(es);
        }
        let hits = knn_search(self.ks, q, cfg.k, Some(query), cfg.distance);
        let ks = match p_ks(&dedupe_per_target(&hits), n) {
            Some(d) => d,
            None => {
                log::info!(
                    "no semantic neighbours for ({}, {}); using entity-store distribution",
                    query.0,
                    query.1
                );
                return Ok(es);
            }
        };
        match mode {
            EvalMode::KsOnly => Ok(ks),
            _ => interpolate(&ks, &es, cfg.lambda),
        }
    }

    pub fn distribution(
        &self,
        head: EntityId,
        relation: RelationId,
        cfg: &InferenceConfig,
        mode: EvalMode,
    ) -> Result<Distribution> {
        let q = self.encode(head, relation)?;
        self.distribution_for(&q, (head, relation), cfg, mode)
    }
}

/// Filtered ranks of every triple's tail; order follows `triples`.
pub fn rank_triples(
    predictor: &Predictor<'_>,
    triples: &[Triple],
    cfg: &InferenceConfig,
    mode: EvalMode,
    filter: &FilterIndex,
    ties: TieMode,
) -> Result<Vec<RankResult>> {
    cfg.validate()?;
    triples
        .par_iter()
        .map(|t| {
            let dist = predictor.distribution(t.head, t.relation, cfg, mode)?;
            filtered_rank(&dist, t.query(), t.tail, filter, ties)
        })
        .collect()
}

pub fn evaluate(
    predictor: &Predictor<'_>,
    triples: &[Triple],
    cfg: &InferenceConfig,
    mode: EvalMode,
    filter: &FilterIndex,
) -> Result<Metrics> {
    let ranks = rank_triples(predictor, triples, cfg, mode, filter, TieMode::Mean)?;
    let ranks: Vec<f64> = ranks.iter().map(|r| r.rank).collect();
    Ok(Metrics::from_ranks(&ranks))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub lambda: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_k: usize,
    pub best_lambda: f64,
    pub best: Metrics,
    pub grid: Vec<SweepRow>,
}

fn better(a: &SweepRow, b: &SweepRow) -> bool {
    (a.metrics.mrr, a.metrics.hits1) > (b.metrics.mrr, b.metrics.hits1)
        || ((a.metrics.mrr, a.metrics.hits1) == (b.metrics.mrr, b.metrics.hits1) && a.k < b.k)
}

/// Evaluate every `(k, λ)` pair on `triples` and keep the best by MRR, then
/// Hits@1, then smaller `k`.
pub fn sweep(
    predictor: &Predictor<'_>,
    triples: &[Triple],
    k_grid: &[usize],
    lambda_grid: &[f64],
    base: &InferenceConfig,
    filter: &FilterIndex,
) -> Result<SweepResult> {
    if k_grid.is_empty() || lambda_grid.is_empty() {
        return Err(CmrError::Config("sweep grids must be non-empty".into()));
    }
    let queries: Vec<Vec<f64>> = triples
        .par_iter()
        .map(|t| predictor.encode(t.head, t.relation))
        .collect::<Result<_>>()?;
    let mut grid = Vec::with_capacity(k_grid.len() * lambda_grid.len());
    for &k in k_grid {
        for &lambda in lambda_grid {
            let cfg = InferenceConfig {
                k,
                lambda,
                ..base.clone()
            };
            cfg.validate()?;
            let ranks: Vec<f64> = triples
                .par_iter()
                .zip(&queries)
                .map(|(t, q)| {
                    let dist = predictor.distribution_for(q, t.query(), &cfg, EvalMode::Full)?;
                    Ok(filtered_rank(&dist, t.query(), t.tail, filter, TieMode::Mean)?.rank)
                })
                .collect::<Result<_>>()?;
            grid.push(SweepRow {
                k,
                lambda,
                metrics: Metrics::from_ranks(&ranks),
            });
        }
    }
    let mut best = &grid[0];
    for row in &grid[1..] {
        if better(row, best) {
            best = row;
        }
    }
    Ok(SweepResult {
        best_k: best.k,
        best_lambda: best.lambda,
        best: best.metrics,
        grid: grid.clone(),
    })
}

pub fn write_sweep_csv(result: &SweepResult, writer: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["k", "lambda", "mrr", "hits1", "hits3", "hits10"])?;
    for r in &result.grid {
        w.write_record([
            r.k.to_string(),
            r.lambda.to_string(),
            format!("{:.6}", r.metrics.mrr),
            format!("{:.6}", r.metrics.hits1),
            format!("{:.6}", r.metrics.hits3),
            format!("{:.6}", r.metrics.hits10),
        ])?;
    }
    w.flush().map_err(|e| CmrError::io("sweep.csv", e))?;
    Ok(())
}
