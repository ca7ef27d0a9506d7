//! Exact semantic-neighbour retrieval and the retrieval/entity/interpolated
//! prediction distributions.

use serde::{Deserialize, Serialize};

use crate::error::{CmrError, Result};
use crate::kg::{EntityId, RelationId};
use crate::stores::{EntityStore, KnowledgeStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub k: usize,
    pub lambda: f64,
    /// Temperature of the softmax over entity-store cosine similarities.
    pub es_temperature: f64,
    pub distance: DistanceKind,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            k: 32,
            lambda: 0.95,
            es_temperature: 1.0,
            distance: DistanceKind::Euclidean,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(CmrError::Config("k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(CmrError::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.es_temperature > 0.0) {
            return Err(CmrError::Config("es_temperature must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborHit {
    pub distance: f64,
    pub target: EntityId,
    pub source_key: (EntityId, RelationId),
    pub row: usize,
}

fn hit_order(a: &NeighborHit, b: &NeighborHit) -> std::cmp::Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then(a.target.cmp(&b.target))
        .then(a.row.cmp(&b.row))
}

fn distance(q: &[f64], key: &[f32], kind: DistanceKind) -> f64 {
    let sq: f64 = q
        .iter()
        .zip(key)
        .map(|(a, &b)| {
            let d = a - f64::from(b);
            d * d
        })
        .sum();
    match kind {
        DistanceKind::Euclidean => sq.sqrt(),
        DistanceKind::SquaredEuclidean => sq,
    }
}

/// Exact `k` nearest records, skipping records whose source query equals
/// `exclude_key`. Ties break on target id, then store row.
pub fn knn_search(
    ks: &KnowledgeStore,
    q: &[f64],
    k: usize,
    exclude_key: Option<(EntityId, RelationId)>,
    kind: DistanceKind,
) -> Vec<NeighborHit> {
    let mut hits: Vec<NeighborHit> = (0..ks.len())
        .filter(|&row| Some(ks.source_keys[row]) != exclude_key)
        .map(|row| NeighborHit {
            distance: distance(q, ks.key(row), kind),
            target: ks.values[row],
            source_key: ks.source_keys[row],
            row,
        })
        .collect();
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, hit_order);
        hits.truncate(k);
    }
    hits.sort_by(hit_order);
    hits
}

/// Keep the nearest hit per target, preserving order.
pub fn dedupe_per_target(hits: &[NeighborHit]) -> Vec<NeighborHit> {
    let mut seen = std::collections::HashSet::new();
    hits.iter().filter(|h| seen.insert(h.target)).copied().collect()
}

/// Probability vector over the entity vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution(pub Vec<f64>);

impl Distribution {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn prob(&self, e: EntityId) -> f64 {
        self.0[e.index()]
    }

    pub fn argmax(&self) -> Option<EntityId> {
        self.top(1).first().map(|&(e, _)| e)
    }

    /// The `n` most probable entities, ties broken by ascending id.
    pub fn top(&self, n: usize) -> Vec<(EntityId, f64)> {
        let mut idx: Vec<usize> = (0..self.0.len()).collect();
        idx.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        idx.into_iter()
            .take(n)
            .map(|i| (EntityId(i as u32), self.0[i]))
            .collect()
    }
}

/// Softmax over negative distances of deduplicated hits; `None` when there
/// are no hits.
pub fn p_ks(hits: &[NeighborHit], num_entities: usize) -> Option<Distribution> {
    if hits.is_empty() {
        return None;
    }
    let min = hits.iter().map(|h| h.distance).fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = hits.iter().map(|h| (-(h.distance - min)).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut probs = vec![0.0; num_entities];
    for (h, w) in hits.iter().zip(weights) {
        probs[h.target.index()] += w / z;
    }
    Some(Distribution(probs))
}

/// Softmax over `q·e / T` for every entity in the store.
pub fn p_es(es: &EntityStore, q: &[f64], temperature: f64) -> Distribution {
    let logits: Vec<f64> = (0..es.len())
        .map(|i| {
            let key = es.key(EntityId(i as u32));
            q.iter().zip(key).map(|(a, &b)| a * f64::from(b)).sum::<f64>() / temperature
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    Distribution(w.into_iter().map(|v| v / z).collect())
}

/// `λ·p_ks + (1−λ)·p_es`.
pub fn interpolate(ks: &Distribution, es: &Distribution, lambda: f64) -> Result<Distribution> {
    if ks.len() != es.len() {
        return Err(CmrError::DimensionMismatch {
            expected: es.len(),
            actual: ks.len(),
        });
    }
    Ok(Distribution(
        ks.0.iter()
            .zip(&es.0)
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binio::HASH_LEN;

    fn hit(d: f64, t: u32) -> NeighborHit {
        NeighborHit {
            distance: d,
            target: EntityId(t),
            source_key: (EntityId(0), RelationId(0)),
            row: 0,
        }
    }

    fn ks_from(keys: &[[f32; 2]], values: &[u32], sources: &[(u32, u32)]) -> KnowledgeStore {
        KnowledgeStore {
            dim: 2,
            keys: keys.iter().flatten().copied().collect(),
            values: values.iter().map(|&v| EntityId(v)).collect(),
            source_keys: sources
                .iter()
                .map(|&(h, r)| (EntityId(h), RelationId(r)))
                .collect(),
            encoder_hash: [0; HASH_LEN],
        }
    }

    #[test]
    fn fewer_hits_than_k() {
        let ks = ks_from(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]], &[0, 1, 2], &[(0, 0), (1, 0), (2, 0)]);
        let hits = knn_search(&ks, &[1.0, 0.0], 5, None, DistanceKind::Euclidean);
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0].target, EntityId(0));
        assert_eq!(hits[1].target, EntityId(2));
    }

    #[test]
    fn same_query_record_is_excluded() {
        let ks = ks_from(&[[1.0, 0.0], [0.0, 1.0]], &[5, 6], &[(3, 1), (4, 1)]);
        let hits = knn_search(
            &ks,
            &[1.0, 0.0],
            2,
            Some((EntityId(3), RelationId(1))),
            DistanceKind::Euclidean,
        );
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].target, EntityId(6));
        let empty = knn_search(
            &ks_from(&[[1.0, 0.0]], &[5], &[(3, 1)]),
            &[1.0, 0.0],
            2,
            Some((EntityId(3), RelationId(1))),
            DistanceKind::Euclidean,
        );
        assert!(empty.is_empty());
    }

    #[test]
    fn duplicate_keys_tie_break_on_target_then_row() {
        let ks = ks_from(&[[0.0, 1.0]; 3], &[9, 4, 4], &[(0, 0), (1, 0), (2, 0)]);
        let hits = knn_search(&ks, &[1.0, 0.0], 3, None, DistanceKind::Euclidean);
        let order: Vec<(u32, usize)> = hits.iter().map(|h| (h.target.0, h.row)).collect();
        assert_eq!(order, vec![(4, 1), (4, 2), (9, 0)]);
    }

    #[test]
    fn squared_distance_option() {
        let ks = ks_from(&[[0.0, 1.0]], &[0], &[(0, 0)]);
        let e = knn_search(&ks, &[1.0, 0.0], 1, None, DistanceKind::Euclidean);
        let s = knn_search(&ks, &[1.0, 0.0], 1, None, DistanceKind::SquaredEuclidean);
        assert!((e[0].distance - 2f64.sqrt()).abs() < 1e-12);
        assert!((s[0].distance - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dedupe_keeps_nearest_per_target() {
        let d = dedupe_per_target(&[hit(0.1, 1), hit(0.2, 1), hit(0.3, 2)]);
        assert_eq!(d, vec![hit(0.1, 1), hit(0.3, 2)]);
        let distinct = vec![hit(0.1, 1), hit(0.2, 2)];
        assert_eq!(dedupe_per_target(&distinct), distinct);
        assert!(dedupe_per_target(&[]).is_empty());
    }

    #[test]
    fn p_ks_values() {
        let p = p_ks(&[hit(0.4, 0), hit(0.4, 1)], 3).unwrap();
        assert_eq!(p.0, vec![0.5, 0.5, 0.0]);
        let p = p_ks(&[hit(0.7, 2)], 3).unwrap();
        assert_eq!(p.0, vec![0.0, 0.0, 1.0]);
        // exp(0)/(exp(0)+exp(-ln 3)) = 1/(1+1/3) = 0.75
        let p = p_ks(&[hit(0.0, 0), hit(3f64.ln(), 1)], 2).unwrap();
        assert!((p.0[0] - 0.75).abs() < 1e-15);
        assert!((p.0[1] - 0.25).abs() < 1e-15);
        assert!(p_ks(&[], 3).is_none());
    }

    #[test]
    fn p_es_uniform_on_identical_embeddings() {
        let es = EntityStore {
            dim: 2,
            keys: vec![0.6, 0.8, 0.6, 0.8, 0.6, 0.8, 0.6, 0.8],
            encoder_hash: [0; HASH_LEN],
        };
        let p = p_es(&es, &[1.0, 0.0], 1.0);
        for v in p.probs() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn p_es_argmax_is_cosine_argmax() {
        let es = EntityStore {
            dim: 2,
            keys: vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8],
            encoder_hash: [0; HASH_LEN],
        };
        let q = [0.0, 1.0];
        let p = p_es(&es, &q, 0.3);
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert_eq!(p.argmax(), Some(EntityId(1)));
    }

    #[test]
    fn interpolation_boundaries() {
        let a = Distribution(vec![0.2, 0.8, 0.0]);
        let b = Distribution(vec![0.3, 0.3, 0.4]);
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), b);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), a);
        let mid = interpolate(&a, &b, 0.95).unwrap();
        assert!((mid.0[1] - (0.95 * 0.8 + 0.05 * 0.3)).abs() < 1e-15);
        assert!(interpolate(&a, &Distribution(vec![1.0]), 0.5).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(InferenceConfig::default().validate().is_ok());
        assert!(InferenceConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(InferenceConfig { lambda: 1.5, ..Default::default() }.validate().is_err());
    }
}
