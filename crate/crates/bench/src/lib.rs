//! Fixtures shared by the benchmarks.

use cmr_core::binio::HASH_LEN;
use cmr_core::kg::{EntityId, RelationId};
use cmr_core::stores::KnowledgeStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

pub fn unit(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
    v.iter().map(|x| x / n).collect()
}

/// A store of `rows` unit keys over `entities` targets.
pub fn knowledge_store(rows: usize, dim: usize, entities: u32, seed: u64) -> KnowledgeStore {
    let mut rng = rng(seed);
    KnowledgeStore {
        dim,
        keys: (0..rows).flat_map(|_| unit(&random_vec(&mut rng, dim))).collect(),
        values: (0..rows).map(|_| EntityId(rng.random_range(0..entities))).collect(),
        source_keys: (0..rows)
            .map(|_| (EntityId(rng.random_range(0..entities)), RelationId(rng.random_range(0..8))))
            .collect(),
        encoder_hash: [0; HASH_LEN],
    }
}
