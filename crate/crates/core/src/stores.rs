//! Knowledge and entity stores built with frozen encoders, plus their
//! binary persistence.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter, HASH_LEN};
use crate::encoders::EncoderParams;
use crate::error::{CmrError, Result};
use crate::featurize::FeatureSet;
use crate::kg::{EntityId, RelationId, Triple, Vocabulary};

pub const STORE_MAGIC: &[u8; 4] = b"CMRS";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StoreScope {
    TrainOnly,
    #[default]
    TrainPlusInferenceGraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreKind {
    Knowledge = 0,
    Entity = 1,
}

/// Query embeddings keyed to their target entities. Row `i` has key
/// `keys[i*dim..(i+1)*dim]`, value `values[i]` and source query
/// `source_keys[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeStore {
    pub dim: usize,
    pub keys: Vec<f32>,
    pub values: Vec<EntityId>,
    pub source_keys: Vec<(EntityId, RelationId)>,
    pub encoder_hash: [u8; HASH_LEN],
}

/// Fused embedding for every vocabulary entity; row `e` belongs to entity `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityStore {
    pub dim: usize,
    pub keys: Vec<f32>,
    pub encoder_hash: [u8; HASH_LEN],
}

impl KnowledgeStore {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn key(&self, row: usize) -> &[f32] {
        &self.keys[row * self.dim..(row + 1) * self.dim]
    }
}

impl EntityStore {
    pub fn len(&self) -> usize {
        self.keys.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, entity: EntityId) -> &[f32] {
        let r = entity.index();
        &self.keys[r * self.dim..(r + 1) * self.dim]
    }
}

/// Encode every in-scope triple's `(h, r)` prompt. Order follows `triples`.
pub fn build_knowledge_store(
    params: &EncoderParams,
    triples: &[Triple],
    vocab: &Vocabulary,
    features: &FeatureSet,
    encoder_hash: [u8; HASH_LEN],
) -> Result<KnowledgeStore> {
    let dim = params.embed_dim;
    let rows: Vec<Vec<f64>> = triples
        .par_iter()
        .map(|t| {
            if t.head.index() >= vocab.num_entities() {
                return Err(CmrError::UnknownEntity(t.head.to_string()));
            }
            let x = features.query(vocab, t.head, t.relation)?;
            params.encode_query(&x.values)
        })
        .collect::<Result<_>>()?;
    let mut keys = Vec::with_capacity(rows.len() * dim);
    for r in &rows {
        keys.extend(r.iter().map(|&v| v as f32));
    }
    Ok(KnowledgeStore {
        dim,
        keys,
        values: triples.iter().map(|t| t.tail).collect(),
        source_keys: triples.iter().map(|t| (t.head, t.relation)).collect(),
        encoder_hash,
    })
}

pub fn build_entity_store(
    params: &EncoderParams,
    vocab: &Vocabulary,
    features: &FeatureSet,
    encoder_hash: [u8; HASH_LEN],
) -> Result<EntityStore> {
    let dim = params.embed_dim;
    let rows: Vec<Vec<f64>> = (0..vocab.num_entities())
        .into_par_iter()
        .map(|i| {
            let (v, t) = features.entity(EntityId(i as u32))?;
            Ok(params.encode_entity(&v.values, &t.values)?.e_f)
        })
        .collect::<Result<_>>()?;
    let mut keys = Vec::with_capacity(rows.len() * dim);
    for r in &rows {
        keys.extend(r.iter().map(|&v| v as f32));
    }
    Ok(EntityStore {
        dim,
        keys,
        encoder_hash,
    })
}

fn header(w: &mut ByteWriter, kind: StoreKind, count: usize, dim: usize, encoder_hash: &[u8; HASH_LEN]) {
    w.bytes(STORE_MAGIC);
    w.u32(STORE_VERSION);
    w.u8(kind as u8);
    w.u64(count as u64);
    w.u32(dim as u32);
    w.bytes(encoder_hash);
}

pub fn knowledge_store_bytes(s: &KnowledgeStore) -> Vec<u8> {
    let mut w = ByteWriter::new();
    header(&mut w, StoreKind::Knowledge, s.len(), s.dim, &s.encoder_hash);
    s.keys.iter().for_each(|&v| w.f32(v));
    s.values.iter().for_each(|v| w.u32(v.0));
    s.source_keys.iter().for_each(|(h, _)| w.u32(h.0));
    s.source_keys.iter().for_each(|(_, r)| w.u32(r.0));
    w.finish_with_hash()
}

pub fn entity_store_bytes(s: &EntityStore) -> Vec<u8> {
    let mut w = ByteWriter::new();
    header(&mut w, StoreKind::Entity, s.len(), s.dim, &s.encoder_hash);
    s.keys.iter().for_each(|&v| w.f32(v));
    (0..s.len() as u32).for_each(|i| w.u32(i));
    w.finish_with_hash()
}

struct Header {
    count: usize,
    dim: usize,
    encoder_hash: [u8; HASH_LEN],
}

fn read_header(r: &mut ByteReader<'_>, kind: StoreKind, expected_dim: Option<usize>) -> Result<Header> {
    r.expect_magic(STORE_MAGIC)?;
    let version = r.u32()?;
    if version != STORE_VERSION {
        return Err(CmrError::Format(format!("store version {version} unsupported")));
    }
    let k = r.u8()?;
    if k != kind as u8 {
        return Err(CmrError::Format(format!("store kind {k} where {} expected", kind as u8)));
    }
    let count = r.u64()? as usize;
    let dim = r.u32()? as usize;
    if let Some(d) = expected_dim {
        if d != dim {
            return Err(CmrError::Format(format!("store dimension {dim} does not match expected {d}")));
        }
    }
    let mut encoder_hash = [0u8; HASH_LEN];
    encoder_hash.copy_from_slice(r.take(HASH_LEN)?);
    Ok(Header {
        count,
        dim,
        encoder_hash,
    })
}

pub fn parse_knowledge_store(bytes: &[u8], expected_dim: Option<usize>) -> Result<KnowledgeStore> {
    let mut r = ByteReader::with_hash_trailer(bytes, "knowledge store")?;
    let h = read_header(&mut r, StoreKind::Knowledge, expected_dim)?;
    let keys = r.f32_vec(h.count * h.dim)?;
    let values = r.u32_vec(h.count)?.into_iter().map(EntityId).collect();
    let heads = r.u32_vec(h.count)?;
    let rels = r.u32_vec(h.count)?;
    r.expect_end()?;
    Ok(KnowledgeStore {
        dim: h.dim,
        keys,
        values,
        source_keys: heads
            .into_iter()
            .zip(rels)
            .map(|(a, b)| (EntityId(a), RelationId(b)))
            .collect(),
        encoder_hash: h.encoder_hash,
    })
}

pub fn parse_entity_store(bytes: &[u8], expected_dim: Option<usize>) -> Result<EntityStore> {
    let mut r = ByteReader::with_hash_trailer(bytes, "entity store")?;
    let h = read_header(&mut r, StoreKind::Entity, expected_dim)?;
    let keys = r.f32_vec(h.count * h.dim)?;
    let ids = r.u32_vec(h.count)?;
    r.expect_end()?;
    if ids.iter().enumerate().any(|(i, &v)| v as usize != i) {
        return Err(CmrError::Format("entity store ids are not 0..|E|".into()));
    }
    Ok(EntityStore {
        dim: h.dim,
        keys,
        encoder_hash: h.encoder_hash,
    })
}

pub fn save_knowledge_store(s: &KnowledgeStore, path: &Path) -> Result<()> {
    fs::write(path, knowledge_store_bytes(s)).map_err(|e| CmrError::io(path, e))
}

pub fn save_entity_store(s: &EntityStore, path: &Path) -> Result<()> {
    fs::write(path, entity_store_bytes(s)).map_err(|e| CmrError::io(path, e))
}

fn read_store_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(CmrError::MissingArtifact(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| CmrError::io(path, e))
}

pub fn load_knowledge_store(path: &Path, expected_dim: Option<usize>) -> Result<KnowledgeStore> {
    parse_knowledge_store(&read_store_file(path)?, expected_dim)
}

pub fn load_entity_store(path: &Path, expected_dim: Option<usize>) -> Result<EntityStore> {
    parse_entity_store(&read_store_file(path)?, expected_dim)
}
