//! Deterministic featurization: query prompts, signed bag-of-words hashing,
//! binary visual feature files and padding for image-less entities.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{CmrError, Result};
use crate::kg::{EntityId, RelationId, Vocabulary};

pub const FEATURE_MAGIC: &[u8; 4] = b"CMRF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Text,
    Visual,
    Padded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f32>,
    pub source: FeatureSource,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturizerConfig {
    pub hash_dim: usize,
    pub seed: u64,
    pub lowercase: bool,
    /// Descriptions longer than this many characters are cut.
    pub max_chars: Option<usize>,
    /// Prefix rendered in front of a reversed relation's description.
    pub inverse_prefix: String,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self {
            hash_dim: 256,
            seed: 0,
            lowercase: true,
            max_chars: None,
            inverse_prefix: "inverse of ".to_string(),
        }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hash_dim < 8 {
            return Err(CmrError::Config(format!(
                "hash_dim must be >= 8, got {}",
                self.hash_dim
            )));
        }
        Ok(())
    }
}

pub fn render_query_template(head_name: &str, head_desc: &str, relation_desc: &str) -> Result<String> {
    if head_name.is_empty() {
        return Err(CmrError::Config("query template needs a head name".into()));
    }
    Ok(format!(
        "[CLS] A photo of {head_name}'s {relation_desc}? [SEP] {head_desc}"
    ))
}

/// Relation text used in prompts; falls back to the relation name when no
/// description was supplied.
pub fn relation_text(vocab: &Vocabulary, relation: RelationId, cfg: &FeaturizerConfig) -> String {
    let info = vocab.relation(relation);
    let base = if info.description.is_empty() {
        info.name.as_str()
    } else {
        info.description.as_str()
    };
    if vocab.is_reversed(relation) {
        format!("{}{base}", cfg.inverse_prefix)
    } else {
        base.to_string()
    }
}

fn truncate<'a>(text: &'a str, cfg: &FeaturizerConfig) -> &'a str {
    match cfg.max_chars {
        Some(n) => match text.char_indices().nth(n) {
            Some((idx, _)) => &text[..idx],
            None => text,
        },
        None => text,
    }
}

pub fn query_prompt(
    vocab: &Vocabulary,
    head: EntityId,
    relation: RelationId,
    cfg: &FeaturizerConfig,
) -> Result<String> {
    let h = vocab.entity(head);
    render_query_template(
        &h.name,
        truncate(&h.description, cfg),
        &relation_text(vocab, relation, cfg),
    )
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn token_hash(token: &str, seed: u64) -> u64 {
    let mut h = FNV_OFFSET ^ splitmix64(seed);
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

/// Signed feature hashing of whitespace tokens, L2-normalized unless empty.
pub fn hash_bow_featurize(text: &str, cfg: &FeaturizerConfig) -> FeatureVector {
    let dim = cfg.hash_dim;
    let mut acc = vec![0f64; dim];
    let text = truncate(text, cfg);
    for raw in text.split_whitespace() {
        let token = if cfg.lowercase {
            raw.to_lowercase()
        } else {
            raw.to_string()
        };
        let h = token_hash(&token, cfg.seed);
        let bucket = (h % dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        acc[bucket] += sign;
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    let values = if norm > 0.0 {
        acc.iter().map(|v| (v / norm) as f32).collect()
    } else {
        vec![0f32; dim]
    };
    FeatureVector {
        values,
        source: FeatureSource::Text,
    }
}

/// Pseudo-random unit vector derived only from `(seed, entity)`.
pub fn pad_missing_visual(entity: EntityId, dim: usize, seed: u64) -> FeatureVector {
    let stream = splitmix64(seed ^ splitmix64(u64::from(entity.0) ^ 0x5eed_0f_1e55));
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let values = if norm > 0.0 {
        raw.iter().map(|v| (v / norm) as f32).collect()
    } else {
        let mut v = vec![0f32; dim];
        v[0] = 1.0;
        v
    };
    FeatureVector {
        values,
        source: FeatureSource::Padded,
    }
}

/// Rows of visual features keyed by entity.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub dim: usize,
    pub rows: Vec<(EntityId, Vec<f32>)>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".names");
    PathBuf::from(s)
}

/// Write a feature file and its `.names` sidecar.
pub fn save_feature_file(path: &Path, names: &[String], rows: &[Vec<f32>], dim: usize) -> Result<()> {
    if names.len() != rows.len() {
        return Err(CmrError::Invariant(format!(
            "{} names for {} rows",
            names.len(),
            rows.len()
        )));
    }
    let mut w = ByteWriter::new();
    w.bytes(FEATURE_MAGIC);
    w.u32(FEATURE_VERSION);
    w.u64(rows.len() as u64);
    w.u32(dim as u32);
    for row in rows {
        if row.len() != dim {
            return Err(CmrError::DimensionMismatch {
                expected: dim,
                actual: row.len(),
            });
        }
        for &v in row {
            w.f32(v);
        }
    }
    fs::write(path, w.finish()).map_err(|e| CmrError::io(path, e))?;
    let sidecar = sidecar_path(path);
    let mut listing = names.join("\n");
    listing.push('\n');
    fs::write(&sidecar, listing).map_err(|e| CmrError::io(&sidecar, e))?;
    Ok(())
}

pub fn load_feature_file(path: &Path, expected_dim: usize, vocab: &Vocabulary) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| CmrError::io(path, e))?;
    let mut r = ByteReader::new(&bytes, "feature file");
    r.expect_magic(FEATURE_MAGIC)?;
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(CmrError::Format(format!("feature file version {version} unsupported")));
    }
    let count = r.u64()? as usize;
    let dim = r.u32()? as usize;
    if dim != expected_dim {
        return Err(CmrError::Format(format!(
            "feature dimension {dim} does not match expected {expected_dim}"
        )));
    }
    let data = r.f32_vec(count * dim)?;
    r.expect_end()?;

    let sidecar = sidecar_path(path);
    let listing = fs::read_to_string(&sidecar).map_err(|e| CmrError::io(&sidecar, e))?;
    let names: Vec<&str> = listing.lines().filter(|l| !l.is_empty()).collect();
    if names.len() != count {
        return Err(CmrError::Format(format!(
            "sidecar lists {} names for {count} rows",
            names.len()
        )));
    }
    let mut rows = Vec::with_capacity(count);
    for (i, name) in names.iter().enumerate() {
        let id = vocab
            .entity_id(name)
            .ok_or_else(|| CmrError::UnknownEntity(name.to_string()))?;
        let row = data[i * dim..(i + 1) * dim].to_vec();
        if row.iter().any(|v| !v.is_finite()) {
            return Err(CmrError::numeric("feature file", format!("non-finite value for `{name}`")));
        }
        rows.push((id, row));
    }
    Ok(FeatureMatrix { dim, rows })
}

/// Text and visual inputs for every vocabulary entity.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub config: FeaturizerConfig,
    pub visual_dim: usize,
    pub entity_text: Vec<FeatureVector>,
    pub entity_visual: Vec<FeatureVector>,
}

impl FeatureSet {
    /// Builds features and marks `has_image` on entities covered by `visual`.
    pub fn build(
        vocab: &mut Vocabulary,
        config: &FeaturizerConfig,
        visual: Option<&FeatureMatrix>,
        visual_dim: usize,
    ) -> Result<Self> {
        config.validate()?;
        let n = vocab.num_entities();
        let mut provided: Vec<Option<&[f32]>> = vec![None; n];
        if let Some(m) = visual {
            if m.dim != visual_dim {
                return Err(CmrError::DimensionMismatch {
                    expected: visual_dim,
                    actual: m.dim,
                });
            }
            for (id, row) in &m.rows {
                provided[id.index()] = Some(row);
            }
        }
        let mut entity_text = Vec::with_capacity(n);
        let mut entity_visual = Vec::with_capacity(n);
        for (i, slot) in provided.iter().enumerate() {
            let id = EntityId(i as u32);
            vocab.entity_mut(id).has_image = slot.is_some();
            entity_text.push(hash_bow_featurize(&vocab.entity(id).description, config));
            entity_visual.push(match slot {
                Some(row) => FeatureVector {
                    values: row.to_vec(),
                    source: FeatureSource::Visual,
                },
                None => pad_missing_visual(id, visual_dim, config.seed),
            });
        }
        Ok(Self {
            config: config.clone(),
            visual_dim,
            entity_text,
            entity_visual,
        })
    }

    pub fn text_dim(&self) -> usize {
        self.config.hash_dim
    }

    pub fn query(&self, vocab: &Vocabulary, head: EntityId, relation: RelationId) -> Result<FeatureVector> {
        let prompt = query_prompt(vocab, head, relation, &self.config)?;
        Ok(hash_bow_featurize(&prompt, &self.config))
    }

    pub fn entity(&self, id: EntityId) -> Result<(&FeatureVector, &FeatureVector)> {
        match (self.entity_visual.get(id.index()), self.entity_text.get(id.index())) {
            (Some(v), Some(t)) => Ok((v, t)),
            _ => Err(CmrError::UnknownEntity(id.to_string())),
        }
    }
}
