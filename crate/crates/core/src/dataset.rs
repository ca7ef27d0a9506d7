//! Dataset manifests and the in-memory dataset assembled from them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CmrError, Result};
use crate::featurize::{load_feature_file, FeatureSet, FeaturizerConfig};
use crate::kg::{
    add_reversed, build_filter_index, build_splits, ingest_triples, FilterIndex, GraphSplit,
    SplitMode, SplitWarning, Vocabulary,
};

/// JSON manifest naming the files of a dataset. Relative paths resolve
/// against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub mode: SplitMode,
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub entity_descriptions: Option<PathBuf>,
    #[serde(default)]
    pub relation_descriptions: Option<PathBuf>,
    #[serde(default)]
    pub visual_features: Option<PathBuf>,
    pub visual_dim: usize,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CmrError::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| CmrError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| CmrError::io(path, e))
    }

    /// Every file the manifest references, resolved against `base`.
    pub fn files(&self, base: &Path) -> Vec<PathBuf> {
        let mut out = vec![base.join(&self.train), base.join(&self.valid), base.join(&self.test)];
        for p in [&self.entity_descriptions, &self.relation_descriptions]
            .into_iter()
            .flatten()
        {
            out.push(base.join(p));
        }
        if let Some(v) = &self.visual_features {
            out.push(base.join(v));
            out.push(crate::featurize::sidecar_path(&base.join(v)));
        }
        out
    }
}

/// Vocabulary, splits with reversed triples, filter indexes and features.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocabulary,
    /// Splits whose triple sets include reversed triples.
    pub split: GraphSplit,
    pub warnings: Vec<SplitWarning>,
    /// Train triples only (both directions); used for negative masking.
    pub train_index: FilterIndex,
    /// Every split (both directions); used for filtered ranking.
    pub filter: FilterIndex,
    pub features: FeatureSet,
    pub num_forward: [usize; 3],
}

impl Dataset {
    pub fn load(manifest_path: &Path, featurizer: &FeaturizerConfig) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut vocab = Vocabulary::new();
        let train = ingest_triples(&base.join(&manifest.train), &mut vocab)?;
        let valid = ingest_triples(&base.join(&manifest.valid), &mut vocab)?;
        let test = ingest_triples(&base.join(&manifest.test), &mut vocab)?;
        if let Some(p) = &manifest.entity_descriptions {
            vocab.load_entity_descriptions(&base.join(p))?;
        }
        if let Some(p) = &manifest.relation_descriptions {
            vocab.load_relation_descriptions(&base.join(p))?;
        }
        let num_relations = vocab.num_relations();
        let num_forward = [train.len(), valid.len(), test.len()];
        let (forward, warnings) = build_splits(train, valid, test, manifest.mode, vocab.num_entities())?;
        let split = GraphSplit {
            train: add_reversed(&forward.train, num_relations)?,
            valid: add_reversed(&forward.valid, num_relations)?,
            test: add_reversed(&forward.test, num_relations)?,
            ..forward
        };
        let visual = match &manifest.visual_features {
            Some(p) => Some(load_feature_file(&base.join(p), manifest.visual_dim, &vocab)?),
            None => None,
        };
        let features = FeatureSet::build(&mut vocab, featurizer, visual.as_ref(), manifest.visual_dim)?;
        Ok(Self {
            train_index: FilterIndex::from_triples(&split.train),
            filter: build_filter_index(&split),
            vocab,
            split,
            warnings,
            features,
            num_forward,
        })
    }
}
