//! Seeded generator for small inductive multimodal knowledge graphs.
//!
//! Entities have a latent type and a latent group. Every relation maps
//! entities of one source type to the entity of its target type that shares
//! the head's group, so targets are predictable from entity semantics alone.
//! Visual features are type prototype + group prototype + Gaussian noise;
//! descriptions mix a type word, a group word and filler words.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::error::{CmrError, Result};
use crate::featurize::save_feature_file;
use crate::kg::SplitMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_types: usize,
    pub entities_per_type: usize,
    pub num_relations: usize,
    pub triples_per_relation: usize,
    pub noise_std: f64,
    pub unseen_fraction: f64,
    pub visual_dim: usize,
    /// Fraction of entities that receive a visual feature row.
    pub image_fraction: f64,
    pub filler_words: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_types: 4,
            entities_per_type: 25,
            num_relations: 12,
            triples_per_relation: 25,
            noise_std: 0.3,
            unseen_fraction: 0.2,
            visual_dim: 32,
            image_fraction: 1.0,
            filler_words: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_types < 2 {
            return Err(CmrError::Config("num_types must be >= 2".into()));
        }
        if self.entities_per_type < 2 || self.num_relations < 1 {
            return Err(CmrError::Config(
                "entities_per_type must be >= 2 and num_relations >= 1".into(),
            ));
        }
        if self.triples_per_relation < 1 || self.triples_per_relation > self.entities_per_type {
            return Err(CmrError::Config(
                "triples_per_relation must lie in 1..=entities_per_type".into(),
            ));
        }
        if !(self.unseen_fraction > 0.0 && self.unseen_fraction < 1.0) {
            return Err(CmrError::Config("unseen_fraction must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.image_fraction) || self.noise_std < 0.0 || self.visual_dim < 1 {
            return Err(CmrError::Config(
                "image_fraction must lie in [0, 1], noise_std >= 0, visual_dim >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn num_entities(&self) -> usize {
        self.num_types * self.entities_per_type
    }

    pub fn num_unseen(&self) -> usize {
        let per_type = (self.entities_per_type as f64 * self.unseen_fraction).round() as usize;
        per_type.max(1) * self.num_types
    }

    /// `(source type, target type)` of relation `k`.
    pub fn relation_types(&self, k: usize) -> (usize, usize) {
        let t = self.num_types;
        let source = k % t;
        let offset = 1 + (k / t) % (t - 1);
        (source, (source + offset) % t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedDataset {
    pub manifest: PathBuf,
    pub num_entities: usize,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

const FILLER_POOL: usize = 40;
const MAX_ATTEMPTS: usize = 256;

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect()
}

type Fact = (usize, usize, usize);

pub fn generate(spec: &SyntheticSpec, seed: u64, dir: &Path) -> Result<GeneratedDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = spec.entities_per_type;
    let n = spec.num_entities();
    let entity = |ty: usize, group: usize| ty * per + group;
    let names: Vec<String> = (0..n).map(|i| format!("ent{i:03}")).collect();

    let mut facts: Vec<Fact> = Vec::new();
    for k in 0..spec.num_relations {
        let (s, t) = spec.relation_types(k);
        let mut groups: Vec<usize> = (0..per).collect();
        groups.shuffle(&mut rng);
        groups.truncate(spec.triples_per_relation);
        groups.sort_unstable();
        for g in groups {
            facts.push((entity(s, g), k, entity(t, g)));
        }
    }

    let unseen_per_type = spec.num_unseen() / spec.num_types;
    let mut attempt = 0;
    let (valid_pool, test_pool, train, valid, test) = loop {
        attempt += 1;
        if attempt > MAX_ATTEMPTS {
            return Err(CmrError::Config(
                "could not draw an unseen-entity split covering every seen entity".into(),
            ));
        }
        let mut valid_pool = BTreeSet::new();
        let mut test_pool = BTreeSet::new();
        for ty in 0..spec.num_types {
            let mut groups: Vec<usize> = (0..per).collect();
            groups.shuffle(&mut rng);
            for (i, &g) in groups[..unseen_per_type].iter().enumerate() {
                if i % 2 == 0 {
                    test_pool.insert(entity(ty, g));
                } else {
                    valid_pool.insert(entity(ty, g));
                }
            }
        }
        let mut train = Vec::new();
        let mut valid = Vec::new();
        let mut test = Vec::new();
        for &f in &facts {
            let (h, _, t) = f;
            if test_pool.contains(&h) || test_pool.contains(&t) {
                test.push(f);
            } else if valid_pool.contains(&h) || valid_pool.contains(&t) {
                valid.push(f);
            } else {
                train.push(f);
            }
        }
        let train_entities: BTreeSet<usize> = train.iter().flat_map(|&(h, _, t)| [h, t]).collect();
        let seen_ok = (0..n)
            .filter(|e| !valid_pool.contains(e) && !test_pool.contains(e))
            .all(|e| train_entities.contains(&e));
        if seen_ok && !test.is_empty() {
            break (valid_pool, test_pool, train, valid, test);
        }
        if test.is_empty() && attempt == MAX_ATTEMPTS {
            return Err(CmrError::Config("spec produces no test triples".into()));
        }
    };

    // Semantics.
    let scale = 1.0 / (spec.visual_dim as f64).sqrt();
    let type_protos: Vec<Vec<f64>> = (0..spec.num_types)
        .map(|_| gaussian(&mut rng, spec.visual_dim, scale))
        .collect();
    let group_protos: Vec<Vec<f64>> = (0..per).map(|_| gaussian(&mut rng, spec.visual_dim, scale)).collect();
    let fillers: Vec<String> = (0..FILLER_POOL).map(|i| format!("filler{i:02}")).collect();

    let mut descriptions = Vec::with_capacity(n);
    let mut visual_rows = Vec::new();
    let mut visual_names = Vec::new();
    for e in 0..n {
        let (ty, g) = (e / per, e % per);
        let mut words = vec![
            format!("kind{ty}"),
            format!("trait{g:02}"),
        ];
        for _ in 0..spec.filler_words {
            words.push(fillers.choose(&mut rng).unwrap().clone());
        }
        descriptions.push(words.join(" "));
        let noise = gaussian(&mut rng, spec.visual_dim, spec.noise_std * scale);
        let has_image = rng.random::<f64>() < spec.image_fraction;
        if has_image {
            let row: Vec<f32> = (0..spec.visual_dim)
                .map(|k| (type_protos[ty][k] + group_protos[g][k] + noise[k]) as f32)
                .collect();
            visual_rows.push(row);
            visual_names.push(names[e].clone());
        }
    }

    fs::create_dir_all(dir).map_err(|e| CmrError::io(dir, e))?;
    let write = |file: &str, body: String| -> Result<()> {
        let p = dir.join(file);
        fs::write(&p, body).map_err(|e| CmrError::io(&p, e))
    };
    let render = |set: &[Fact]| -> String {
        set.iter()
            .map(|&(h, r, t)| format!("{}\trel{r}\t{}\n", names[h], names[t]))
            .collect()
    };
    write("train.tsv", render(&train))?;
    write("valid.tsv", render(&valid))?;
    write("test.tsv", render(&test))?;
    write(
        "entities.tsv",
        (0..n).map(|e| format!("{}\t{}\n", names[e], descriptions[e])).collect(),
    )?;
    write(
        "relations.tsv",
        (0..spec.num_relations)
            .map(|k| {
                let (s, t) = spec.relation_types(k);
                format!("rel{k}\tlink{k} from kind{s} to kind{t}\n")
            })
            .collect(),
    )?;
    save_feature_file(&dir.join("visual.cmrf"), &visual_names, &visual_rows, spec.visual_dim)?;
    let manifest = DatasetManifest {
        mode: SplitMode::Inductive,
        train: "train.tsv".into(),
        valid: "valid.tsv".into(),
        test: "test.tsv".into(),
        entity_descriptions: Some("entities.tsv".into()),
        relation_descriptions: Some("relations.tsv".into()),
        visual_features: Some("visual.cmrf".into()),
        visual_dim: spec.visual_dim,
    };
    let manifest_path = dir.join("manifest.json");
    manifest.save(&manifest_path)?;

    let unseen: BTreeSet<usize> = valid_pool.union(&test_pool).copied().collect();
    Ok(GeneratedDataset {
        manifest: manifest_path,
        num_entities: n,
        seen: (0..n).filter(|e| !unseen.contains(e)).map(|e| names[e].clone()).collect(),
        unseen: unseen.iter().map(|&e| names[e].clone()).collect(),
        train: train.len(),
        valid: valid.len(),
        test: test.len(),
    })
}
