//! Knowledge graph data model: vocabularies, triples, inductive splits and
//! the filter index shared by evaluation and negative masking.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CmrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityInfo {
    pub name: String,
    pub description: String,
    pub has_image: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationInfo {
    pub name: String,
    pub description: String,
}

/// Entity and relation vocabularies with dense ids assigned in
/// first-appearance order.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    entities: Vec<EntityInfo>,
    entity_index: HashMap<String, EntityId>,
    relations: Vec<RelationInfo>,
    relation_index: HashMap<String, RelationId>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern_entity(&mut self, name: &str) -> EntityId {
        if let Some(&id) = self.entity_index.get(name) {
            return id;
        }
        let id = EntityId(self.entities.len() as u32);
        self.entities.push(EntityInfo {
            name: name.to_string(),
            description: String::new(),
            has_image: false,
        });
        self.entity_index.insert(name.to_string(), id);
        id
    }

    pub fn intern_relation(&mut self, name: &str) -> RelationId {
        if let Some(&id) = self.relation_index.get(name) {
            return id;
        }
        let id = RelationId(self.relations.len() as u32);
        self.relations.push(RelationInfo {
            name: name.to_string(),
            description: String::new(),
        });
        self.relation_index.insert(name.to_string(), id);
        id
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entity_index.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relation_index.get(name).copied()
    }

    pub fn entity(&self, id: EntityId) -> &EntityInfo {
        &self.entities[id.index()]
    }

    pub fn entity_mut(&mut self, id: EntityId) -> &mut EntityInfo {
        &mut self.entities[id.index()]
    }

    /// Forward relation info. Reversed ids (`>= num_relations`) map onto their
    /// forward relation.
    pub fn relation(&self, id: RelationId) -> &RelationInfo {
        &self.relations[id.index() % self.relations.len()]
    }

    pub fn relation_mut(&mut self, id: RelationId) -> &mut RelationInfo {
        &mut self.relations[id.index()]
    }

    pub fn is_reversed(&self, id: RelationId) -> bool {
        id.index() >= self.relations.len()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Number of forward relations, |R|.
    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entities(&self) -> impl Iterator<Item = (EntityId, &EntityInfo)> {
        self.entities
            .iter()
            .enumerate()
            .map(|(i, e)| (EntityId(i as u32), e))
    }

    pub fn relations(&self) -> impl Iterator<Item = (RelationId, &RelationInfo)> {
        self.relations
            .iter()
            .enumerate()
            .map(|(i, r)| (RelationId(i as u32), r))
    }

    /// Resolve a query relation name, accepting `name` or the reversed
    /// spelling `name^-1`.
    pub fn resolve_relation(&self, name: &str) -> Option<RelationId> {
        if let Some(base) = name.strip_suffix("^-1") {
            self.relation_id(base)
                .map(|r| RelationId(r.0 + self.relations.len() as u32))
        } else {
            self.relation_id(name)
        }
    }

    pub fn relation_display_name(&self, id: RelationId) -> String {
        let base = &self.relation(id).name;
        if self.is_reversed(id) {
            format!("{base}^-1")
        } else {
            base.clone()
        }
    }

    /// Attach descriptions from `name<TAB>text` lines. Names not yet in the
    /// vocabulary are appended.
    pub fn load_entity_descriptions(&mut self, path: &Path) -> Result<()> {
        for (line_no, name, text) in read_description_lines(path)? {
            if name.is_empty() {
                return Err(CmrError::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: "empty entity name".into(),
                });
            }
            let id = self.intern_entity(&name);
            self.entity_mut(id).description = text;
        }
        Ok(())
    }

    pub fn load_relation_descriptions(&mut self, path: &Path) -> Result<()> {
        for (line_no, name, text) in read_description_lines(path)? {
            if name.is_empty() {
                return Err(CmrError::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: "empty relation name".into(),
                });
            }
            let id = self.intern_relation(&name);
            self.relation_mut(id).description = text;
        }
        Ok(())
    }
}

fn read_description_lines(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| CmrError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, desc) = line.split_once('\t').unwrap_or((line, ""));
        out.push((i + 1, name.to_string(), desc.to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
    pub reversed: bool,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
            reversed: false,
        }
    }

    pub fn query(&self) -> (EntityId, RelationId) {
        (self.head, self.relation)
    }
}

pub type TripleSet = Vec<Triple>;

/// Parse `head<TAB>relation<TAB>tail` lines, interning names into `vocab`.
pub fn parse_triples(text: &str, path: &Path, vocab: &mut Vocabulary) -> Result<TripleSet> {
    let mut triples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(CmrError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let head = vocab.intern_entity(fields[0]);
        let relation = vocab.intern_relation(fields[1]);
        let tail = vocab.intern_entity(fields[2]);
        triples.push(Triple::new(head, relation, tail));
    }
    Ok(triples)
}

pub fn ingest_triples(path: &Path, vocab: &mut Vocabulary) -> Result<TripleSet> {
    let text = fs::read_to_string(path).map_err(|e| CmrError::io(path, e))?;
    parse_triples(&text, path, vocab)
}

/// Append `(t, r + |R|, h)` for every forward triple.
pub fn add_reversed(triples: &[Triple], num_relations: usize) -> Result<TripleSet> {
    let mut out = Vec::with_capacity(triples.len() * 2);
    for t in triples {
        if t.relation.index() >= num_relations {
            return Err(CmrError::Invariant(format!(
                "relation id {} >= num_relations {num_relations}",
                t.relation.0
            )));
        }
        out.push(*t);
    }
    for t in triples {
        out.push(Triple {
            head: t.tail,
            relation: RelationId(t.relation.0 + num_relations as u32),
            tail: t.head,
            reversed: true,
        });
    }
    Ok(out)
}

pub fn strip_reversed(triples: &[Triple]) -> TripleSet {
    triples.iter().filter(|t| !t.reversed).copied().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Transductive,
    #[default]
    Inductive,
}

#[derive(Debug, Clone)]
pub struct GraphSplit {
    pub train: TripleSet,
    pub valid: TripleSet,
    pub test: TripleSet,
    pub seen_entities: BTreeSet<EntityId>,
    pub unseen_entities: BTreeSet<EntityId>,
    pub mode: SplitMode,
}

impl GraphSplit {
    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitWarning {
    pub split: &'static str,
    pub triple: Triple,
}

/// Partition entities into seen (appearing in train) and unseen (all
/// others). Inductive mode records, but tolerates, evaluation triples with no
/// unseen entity; transductive mode rejects evaluation entities missing from
/// train.
pub fn build_splits(
    train: TripleSet,
    valid: TripleSet,
    test: TripleSet,
    mode: SplitMode,
    num_entities: usize,
) -> Result<(GraphSplit, Vec<SplitWarning>)> {
    let seen: BTreeSet<EntityId> = train.iter().flat_map(|t| [t.head, t.tail]).collect();
    let unseen: BTreeSet<EntityId> = (0..num_entities as u32)
        .map(EntityId)
        .filter(|e| !seen.contains(e))
        .collect();
    let mut warnings = Vec::new();
    for (name, set) in [("valid", &valid), ("test", &test)] {
        for t in set {
            let touches_unseen = !seen.contains(&t.head) || !seen.contains(&t.tail);
            match mode {
                SplitMode::Transductive if touches_unseen => {
                    return Err(CmrError::Validation(format!(
                        "{name} triple ({}, {}, {}) uses an entity absent from train",
                        t.head, t.relation, t.tail
                    )));
                }
                SplitMode::Inductive if !touches_unseen => {
                    log::warn!(
                        "{name} triple ({}, {}, {}) has no unseen entity",
                        t.head,
                        t.relation,
                        t.tail
                    );
                    warnings.push(SplitWarning {
                        split: name,
                        triple: *t,
                    });
                }
                _ => {}
            }
        }
    }
    Ok((
        GraphSplit {
            train,
            valid,
            test,
            seen_entities: seen,
            unseen_entities: unseen,
            mode,
        },
        warnings,
    ))
}

/// Known true tails per `(head, relation)` query.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    tails: HashMap<(EntityId, RelationId), BTreeSet<EntityId>>,
}

static EMPTY_TAILS: BTreeSet<EntityId> = BTreeSet::new();

impl FilterIndex {
    pub fn from_triples<'a>(triples: impl IntoIterator<Item = &'a Triple>) -> Self {
        let mut tails: HashMap<_, BTreeSet<EntityId>> = HashMap::new();
        for t in triples {
            tails.entry((t.head, t.relation)).or_default().insert(t.tail);
        }
        Self { tails }
    }

    pub fn lookup(&self, head: EntityId, relation: RelationId) -> &BTreeSet<EntityId> {
        self.tails.get(&(head, relation)).unwrap_or(&EMPTY_TAILS)
    }

    pub fn contains(&self, head: EntityId, relation: RelationId, tail: EntityId) -> bool {
        self.tails
            .get(&(head, relation))
            .is_some_and(|s| s.contains(&tail))
    }

    pub fn num_keys(&self) -> usize {
        self.tails.len()
    }

    pub fn keys(&self) -> impl Iterator<Item = &(EntityId, RelationId)> {
        self.tails.keys()
    }
}

pub fn build_filter_index(splits: &GraphSplit) -> FilterIndex {
    FilterIndex::from_triples(splits.all_triples())
}

/// Entities touched by a triple set.
pub fn entities_of(triples: &[Triple]) -> HashSet<EntityId> {
    triples.iter().flat_map(|t| [t.head, t.tail]).collect()
}
