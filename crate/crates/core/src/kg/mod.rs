//! Typed medical knowledge graph.
//!
//! Entities are addressed by caller-supplied string ids. Triples keep their
//! direction for display, but every distance and path query runs on the
//! undirected view. Mutation happens only through [`KnowledgeGraph::merge_triples`]
//! (or the plan/apply pair it is built from), usage bumps and evolution stamps,
//! so the adjacency index can be maintained incrementally.

mod io;
mod store;

pub use io::{export_graph, import_graph, read_jsonl, write_jsonl, EdgeRecord, NodeRecord};
pub use store::{GraphStore, JournalEntry};

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::normalize_name;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("entity not found: {0}")]
    NotFound(String),
    #[error("triple not found: {0}")]
    TripleNotFound(TripleKey),
    #[error("dangling reference in {triple}: entity {missing} does not exist")]
    Dangling { triple: TripleKey, missing: String },
    #[error("entity {id} already exists with kind {existing:?}, batch declares {declared:?}")]
    KindConflict {
        id: String,
        existing: EntityKind,
        declared: EntityKind,
    },
    #[error("invalid entity {id}: {reason}")]
    InvalidEntity { id: String, reason: String },
    #[error("{file} line {line}: {message}")]
    Malformed {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file} line {line}: duplicate {what} {id}")]
    Duplicate {
        file: String,
        line: usize,
        what: &'static str,
        id: String,
    },
    #[error("journal line {line}: {message}")]
    Journal { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = KgError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Disease,
    Symptom,
    Drug,
    Definition,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub name: String,
    pub kind: EntityKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub definition_text: Option<String>,
    /// 0–10, diseases only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl Entity {
    pub fn new(id: impl Into<String>, name: impl Into<String>, kind: EntityKind) -> Self {
        Self {
            id: id.into(),
            name: name.into(),
            kind,
            definition_text: None,
            severity: None,
            embedding: None,
        }
    }

    pub fn with_severity(mut self, severity: u8) -> Self {
        self.severity = Some(severity);
        self
    }

    pub fn with_definition(mut self, text: impl Into<String>) -> Self {
        self.definition_text = Some(text.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(KgError::InvalidEntity {
                id: self.id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.id.is_empty() {
            return bad("empty id");
        }
        if let Some(sev) = self.severity {
            if self.kind != EntityKind::Disease {
                return bad("severity is only allowed on diseases");
            }
            if sev > 10 {
                return bad("severity must be within 0..=10");
            }
        }
        if let Some(e) = &self.embedding {
            if e.is_empty() || e.iter().any(|x| !x.is_finite()) {
                return bad("embedding must be non-empty and finite");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    SeedImport,
    LlmDraft,
    ExpertEdit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewed_at: Option<DateTime<Utc>>,
}

impl Provenance {
    pub fn seed() -> Self {
        Self {
            source: Source::SeedImport,
            reviewer: None,
            reviewed_at: None,
        }
    }

    pub fn is_reviewed(&self) -> bool {
        self.reviewer.is_some()
    }
}

/// Identity of a triple: `(subject, relation, object)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TripleKey {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl TripleKey {
    pub fn new(s: impl Into<String>, r: impl Into<String>, o: impl Into<String>) -> Self {
        Self {
            subject: s.into(),
            relation: r.into(),
            object: o.into(),
        }
    }
}

impl fmt::Display for TripleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}|{}", self.subject, self.relation, self.object)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub provenance: Provenance,
    #[serde(default)]
    pub usage_count: u64,
    /// Unknown for seed records that carry no creation time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<DateTime<Utc>>,
}

impl Triple {
    pub fn new(
        subject: impl Into<String>,
        relation: impl Into<String>,
        object: impl Into<String>,
        provenance: Provenance,
    ) -> Self {
        Self {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
            provenance,
            usage_count: 0,
            created_at: None,
        }
    }

    pub fn key(&self) -> TripleKey {
        TripleKey::new(&self.subject, &self.relation, &self.object)
    }

    pub fn touches(&self, id: &str) -> bool {
        self.subject == id || self.object == id
    }

    /// The endpoint opposite `id`; the subject for self loops.
    pub fn other_end(&self, id: &str) -> &str {
        if self.subject == id {
            &self.object
        } else {
            &self.subject
        }
    }
}

/// A triple incident to a queried entity together with its far endpoint.
#[derive(Debug, Clone, Copy)]
pub struct Neighbor<'g> {
    pub triple: &'g Triple,
    pub entity: &'g Entity,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeBatch {
    #[serde(default)]
    pub entities: Vec<Entity>,
    #[serde(default)]
    pub triples: Vec<Triple>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeDiff {
    pub added_entities: Vec<Entity>,
    pub added: Vec<Triple>,
    pub skipped: Vec<Triple>,
}

impl MergeDiff {
    pub fn is_empty(&self) -> bool {
        self.added_entities.is_empty() && self.added.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    entities: IndexMap<String, Entity>,
    triples: IndexMap<TripleKey, Triple>,
    /// entity id -> positions in `triples`
    adjacency: HashMap<String, Vec<usize>>,
    last_evolution: BTreeMap<String, DateTime<Utc>>,
}

impl PartialEq for KnowledgeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.entities == other.entities
            && self.triples == other.triples
            && self.last_evolution == other.last_evolution
    }
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn triple_count(&self) -> usize {
        self.triples.len()
    }

    pub fn entity(&self, id: &str) -> Result<&Entity> {
        self.entities
            .get(id)
            .ok_or_else(|| KgError::NotFound(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entities.contains_key(id)
    }

    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn entities_of_kind(&self, kind: EntityKind) -> impl Iterator<Item = &Entity> {
        self.entities.values().filter(move |e| e.kind == kind)
    }

    pub fn triples(&self) -> impl Iterator<Item = &Triple> {
        self.triples.values()
    }

    pub fn triple(&self, key: &TripleKey) -> Option<&Triple> {
        self.triples.get(key)
    }

    pub fn contains_triple(&self, key: &TripleKey) -> bool {
        self.triples.contains_key(key)
    }

    /// First entity of `kind` whose normalized name equals the normalized query.
    pub fn find_by_name(&self, name: &str, kind: Option<EntityKind>) -> Option<&Entity> {
        let wanted = normalize_name(name);
        self.entities
            .values()
            .filter(|e| kind.is_none_or(|k| e.kind == k))
            .find(|e| normalize_name(&e.name) == wanted)
    }

    pub fn last_evolution(&self, id: &str) -> Option<DateTime<Utc>> {
        self.last_evolution.get(id).copied()
    }

    pub fn last_evolutions(&self) -> &BTreeMap<String, DateTime<Utc>> {
        &self.last_evolution
    }

    pub fn set_last_evolution(&mut self, id: &str, at: DateTime<Utc>) -> Result<()> {
        self.entity(id)?;
        self.last_evolution.insert(id.to_string(), at);
        Ok(())
    }

    fn incident(&self, id: &str) -> impl Iterator<Item = &Triple> {
        self.adjacency
            .get(id)
            .into_iter()
            .flatten()
            .map(move |&i| &self.triples[i])
    }

    /// Triples incident to `id` (either direction), paired with the far
    /// endpoint, optionally restricted to far endpoints of one kind. Sorted by
    /// relation label then far endpoint id.
    pub fn one_hop_neighbors(
        &self,
        id: &str,
        kind_filter: Option<EntityKind>,
    ) -> Result<Vec<Neighbor<'_>>> {
        self.entity(id)?;
        let mut out: Vec<Neighbor<'_>> = self
            .incident(id)
            .map(|t| Neighbor {
                triple: t,
                entity: &self.entities[t.other_end(id)],
            })
            .filter(|n| kind_filter.is_none_or(|k| n.entity.kind == k))
            .collect();
        out.sort_by(|a, b| {
            (
                a.triple.relation.as_str(),
                a.entity.id.as_str(),
                a.triple.key(),
            )
                .cmp(&(
                    b.triple.relation.as_str(),
                    b.entity.id.as_str(),
                    b.triple.key(),
                ))
        });
        Ok(out)
    }

    /// Distinct undirected neighbor ids, ascending.
    pub fn neighbor_ids(&self, id: &str) -> BTreeSet<&str> {
        self.incident(id)
            .map(|t| t.other_end(id))
            .filter(|&o| o != id)
            .collect()
    }

    /// BFS edge counts from `source` to every reachable entity.
    pub fn distances_from(&self, source: &str) -> Result<HashMap<&str, usize>> {
        let (start, _) = self
            .entities
            .get_key_value(source)
            .ok_or_else(|| KgError::NotFound(source.to_string()))?;
        let mut dist: HashMap<&str, usize> = HashMap::new();
        dist.insert(start.as_str(), 0);
        let mut queue = VecDeque::from([start.as_str()]);
        while let Some(cur) = queue.pop_front() {
            let d = dist[cur];
            for t in self.incident(cur) {
                let next = t.other_end(cur);
                if !dist.contains_key(next) {
                    dist.insert(next, d + 1);
                    queue.push_back(next);
                }
            }
        }
        Ok(dist)
    }

    pub fn shortest_path_distance(&self, a: &str, b: &str) -> Result<Option<usize>> {
        self.entity(b)?;
        if a == b {
            self.entity(a)?;
            return Ok(Some(0));
        }
        Ok(self.distances_from(a)?.get(b).copied())
    }

    /// One minimal path from `a` to `b`; among equal-length paths the
    /// lexicographically smallest id sequence.
    pub fn shortest_path(&self, a: &str, b: &str) -> Result<Option<Vec<String>>> {
        self.entity(a)?;
        let to_b = self.distances_from(b)?;
        let Some(&total) = to_b.get(a) else {
            return Ok(None);
        };
        let mut path = vec![a.to_string()];
        let mut cur = a;
        for remaining in (0..total).rev() {
            // neighbor_ids is sorted, so the first hit is the smallest id.
            let next = self
                .neighbor_ids(cur)
                .into_iter()
                .find(|n| to_b.get(n) == Some(&remaining))
                .expect("BFS layer has a predecessor");
            path.push(next.to_string());
            cur = next;
        }
        Ok(Some(path))
    }

    /// Validates a batch without mutating the graph and reports what merging
    /// it would change.
    pub fn plan_merge(&self, batch: &MergeBatch) -> Result<MergeDiff> {
        let mut diff = MergeDiff::default();
        let mut staged: HashMap<&str, EntityKind> = HashMap::new();
        for e in &batch.entities {
            e.validate()?;
            let existing = self
                .entities
                .get(&e.id)
                .map(|x| x.kind)
                .or_else(|| staged.get(e.id.as_str()).copied());
            match existing {
                Some(kind) if kind != e.kind => {
                    return Err(KgError::KindConflict {
                        id: e.id.clone(),
                        existing: kind,
                        declared: e.kind,
                    })
                }
                Some(_) => {}
                None => {
                    staged.insert(&e.id, e.kind);
                    diff.added_entities.push(e.clone());
                }
            }
        }
        let mut seen: BTreeSet<TripleKey> = BTreeSet::new();
        for t in &batch.triples {
            let key = t.key();
            for end in [&t.subject, &t.object] {
                if !self.contains(end) && !staged.contains_key(end.as_str()) {
                    return Err(KgError::Dangling {
                        triple: key,
                        missing: end.clone(),
                    });
                }
            }
            if self.triples.contains_key(&key) || !seen.insert(key) {
                diff.skipped.push(t.clone());
            } else {
                diff.added.push(t.clone());
            }
        }
        Ok(diff)
    }

    /// Applies a diff produced by [`plan_merge`](Self::plan_merge) against
    /// this same graph state.
    pub fn apply_diff(&mut self, diff: &MergeDiff) {
        for e in &diff.added_entities {
            self.entities
                .entry(e.id.clone())
                .or_insert_with(|| e.clone());
        }
        for t in &diff.added {
            self.insert_triple(t.clone());
        }
    }

    /// Atomic: either every non-duplicate triple lands or nothing changes.
    pub fn merge_triples(&mut self, batch: &MergeBatch) -> Result<MergeDiff> {
        let diff = self.plan_merge(batch)?;
        self.apply_diff(&diff);
        Ok(diff)
    }

    fn insert_triple(&mut self, t: Triple) {
        let key = t.key();
        if self.triples.contains_key(&key) {
            return;
        }
        let (subject, object) = (t.subject.clone(), t.object.clone());
        let (idx, _) = self.triples.insert_full(key, t);
        self.adjacency.entry(subject.clone()).or_default().push(idx);
        if object != subject {
            self.adjacency.entry(object).or_default().push(idx);
        }
    }

    /// Adds 1 to the usage count of each distinct key.
    pub fn increment_usage<'k>(
        &mut self,
        keys: impl IntoIterator<Item = &'k TripleKey>,
    ) -> Result<usize> {
        let keys: BTreeSet<&TripleKey> = keys.into_iter().collect();
        if let Some(missing) = keys.iter().find(|k| !self.triples.contains_key(**k)) {
            return Err(KgError::TripleNotFound((*missing).clone()));
        }
        for k in &keys {
            self.triples[*k].usage_count += 1;
        }
        Ok(keys.len())
    }

    /// Recomputes the adjacency index from scratch and compares.
    pub fn adjacency_consistent(&self) -> bool {
        let mut fresh: HashMap<&str, BTreeSet<usize>> = HashMap::new();
        for (i, t) in self.triples.values().enumerate() {
            if !self.contains(&t.subject) || !self.contains(&t.object) {
                return false;
            }
            fresh.entry(&t.subject).or_default().insert(i);
            fresh.entry(&t.object).or_default().insert(i);
        }
        let current: HashMap<&str, BTreeSet<usize>> = self
            .adjacency
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| (k.as_str(), v.iter().copied().collect()))
            .collect();
        fresh == current
    }

    pub(crate) fn insert_entity_unchecked(&mut self, e: Entity) {
        self.entities.insert(e.id.clone(), e);
    }

    pub(crate) fn insert_triple_unchecked(&mut self, t: Triple) {
        self.insert_triple(t);
    }

    pub(crate) fn set_usage(&mut self, key: &TripleKey, usage: u64) {
        if let Some(t) = self.triples.get_mut(key) {
            t.usage_count = usage;
        }
    }
}
