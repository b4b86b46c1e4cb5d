//! Expert-in-the-loop graph evolution.
//!
//! Diseases that are missing from the graph, whose knowledge has never been
//! used, or whose last review is too old become events on a worklist. Each
//! event is drafted by the model under fixed headings, parsed into triples,
//! curated by an expert and merged with reviewer provenance once redundant
//! triples have been removed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{parse::normalize_heading, Gateway, GatewayError, DRAFT_HEADINGS};
use crate::kg::{
    Entity, EntityKind, GraphStore, KgError, KnowledgeGraph, MergeBatch, MergeDiff, Provenance,
    Source, Triple, TripleKey,
};
use crate::linker::{EmbeddingProvider, LinkError, SimilarityIndex};
use crate::text::{normalize_name, slug};

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("event {0} not found")]
    NotFound(u64),
    #[error("event {id}: {message}")]
    InvalidState { id: u64, message: String },
    #[error("event {id} was modified concurrently (expected version {expected}, found {found})")]
    VersionConflict { id: u64, expected: u64, found: u64 },
    #[error("draft is missing mandated headings: {}", missing.join(", "))]
    MissingHeadings { missing: Vec<String> },
    #[error("draft produced no usable triples")]
    EmptyDraft,
    #[error("edit rejected: {0}")]
    InvalidEdit(String),
    #[error("merge conflict, retry after refreshing the draft: {0}")]
    MergeConflict(KgError),
    #[error("invalid evolution config: {0}")]
    Config(String),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("worklist io: {0}")]
    Io(String),
}

impl EvolutionError {
    pub fn is_retryable(&self) -> bool {
        match self {
            EvolutionError::MergeConflict(_) | EvolutionError::VersionConflict { .. } => true,
            EvolutionError::Gateway(e) => e.is_retryable(),
            _ => false,
        }
    }
}

pub type Result<T, E = EvolutionError> = std::result::Result<T, E>;

/// Relations a drafted subgraph may use.
pub const RELATIONS: [&str; 7] = [
    "has_symptom",
    "red_flag_symptom",
    "has_definition",
    "typical_course_note",
    "treats",
    "first_line_treats",
    "second_line_treats",
];

fn is_treatment(relation: &str) -> bool {
    matches!(
        relation,
        "treats" | "first_line_treats" | "second_line_treats"
    )
}

/// Kind of the non-disease endpoint for a relation.
fn far_kind(relation: &str) -> EntityKind {
    match relation {
        "has_symptom" | "red_flag_symptom" => EntityKind::Symptom,
        "has_definition" => EntityKind::Definition,
        "typical_course_note" => EntityKind::Other,
        _ => EntityKind::Drug,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Absent,
    Unused,
    Stale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventStatus {
    Pending,
    Drafted,
    UnderReview,
    Approved,
    Merged,
    Rejected,
}

impl EventStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, EventStatus::Merged | EventStatus::Rejected)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearDuplicate {
    pub triple: TripleKey,
    pub matched_existing: TripleKey,
    pub similarity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub exact_removed: usize,
    pub exact: Vec<TripleKey>,
    pub near_removed: Vec<NearDuplicate>,
}

impl DedupReport {
    pub fn is_empty(&self) -> bool {
        self.exact_removed == 0 && self.near_removed.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    AddTriple,
    DeleteTriple,
    RelabelRelation,
    EditText,
    RebalanceNote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditPayload {
    AddTriple {
        triple: TripleKey,
        /// Entities the new triple introduces; staged for the merge.
        #[serde(default)]
        new_entities: Vec<Entity>,
    },
    DeleteTriple {
        triple: TripleKey,
    },
    RelabelRelation {
        triple: TripleKey,
        relation: String,
    },
    EditText {
        text: String,
    },
    RebalanceNote {
        note: String,
    },
}

impl EditPayload {
    pub fn kind(&self) -> EditKind {
        match self {
            EditPayload::AddTriple { .. } => EditKind::AddTriple,
            EditPayload::DeleteTriple { .. } => EditKind::DeleteTriple,
            EditPayload::RelabelRelation { .. } => EditKind::RelabelRelation,
            EditPayload::EditText { .. } => EditKind::EditText,
            EditPayload::RebalanceNote { .. } => EditKind::RebalanceNote,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditAction {
    pub kind: EditKind,
    pub payload: EditPayload,
    pub actor: String,
    pub timestamp: DateTime<Utc>,
}

impl EditAction {
    pub fn new(payload: EditPayload, actor: impl Into<String>, timestamp: DateTime<Utc>) -> Self {
        Self {
            kind: payload.kind(),
            payload,
            actor: actor.into(),
            timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionEvent {
    pub id: u64,
    pub version: u64,
    pub disease_name: String,
    pub disease_id: Option<String>,
    pub trigger: Trigger,
    pub status: EventStatus,
    pub draft_text: Option<String>,
    pub draft_triples: Option<Vec<Triple>>,
    /// Entities the draft introduces that the graph does not have yet.
    #[serde(default)]
    pub staged_entities: Vec<Entity>,
    pub dedup_report: Option<DedupReport>,
    pub expert_edits: Vec<EditAction>,
    pub merged_diff: Option<MergeDiff>,
    /// Draft triples taken out by dedup or by the expert.
    #[serde(default)]
    pub removed_draft_triples: Vec<TripleKey>,
    #[serde(default)]
    pub notes: Vec<String>,
    #[serde(default)]
    pub diagnostics: Vec<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl EvolutionEvent {
    pub fn new(
        id: u64,
        disease_name: impl Into<String>,
        disease_id: Option<String>,
        trigger: Trigger,
        now: DateTime<Utc>,
    ) -> Self {
        Self {
            id,
            version: 0,
            disease_name: disease_name.into(),
            disease_id,
            trigger,
            status: EventStatus::Pending,
            draft_text: None,
            draft_triples: None,
            staged_entities: Vec::new(),
            dedup_report: None,
            expert_edits: Vec::new(),
            merged_diff: None,
            removed_draft_triples: Vec::new(),
            notes: Vec::new(),
            diagnostics: Vec::new(),
            created_at: now,
            updated_at: now,
        }
    }

    fn ensure(&self, allowed: &[EventStatus], action: &str) -> Result<()> {
        if allowed.contains(&self.status) {
            Ok(())
        } else {
            Err(EvolutionError::InvalidState {
                id: self.id,
                message: format!("cannot {action} while {:?}", self.status),
            })
        }
    }

    fn touch(&mut self, now: DateTime<Utc>) {
        self.version += 1;
        self.updated_at = self.updated_at.max(now);
    }

    fn triples(&self) -> &[Triple] {
        self.draft_triples.as_deref().unwrap_or_default()
    }

    /// The expert diff view: what the merge added (or would add) and what was
    /// dropped from the draft.
    pub fn diff_view(&self) -> EventDiff {
        match &self.merged_diff {
            Some(d) => EventDiff {
                added_entities: d.added_entities.clone(),
                added_triples: d.added.clone(),
                removed_draft_triples: self.removed_draft_triples.clone(),
            },
            None => EventDiff {
                added_entities: self.staged_entities.clone(),
                added_triples: self.triples().to_vec(),
                removed_draft_triples: self.removed_draft_triples.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventDiff {
    pub added_entities: Vec<Entity>,
    pub added_triples: Vec<Triple>,
    pub removed_draft_triples: Vec<TripleKey>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolutionConfig {
    pub epsilon_t: f64,
    pub staleness_days: i64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            epsilon_t: 0.90,
            staleness_days: 365,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon_t) {
            return Err(EvolutionError::Config(format!(
                "epsilon_t must be within [0, 1], got {}",
                self.epsilon_t
            )));
        }
        if self.staleness_days <= 0 {
            return Err(EvolutionError::Config(
                "staleness_days must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn staleness(&self) -> Duration {
        Duration::days(self.staleness_days)
    }
}

/// A trigger check outcome before it becomes a worklist event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerHit {
    pub disease_name: String,
    pub disease_id: Option<String>,
    pub trigger: Trigger,
}

/// Resolves an id or exact (normalized) name to a disease entity.
pub fn find_disease<'g>(graph: &'g KnowledgeGraph, name_or_id: &str) -> Option<&'g Entity> {
    graph
        .entity(name_or_id)
        .ok()
        .filter(|e| e.kind == EntityKind::Disease)
        .or_else(|| graph.find_by_name(name_or_id, Some(EntityKind::Disease)))
}

/// Trigger for one disease, if any. A disease counts as unused only while it
/// has never been through evolution, so a freshly merged subgraph does not
/// immediately re-trigger itself.
pub fn check_trigger(
    graph: &KnowledgeGraph,
    name_or_id: &str,
    config: &EvolutionConfig,
    now: DateTime<Utc>,
) -> Option<TriggerHit> {
    let Some(e) = find_disease(graph, name_or_id) else {
        return Some(TriggerHit {
            disease_name: name_or_id.to_string(),
            disease_id: None,
            trigger: Trigger::Absent,
        });
    };
    let hit = |trigger| {
        Some(TriggerHit {
            disease_name: e.name.clone(),
            disease_id: Some(e.id.clone()),
            trigger,
        })
    };
    match graph.last_evolution(&e.id) {
        Some(at) if now - at > config.staleness() => hit(Trigger::Stale),
        Some(_) => None,
        None => {
            let unused = graph
                .one_hop_neighbors(&e.id, None)
                .map(|ns| ns.iter().all(|n| n.triple.usage_count == 0))
                .unwrap_or(false);
            if unused {
                hit(Trigger::Unused)
            } else {
                None
            }
        }
    }
}

/// Hits for every listed disease (ids or names), one per disease.
pub fn detect_triggers(
    graph: &KnowledgeGraph,
    diseases: &[String],
    config: &EvolutionConfig,
    now: DateTime<Utc>,
) -> Vec<TriggerHit> {
    let mut seen = BTreeSet::new();
    diseases
        .iter()
        .filter_map(|d| check_trigger(graph, d, config, now))
        .filter(|h| seen.insert(normalize_name(&h.disease_name)))
        .collect()
}

/// Flattened text of a triple; the relation label stays one token.
pub fn triple_text(subject: &str, relation: &str, object: &str) -> String {
    format!("{subject} {} {object}", relation.replace('_', ""))
}

fn entity_name<'a>(graph: &'a KnowledgeGraph, staged: &'a [Entity], id: &'a str) -> &'a str {
    graph
        .entity(id)
        .ok()
        .or_else(|| staged.iter().find(|e| e.id == id))
        .map_or(id, |e| e.name.as_str())
}

/// Drops exact duplicates of graph triples, then any triple whose flattened
/// text is at least `epsilon_t` similar to an existing triple's. The existing
/// triple is always the one kept.
pub fn check_redundancy(
    draft: &[Triple],
    staged: &[Entity],
    graph: &KnowledgeGraph,
    provider: &Arc<dyn EmbeddingProvider>,
    config: &EvolutionConfig,
) -> Result<(DedupReport, Vec<Triple>)> {
    let mut report = DedupReport::default();
    let mut fresh = Vec::new();
    for t in draft {
        if graph.contains_triple(&t.key()) {
            report.exact_removed += 1;
            report.exact.push(t.key());
        } else {
            fresh.push(t);
        }
    }
    if fresh.is_empty() || graph.triple_count() == 0 {
        return Ok((report, fresh.into_iter().cloned().collect()));
    }
    let existing: Vec<&Triple> = graph.triples().collect();
    let texts: Vec<String> = existing
        .iter()
        .map(|t| {
            triple_text(
                entity_name(graph, &[], &t.subject),
                &t.relation,
                entity_name(graph, &[], &t.object),
            )
        })
        .collect();
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let vectors = provider.embed_batch(&refs)?;
    let items = existing
        .iter()
        .zip(vectors)
        .map(|(t, v)| (t.key().to_string(), v))
        .collect();
    let index = SimilarityIndex::<f64>::from_items(provider.clone(), items)?;
    let mut survivors = Vec::new();
    for t in fresh {
        let text = triple_text(
            entity_name(graph, staged, &t.subject),
            &t.relation,
            entity_name(graph, staged, &t.object),
        );
        let q = index.embed_query(&text)?;
        match index.nearest(&q) {
            Some((key, sim)) if sim >= config.epsilon_t => {
                let matched = existing
                    .iter()
                    .find(|e| e.key().to_string() == key)
                    .expect("indexed key exists")
                    .key();
                report.near_removed.push(NearDuplicate {
                    triple: t.key(),
                    matched_existing: matched,
                    similarity: sim,
                });
            }
            _ => survivors.push(t.clone()),
        }
    }
    Ok((report, survivors))
}

/// Existing one-hop knowledge passed verbatim to the drafting prompt.
pub fn neighbor_context(graph: &KnowledgeGraph, disease_id: Option<&str>) -> String {
    let Some(id) = disease_id else {
        return "(none)".into();
    };
    let Ok(ns) = graph.one_hop_neighbors(id, None) else {
        return "(none)".into();
    };
    if ns.is_empty() {
        return "(none)".into();
    }
    ns.iter()
        .map(|n| {
            let t = n.triple;
            format!(
                "{}|{}|{}",
                entity_name(graph, &[], &t.subject),
                t.relation,
                entity_name(graph, &[], &t.object)
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Builds ids for new entities, avoiding graph and staged collisions.
struct Stager<'g> {
    graph: &'g KnowledgeGraph,
    staged: Vec<Entity>,
}

impl<'g> Stager<'g> {
    fn resolve(&mut self, name: &str, kind: EntityKind) -> String {
        if let Some(e) = self.graph.find_by_name(name, Some(kind)) {
            return e.id.clone();
        }
        let key = normalize_name(name);
        if let Some(e) = self
            .staged
            .iter()
            .find(|e| e.kind == kind && normalize_name(&e.name) == key)
        {
            return e.id.clone();
        }
        let base = slug(name);
        let mut id = base.clone();
        let mut n = 2;
        while self.graph.contains(&id) || self.staged.iter().any(|e| e.id == id) {
            id = format!("{base}-{n}");
            n += 1;
        }
        self.staged.push(Entity::new(id.clone(), name.trim(), kind));
        id
    }
}

/// Maps extracted `(s, r, o)` name triples onto ids, staging new entities.
/// Returns triples, staged entities (disease first when new) and diagnostics
/// for lines that were dropped.
fn materialize(
    graph: &KnowledgeGraph,
    disease_name: &str,
    disease_id: Option<&str>,
    raw: &[(String, String, String)],
    now: DateTime<Utc>,
) -> (String, Vec<Triple>, Vec<Entity>, Vec<String>) {
    let mut st = Stager {
        graph,
        staged: Vec::new(),
    };
    let did = match disease_id {
        Some(id) => id.to_string(),
        None => st.resolve(disease_name, EntityKind::Disease),
    };
    let disease_key = normalize_name(disease_name);
    let mut triples: Vec<Triple> = Vec::new();
    let mut diagnostics = Vec::new();
    for (s, r, o) in raw {
        let relation = normalize_name(r).replace(' ', "_");
        if !RELATIONS.contains(&relation.as_str()) {
            diagnostics.push(format!(
                "dropped {s}|{r}|{o}: relation outside the controlled vocabulary"
            ));
            continue;
        }
        let far = if normalize_name(s) == disease_key {
            o
        } else if normalize_name(o) == disease_key {
            s
        } else {
            diagnostics.push(format!(
                "dropped {s}|{r}|{o}: does not involve {disease_name}"
            ));
            continue;
        };
        let kind = far_kind(&relation);
        let far_id = match kind {
            EntityKind::Definition => {
                let id = format!("{did}-definition");
                if !graph.contains(&id) && !st.staged.iter().any(|e| e.id == id) {
                    st.staged.push(
                        Entity::new(&id, format!("{disease_name} definition"), kind)
                            .with_definition(far.trim()),
                    );
                }
                id
            }
            _ => st.resolve(far, kind),
        };
        let (subject, object) = if is_treatment(&relation) {
            (far_id, did.clone())
        } else {
            (did.clone(), far_id)
        };
        let mut t = Triple::new(
            subject,
            relation,
            object,
            Provenance {
                source: Source::LlmDraft,
                reviewer: None,
                reviewed_at: None,
            },
        );
        t.created_at = Some(now);
        if !triples.iter().any(|x| x.key() == t.key()) {
            triples.push(t);
        }
    }
    (did, triples, st.staged, diagnostics)
}

fn missing_headings(sections: &[(String, String)]) -> Vec<String> {
    DRAFT_HEADINGS
        .iter()
        .filter(|h| {
            let n = normalize_heading(h);
            !sections
                .iter()
                .any(|(s, body)| *s == n && !body.trim().is_empty())
        })
        .map(|h| h.to_string())
        .collect()
}

/// Drafts and extracts the subgraph for a pending event.
pub fn draft_subgraph(
    event: &EvolutionEvent,
    graph: &KnowledgeGraph,
    gateway: &Gateway,
    now: DateTime<Utc>,
) -> Result<EvolutionEvent> {
    event.ensure(&[EventStatus::Pending], "draft")?;
    let neighbors = neighbor_context(graph, event.disease_id.as_deref());
    let (text, sections) = gateway.draft_disease(&event.disease_name, &neighbors)?;
    let missing = missing_headings(&sections);
    if !missing.is_empty() {
        return Err(EvolutionError::MissingHeadings { missing });
    }
    let raw = gateway.extract_triples(&event.disease_name, &text, &RELATIONS.join(", "))?;
    let (did, triples, staged, diagnostics) = materialize(
        graph,
        &event.disease_name,
        event.disease_id.as_deref(),
        &raw,
        now,
    );
    if triples.is_empty() {
        return Err(EvolutionError::EmptyDraft);
    }
    let mut e = event.clone();
    e.disease_id = Some(did);
    e.draft_text = Some(text);
    e.draft_triples = Some(triples);
    e.staged_entities = staged;
    e.diagnostics.extend(diagnostics);
    e.status = EventStatus::Drafted;
    e.touch(now);
    Ok(e)
}

fn known_entity(graph: &KnowledgeGraph, staged: &[Entity], id: &str) -> bool {
    graph.contains(id) || staged.iter().any(|e| e.id == id)
}

/// Appends and applies one expert edit.
pub fn apply_expert_edit(
    event: &EvolutionEvent,
    action: EditAction,
    graph: &KnowledgeGraph,
) -> Result<EvolutionEvent> {
    event.ensure(&[EventStatus::Drafted, EventStatus::UnderReview], "edit")?;
    if action.actor.trim().is_empty() {
        return Err(EvolutionError::InvalidEdit("edit has no actor".into()));
    }
    let mut e = event.clone();
    let triples = e.draft_triples.get_or_insert_with(Vec::new);
    let position = |triples: &[Triple], k: &TripleKey| triples.iter().position(|t| t.key() == *k);
    match &action.payload {
        EditPayload::AddTriple {
            triple,
            new_entities,
        } => {
            if !RELATIONS.contains(&triple.relation.as_str()) {
                return Err(EvolutionError::InvalidEdit(format!(
                    "relation {} is outside the controlled vocabulary",
                    triple.relation
                )));
            }
            for ne in new_entities {
                ne.validate()?;
                if !known_entity(graph, &e.staged_entities, &ne.id) {
                    e.staged_entities.push(ne.clone());
                }
            }
            for end in [&triple.subject, &triple.object] {
                if !known_entity(graph, &e.staged_entities, end) {
                    return Err(EvolutionError::InvalidEdit(format!("unknown entity {end}")));
                }
            }
            if position(triples, triple).is_some() {
                return Err(EvolutionError::InvalidEdit(format!(
                    "{triple} is already in the draft"
                )));
            }
            let mut t = Triple::new(
                &triple.subject,
                &triple.relation,
                &triple.object,
                Provenance {
                    source: Source::ExpertEdit,
                    reviewer: None,
                    reviewed_at: None,
                },
            );
            t.created_at = Some(action.timestamp);
            triples.push(t);
        }
        EditPayload::DeleteTriple { triple } => {
            let i = position(triples, triple).ok_or_else(|| {
                EvolutionError::InvalidEdit(format!("{triple} is not in the draft"))
            })?;
            triples.remove(i);
            e.removed_draft_triples.push(triple.clone());
        }
        EditPayload::RelabelRelation { triple, relation } => {
            if !RELATIONS.contains(&relation.as_str()) {
                return Err(EvolutionError::InvalidEdit(format!(
                    "relation {relation} is outside the controlled vocabulary"
                )));
            }
            let i = position(triples, triple).ok_or_else(|| {
                EvolutionError::InvalidEdit(format!("{triple} is not in the draft"))
            })?;
            let mut relabeled = triples[i].clone();
            relabeled.relation = relation.clone();
            relabeled.provenance.source = Source::ExpertEdit;
            if position(triples, &relabeled.key()).is_some() {
                return Err(EvolutionError::InvalidEdit(format!(
                    "{} is already in the draft",
                    relabeled.key()
                )));
            }
            triples[i] = relabeled;
        }
        EditPayload::EditText { text } => e.draft_text = Some(text.clone()),
        EditPayload::RebalanceNote { note } => e.notes.push(note.clone()),
    }
    let at = action.timestamp;
    e.expert_edits.push(action);
    e.status = EventStatus::UnderReview;
    e.touch(at);
    Ok(e)
}

/// Something that can receive an approved subgraph.
pub trait GraphSink {
    fn graph(&self) -> &KnowledgeGraph;
    fn merge(&mut self, batch: &MergeBatch) -> Result<MergeDiff, KgError>;
    fn mark_evolved(&mut self, disease_id: &str, at: DateTime<Utc>) -> Result<(), KgError>;
}

impl GraphSink for KnowledgeGraph {
    fn graph(&self) -> &KnowledgeGraph {
        self
    }

    fn merge(&mut self, batch: &MergeBatch) -> Result<MergeDiff, KgError> {
        self.merge_triples(batch)
    }

    fn mark_evolved(&mut self, disease_id: &str, at: DateTime<Utc>) -> Result<(), KgError> {
        self.set_last_evolution(disease_id, at)
    }
}

impl GraphSink for GraphStore {
    fn graph(&self) -> &KnowledgeGraph {
        GraphStore::graph(self)
    }

    fn merge(&mut self, batch: &MergeBatch) -> Result<MergeDiff, KgError> {
        GraphStore::merge(self, batch)
    }

    fn mark_evolved(&mut self, disease_id: &str, at: DateTime<Utc>) -> Result<(), KgError> {
        GraphStore::mark_evolved(self, disease_id, at)
    }
}

/// Dedups, stamps provenance and merges. On a merge conflict the event is
/// returned unchanged inside the error path so the caller can retry.
pub fn approve_and_merge(
    event: &EvolutionEvent,
    sink: &mut dyn GraphSink,
    provider: &Arc<dyn EmbeddingProvider>,
    config: &EvolutionConfig,
    reviewer: &str,
    now: DateTime<Utc>,
) -> Result<(EvolutionEvent, MergeDiff)> {
    event.ensure(&[EventStatus::Drafted, EventStatus::UnderReview], "approve")?;
    if reviewer.trim().is_empty() {
        return Err(EvolutionError::InvalidEdit(
            "approval needs a reviewer".into(),
        ));
    }
    let disease_id = event
        .disease_id
        .clone()
        .ok_or_else(|| EvolutionError::InvalidState {
            id: event.id,
            message: "draft has no disease id".into(),
        })?;
    let (report, survivors) = check_redundancy(
        event.triples(),
        &event.staged_entities,
        sink.graph(),
        provider,
        config,
    )?;
    let stamped: Vec<Triple> = survivors
        .into_iter()
        .map(|mut t| {
            t.provenance.reviewer = Some(reviewer.to_string());
            t.provenance.reviewed_at = Some(now);
            t
        })
        .collect();
    let used: BTreeSet<&str> = stamped
        .iter()
        .flat_map(|t| [t.subject.as_str(), t.object.as_str()])
        .chain([disease_id.as_str()])
        .collect();
    let batch = MergeBatch {
        entities: event
            .staged_entities
            .iter()
            .filter(|e| used.contains(e.id.as_str()))
            .cloned()
            .collect(),
        triples: stamped,
    };
    let diff = sink.merge(&batch).map_err(|e| match e {
        KgError::Dangling { .. } | KgError::KindConflict { .. } | KgError::NotFound(_) => {
            EvolutionError::MergeConflict(e)
        }
        other => EvolutionError::Kg(other),
    })?;
    sink.mark_evolved(&disease_id, now)?;
    let mut e = event.clone();
    e.status = EventStatus::Approved;
    e.touch(now);
    e.removed_draft_triples.extend(report.exact.iter().cloned());
    e.removed_draft_triples
        .extend(report.near_removed.iter().map(|n| n.triple.clone()));
    if !report.near_removed.is_empty() {
        e.diagnostics.push(format!(
            "{} near-duplicate triple(s) dropped in favour of existing knowledge",
            report.near_removed.len()
        ));
    }
    e.dedup_report = Some(report);
    e.merged_diff = Some(diff.clone());
    e.status = EventStatus::Merged;
    e.touch(now);
    Ok((e, diff))
}

pub fn reject(
    event: &EvolutionEvent,
    actor: &str,
    reason: &str,
    now: DateTime<Utc>,
) -> Result<EvolutionEvent> {
    event.ensure(
        &[
            EventStatus::Pending,
            EventStatus::Drafted,
            EventStatus::UnderReview,
            EventStatus::Approved,
        ],
        "reject",
    )?;
    let mut e = event.clone();
    e.notes.push(format!("rejected by {actor}: {reason}"));
    e.status = EventStatus::Rejected;
    e.touch(now);
    Ok(e)
}

/// The knowledge task list. Events are replaced wholesale under an optimistic
/// version check.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Worklist {
    events: BTreeMap<u64, EvolutionEvent>,
    next_id: u64,
}

impl Worklist {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> impl Iterator<Item = &EvolutionEvent> {
        self.events.values()
    }

    pub fn get(&self, id: u64) -> Result<&EvolutionEvent> {
        self.events.get(&id).ok_or(EvolutionError::NotFound(id))
    }

    pub fn open_event_for(&self, disease: &str) -> Option<&EvolutionEvent> {
        let key = normalize_name(disease);
        self.events.values().find(|e| {
            !e.status.is_terminal()
                && (normalize_name(&e.disease_name) == key
                    || e.disease_id.as_deref() == Some(disease))
        })
    }

    /// Adds events for hits that have no open event yet; returns new ids.
    pub fn enqueue(&mut self, hits: &[TriggerHit], now: DateTime<Utc>) -> Vec<u64> {
        let mut ids = Vec::new();
        for h in hits {
            let dup = self.open_event_for(&h.disease_name).is_some()
                || h.disease_id
                    .as_deref()
                    .is_some_and(|d| self.open_event_for(d).is_some());
            if dup {
                continue;
            }
            self.next_id += 1;
            let id = self.next_id;
            self.events.insert(
                id,
                EvolutionEvent::new(id, &h.disease_name, h.disease_id.clone(), h.trigger, now),
            );
            ids.push(id);
        }
        ids
    }

    /// Detects triggers and enqueues them in one step.
    pub fn detect(
        &mut self,
        graph: &KnowledgeGraph,
        diseases: &[String],
        config: &EvolutionConfig,
        now: DateTime<Utc>,
    ) -> Vec<u64> {
        let hits = detect_triggers(graph, diseases, config, now);
        self.enqueue(&hits, now)
    }

    /// Replaces an event if its stored version still equals `expected`.
    pub fn replace(&mut self, expected: u64, event: EvolutionEvent) -> Result<()> {
        let cur = self
            .events
            .get(&event.id)
            .ok_or(EvolutionError::NotFound(event.id))?;
        if cur.version != expected {
            return Err(EvolutionError::VersionConflict {
                id: event.id,
                expected,
                found: cur.version,
            });
        }
        self.events.insert(event.id, event);
        Ok(())
    }

    fn checked(&self, id: u64, expected: Option<u64>) -> Result<&EvolutionEvent> {
        let e = self.get(id)?;
        match expected {
            Some(v) if v != e.version => Err(EvolutionError::VersionConflict {
                id,
                expected: v,
                found: e.version,
            }),
            _ => Ok(e),
        }
    }

    /// Drafts an event; a rejected draft leaves it pending with a diagnostic.
    pub fn draft(
        &mut self,
        id: u64,
        graph: &KnowledgeGraph,
        gateway: &Gateway,
        now: DateTime<Utc>,
    ) -> Result<&EvolutionEvent> {
        let cur = self.checked(id, None)?.clone();
        match draft_subgraph(&cur, graph, gateway, now) {
            Ok(e) => {
                self.replace(cur.version, e)?;
            }
            Err(err @ (EvolutionError::MissingHeadings { .. } | EvolutionError::EmptyDraft)) => {
                let mut e = cur.clone();
                e.diagnostics.push(format!("draft rejected: {err}"));
                e.touch(now);
                self.replace(cur.version, e)?;
                return Err(err);
            }
            Err(err) => return Err(err),
        }
        self.get(id)
    }

    pub fn edit(
        &mut self,
        id: u64,
        expected: Option<u64>,
        action: EditAction,
        graph: &KnowledgeGraph,
    ) -> Result<&EvolutionEvent> {
        let cur = self.checked(id, expected)?;
        let version = cur.version;
        let e = apply_expert_edit(cur, action, graph)?;
        self.replace(version, e)?;
        self.get(id)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn approve(
        &mut self,
        id: u64,
        expected: Option<u64>,
        sink: &mut dyn GraphSink,
        provider: &Arc<dyn EmbeddingProvider>,
        config: &EvolutionConfig,
        reviewer: &str,
        now: DateTime<Utc>,
    ) -> Result<MergeDiff> {
        let cur = self.checked(id, expected)?;
        let version = cur.version;
        let (e, diff) = approve_and_merge(cur, sink, provider, config, reviewer, now)?;
        self.replace(version, e)?;
        Ok(diff)
    }

    pub fn reject(
        &mut self,
        id: u64,
        expected: Option<u64>,
        actor: &str,
        reason: &str,
        now: DateTime<Utc>,
    ) -> Result<&EvolutionEvent> {
        let cur = self.checked(id, expected)?;
        let version = cur.version;
        let e = reject(cur, actor, reason, now)?;
        self.replace(version, e)?;
        self.get(id)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self.events.values().collect::<Vec<_>>()).expect("events serialize")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let text =
            serde_json::to_string_pretty(self).map_err(|e| EvolutionError::Io(e.to_string()))?;
        std::fs::write(&tmp, text).map_err(|e| EvolutionError::Io(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| EvolutionError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::new());
        }
        let text = std::fs::read_to_string(path).map_err(|e| EvolutionError::Io(e.to_string()))?;
        serde_json::from_str(&text)
            .map_err(|e| EvolutionError::Io(format!("{}: {e}", path.display())))
    }
}
