//! Dual-track diagnosis.
//!
//! The structured track links recognised symptom mentions to graph entities
//! and scores every disease adjacent to a linked symptom by the sum of
//! reciprocal shortest-path lengths to all linked symptoms. The generative
//! track is the preliminary differential from history taking. Both are
//! merged, grounded in retrieved graph context and re-ranked by the model.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError};
use crate::history::DdxEntry;
use crate::kg::{EntityKind, KgError, KnowledgeGraph, TripleKey};
use crate::linker::{
    self, EmbeddingProvider, LinkError, LinkResult, LinkerConfig, SimilarityIndex,
};
use crate::scalar::Scalar;
use crate::text::normalize_name;

#[derive(Debug, Error)]
pub enum DiagnosisError {
    #[error("history is empty")]
    EmptyHistory,
    #[error("no candidate diagnoses")]
    NoCandidates,
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

pub type Result<T, E = DiagnosisError> = std::result::Result<T, E>;

/// Number of final diagnoses.
pub const DEFAULT_TOP_K: usize = 3;
/// Kept and background symptom neighbors retrieved per disease, each.
pub const NEIGHBOR_CAP: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    Kg,
    Llm,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct CandidateDiagnosis<S: Scalar = f64> {
    pub disease_id: String,
    pub name: String,
    pub source: CandidateSource,
    pub kg_score: S,
    /// Linked symptom id → BFS distance, `None` when unreachable.
    pub distances: BTreeMap<String, Option<usize>>,
    pub llm_likelihood: Option<S>,
    pub relative_likelihood: Option<S>,
    pub severity: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RecognizedSymptoms<S: Scalar = f64> {
    pub mentions: Vec<String>,
    pub linked: Vec<String>,
    pub results: Vec<LinkResult<S>>,
}

/// Model-extracted symptom mentions, deduplicated in order.
pub fn recognize_symptoms(history_text: &str, gateway: &Gateway) -> Result<Vec<String>> {
    if history_text.trim().is_empty() {
        return Err(DiagnosisError::EmptyHistory);
    }
    Ok(gateway.recognize(history_text)?)
}

pub fn link_symptoms<S: Scalar>(
    mentions: &[String],
    index: &SimilarityIndex<S>,
    config: &LinkerConfig,
) -> Result<RecognizedSymptoms<S>> {
    let outcome = linker::link_all(mentions, index, config)?;
    Ok(RecognizedSymptoms {
        mentions: mentions.to_vec(),
        linked: outcome.matched,
        results: outcome.results,
    })
}

/// BFS distances from each linked symptom, computed once.
struct SymptomDistances<'g> {
    by_symptom: Vec<(&'g str, HashMap<&'g str, usize>)>,
}

impl<'g> SymptomDistances<'g> {
    fn new(graph: &'g KnowledgeGraph, linked: &[String]) -> Result<Self> {
        let mut by_symptom = Vec::with_capacity(linked.len());
        for s in linked {
            let id = graph.entity(s)?.id.as_str();
            by_symptom.push((id, graph.distances_from(id)?));
        }
        Ok(Self { by_symptom })
    }

    fn score<S: Scalar>(&self, disease: &str) -> (S, BTreeMap<String, Option<usize>>) {
        let mut total = S::zero();
        let mut distances = BTreeMap::new();
        for (sym, dist) in &self.by_symptom {
            let d = dist.get(disease).copied();
            if let Some(d) = d.filter(|&d| d > 0) {
                total = total + S::one() / S::lit(d as f64);
            }
            distances.insert(sym.to_string(), d);
        }
        (total, distances)
    }
}

fn candidate<S: Scalar>(
    graph: &KnowledgeGraph,
    disease_id: &str,
    source: CandidateSource,
    dist: &SymptomDistances<'_>,
) -> Result<CandidateDiagnosis<S>> {
    let e = graph.entity(disease_id)?;
    let (kg_score, distances) = dist.score(disease_id);
    Ok(CandidateDiagnosis {
        disease_id: e.id.clone(),
        name: e.name.clone(),
        source,
        kg_score,
        distances,
        llm_likelihood: None,
        relative_likelihood: None,
        severity: e.severity.unwrap_or(0),
    })
}

/// Reciprocal-path score of one disease against all linked symptoms.
pub fn kg_score<S: Scalar>(
    graph: &KnowledgeGraph,
    disease_id: &str,
    linked: &[String],
) -> Result<S> {
    graph.entity(disease_id)?;
    Ok(SymptomDistances::new(graph, linked)?.score(disease_id).0)
}

/// Every disease one hop from a linked symptom, scored; sorted by score
/// descending then id, truncated to `top`.
pub fn kg_candidates_top<S: Scalar>(
    graph: &KnowledgeGraph,
    linked: &[String],
    top: usize,
) -> Result<Vec<CandidateDiagnosis<S>>> {
    let dist = SymptomDistances::new(graph, linked)?;
    let mut pool = BTreeSet::new();
    for s in linked {
        for n in graph.one_hop_neighbors(s, Some(EntityKind::Disease))? {
            pool.insert(n.entity.id.as_str());
        }
    }
    let mut out = pool
        .into_iter()
        .map(|d| candidate::<S>(graph, d, CandidateSource::Kg, &dist))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| {
        b.kg_score
            .partial_cmp(&a.kg_score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.disease_id.cmp(&b.disease_id))
    });
    out.truncate(top);
    Ok(out)
}

pub fn kg_candidates<S: Scalar>(
    graph: &KnowledgeGraph,
    linked: &[String],
) -> Result<Vec<CandidateDiagnosis<S>>> {
    kg_candidates_top(graph, linked, DEFAULT_TOP_K)
}

/// Resolves a free-text disease name: exact normalized name first, then
/// embedding similarity against disease entities.
pub fn resolve_disease<S: Scalar>(
    graph: &KnowledgeGraph,
    name: &str,
    index: &SimilarityIndex<S>,
    config: &LinkerConfig,
) -> Result<Option<String>> {
    if let Some(e) = graph.find_by_name(name, Some(EntityKind::Disease)) {
        return Ok(Some(e.id.clone()));
    }
    Ok(linker::link(name, index, config)?.matched)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Combined<S: Scalar = f64> {
    pub candidates: Vec<CandidateDiagnosis<S>>,
    /// Differential names with no matching disease entity.
    pub unresolved: Vec<String>,
}

/// Union of the structured top list and the linked preliminary
/// differential, keyed by disease id.
pub fn combine_candidates<S: Scalar>(
    graph: &KnowledgeGraph,
    kg_top: &[CandidateDiagnosis<S>],
    preliminary: &[DdxEntry],
    linked_symptoms: &[String],
    disease_index: &SimilarityIndex<S>,
    config: &LinkerConfig,
) -> Result<Combined<S>> {
    let dist = SymptomDistances::new(graph, linked_symptoms)?;
    let mut candidates: Vec<CandidateDiagnosis<S>> = kg_top.to_vec();
    let mut unresolved = Vec::new();
    for entry in preliminary {
        match resolve_disease(graph, &entry.disease_name, disease_index, config)? {
            Some(id) => match candidates.iter_mut().find(|c| c.disease_id == id) {
                Some(c) => {
                    if c.source == CandidateSource::Kg {
                        c.source = CandidateSource::Both;
                    }
                }
                None => candidates.push(candidate(graph, &id, CandidateSource::Llm, &dist)?),
            },
            None => {
                log::warn!(
                    "differential entry {:?} has no graph entity",
                    entry.disease_name
                );
                unresolved.push(entry.disease_name.clone());
            }
        }
    }
    Ok(Combined {
        candidates,
        unresolved,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct NeighborMatch<S: Scalar = f64> {
    pub symptom_id: String,
    pub name: String,
    pub similarity: S,
    /// Linked symptom achieving the maximum similarity.
    pub closest_linked: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct CandidateEvidence<S: Scalar = f64> {
    pub disease_id: String,
    pub definition: String,
    pub matched_neighbors: Vec<NeighborMatch<S>>,
    pub background_neighbors: Vec<NeighborMatch<S>>,
    /// Linked symptom id → path from the disease; unreachable symptoms absent.
    pub paths: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct EvidenceContext<S: Scalar = f64> {
    pub candidates: Vec<CandidateEvidence<S>>,
}

/// Definition attribute, else the text of a definition neighbor.
pub fn definition_text(graph: &KnowledgeGraph, disease_id: &str) -> Result<String, KgError> {
    let e = graph.entity(disease_id)?;
    if let Some(t) = e
        .definition_text
        .as_deref()
        .filter(|t| !t.trim().is_empty())
    {
        return Ok(t.to_string());
    }
    Ok(graph
        .one_hop_neighbors(disease_id, Some(EntityKind::Definition))?
        .first()
        .map(|n| {
            n.entity
                .definition_text
                .clone()
                .unwrap_or_else(|| n.entity.name.clone())
        })
        .unwrap_or_default())
}

pub fn build_evidence_context<S: Scalar>(
    graph: &KnowledgeGraph,
    candidates: &[CandidateDiagnosis<S>],
    linked_symptoms: &[String],
    symptom_index: &SimilarityIndex<S>,
    config: &LinkerConfig,
) -> Result<EvidenceContext<S>> {
    let eps = S::lit(config.epsilon_s);
    let mut out = Vec::with_capacity(candidates.len());
    for c in candidates {
        let mut matched = Vec::new();
        let mut background = Vec::new();
        let mut seen = BTreeSet::new();
        for n in graph.one_hop_neighbors(&c.disease_id, Some(EntityKind::Symptom))? {
            if !seen.insert(n.entity.id.as_str()) {
                continue;
            }
            let mut best: Option<(S, &str)> = None;
            for l in linked_symptoms {
                let s = if *l == n.entity.id {
                    Some(S::one())
                } else {
                    symptom_index.similarity_between(&n.entity.id, l)
                };
                if let Some(s) = s {
                    if best.is_none_or(|(b, _)| s > b) {
                        best = Some((s, l.as_str()));
                    }
                }
            }
            let m = NeighborMatch {
                symptom_id: n.entity.id.clone(),
                name: n.entity.name.clone(),
                similarity: best.map_or(-S::one(), |b| b.0),
                closest_linked: best.map(|b| b.1.to_string()),
            };
            if m.similarity >= eps {
                matched.push(m);
            } else {
                background.push(m);
            }
        }
        for list in [&mut matched, &mut background] {
            list.sort_by(|a, b| {
                b.similarity
                    .partial_cmp(&a.similarity)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| a.symptom_id.cmp(&b.symptom_id))
            });
            list.truncate(NEIGHBOR_CAP);
        }
        let mut paths = BTreeMap::new();
        for l in linked_symptoms {
            if let Some(p) = graph.shortest_path(&c.disease_id, l)? {
                paths.insert(l.clone(), p);
            }
        }
        out.push(CandidateEvidence {
            disease_id: c.disease_id.clone(),
            definition: definition_text(graph, &c.disease_id)?,
            matched_neighbors: matched,
            background_neighbors: background,
            paths,
        });
    }
    Ok(EvidenceContext { candidates: out })
}

impl<S: Scalar> EvidenceContext<S> {
    /// Prompt rendering of the retrieved knowledge.
    pub fn to_prompt_text(&self, graph: &KnowledgeGraph) -> String {
        let name = |id: &str| {
            graph
                .entity(id)
                .map(|e| e.name.clone())
                .unwrap_or_else(|_| id.to_string())
        };
        let mut out = String::new();
        for c in &self.candidates {
            out.push_str(&format!("## {}\n", name(&c.disease_id)));
            if !c.definition.is_empty() {
                out.push_str(&format!("Definition: {}\n", c.definition));
            }
            let list = |v: &[NeighborMatch<S>]| {
                v.iter()
                    .map(|m| m.name.clone())
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            if !c.matched_neighbors.is_empty() {
                out.push_str(&format!(
                    "Symptoms matching the patient: {}\n",
                    list(&c.matched_neighbors)
                ));
            }
            if !c.background_neighbors.is_empty() {
                out.push_str(&format!(
                    "Other known symptoms: {}\n",
                    list(&c.background_neighbors)
                ));
            }
            for p in c.paths.values() {
                let names: Vec<String> = p.iter().map(|id| name(id)).collect();
                out.push_str(&format!("Path: {}\n", names.join(" -> ")));
            }
            out.push('\n');
        }
        out
    }

    /// Disease–symptom triples behind the retrieved neighbors.
    pub fn used_triples(&self, graph: &KnowledgeGraph) -> Vec<TripleKey> {
        let mut keys = BTreeSet::new();
        for c in &self.candidates {
            let ids: BTreeSet<&str> = c
                .matched_neighbors
                .iter()
                .chain(&c.background_neighbors)
                .map(|m| m.symptom_id.as_str())
                .collect();
            if let Ok(ns) = graph.one_hop_neighbors(&c.disease_id, Some(EntityKind::Symptom)) {
                keys.extend(
                    ns.into_iter()
                        .filter(|n| ids.contains(n.entity.id.as_str()))
                        .map(|n| n.triple.key()),
                );
            }
        }
        keys.into_iter().collect()
    }
}

/// Orders candidates by likelihood, then structured score, then id.
pub fn sort_ranked<S: Scalar>(candidates: &mut [CandidateDiagnosis<S>]) {
    candidates.sort_by(|a, b| {
        let la = a.llm_likelihood.unwrap_or_else(S::zero);
        let lb = b.llm_likelihood.unwrap_or_else(S::zero);
        lb.partial_cmp(&la)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                b.kg_score
                    .partial_cmp(&a.kg_score)
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then_with(|| a.disease_id.cmp(&b.disease_id))
    });
}

/// Assigns model likelihoods (clamped to `[0, 10]`, missing → 0) and keeps
/// the best `k`.
pub fn rank_and_select<S: Scalar>(
    history_text: &str,
    knowledge: &str,
    candidates: &[CandidateDiagnosis<S>],
    gateway: &Gateway,
    k: usize,
) -> Result<Vec<CandidateDiagnosis<S>>> {
    if candidates.is_empty() {
        return Err(DiagnosisError::NoCandidates);
    }
    let names: Vec<&str> = candidates.iter().map(|c| c.name.as_str()).collect();
    let scores = gateway.rank(history_text, &names.join("\n"), knowledge)?;
    let mut by_key: HashMap<String, f64> = HashMap::new();
    for s in &scores {
        let key = normalize_name(&s.name);
        let known = candidates
            .iter()
            .any(|c| normalize_name(&c.name) == key || normalize_name(&c.disease_id) == key);
        if !known {
            log::warn!("rank returned a score for unknown candidate {:?}", s.name);
            continue;
        }
        by_key.entry(key).or_insert(s.score);
    }
    let mut out = candidates.to_vec();
    for c in &mut out {
        let score = by_key
            .get(&normalize_name(&c.name))
            .or_else(|| by_key.get(&normalize_name(&c.disease_id)))
            .copied()
            .unwrap_or_else(|| {
                log::warn!("rank gave no score for {}; using 0", c.disease_id);
                0.0
            });
        let l = S::lit(score.clamp(0.0, 10.0));
        c.llm_likelihood = Some(l);
        c.relative_likelihood = Some(l * S::lit(10.0));
    }
    sort_ranked(&mut out);
    out.truncate(k);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosisConfig {
    pub linker: LinkerConfig,
    pub top_k: usize,
    pub kg_top: usize,
}

impl Default for DiagnosisConfig {
    fn default() -> Self {
        Self {
            linker: LinkerConfig::default(),
            top_k: DEFAULT_TOP_K,
            kg_top: DEFAULT_TOP_K,
        }
    }
}

/// Output of the structured track plus the linked differential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Prepared<S: Scalar = f64> {
    pub history_text: String,
    pub recognized: RecognizedSymptoms<S>,
    pub preliminary: Vec<DdxEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DiagnosisRecord<S: Scalar = f64> {
    pub mentions: Vec<String>,
    pub linked_symptoms: Vec<String>,
    pub kg_top: Vec<CandidateDiagnosis<S>>,
    pub combined: Vec<CandidateDiagnosis<S>>,
    pub unresolved: Vec<String>,
    pub candidates: Vec<CandidateDiagnosis<S>>,
    pub evidence_context: EvidenceContext<S>,
    /// Triples consulted for this record; callers bump their usage counts.
    pub used_triples: Vec<TripleKey>,
}

/// Runs the pipeline against a graph snapshot. Indexes are rebuilt per call
/// so results always reflect the current graph.
pub struct Diagnoser<S: Scalar = f64> {
    provider: Arc<dyn EmbeddingProvider>,
    config: DiagnosisConfig,
    _scalar: std::marker::PhantomData<S>,
}

impl<S: Scalar> Diagnoser<S> {
    pub fn new(provider: Arc<dyn EmbeddingProvider>, config: DiagnosisConfig) -> Result<Self> {
        config.linker.validate()?;
        Ok(Self {
            provider,
            config,
            _scalar: std::marker::PhantomData,
        })
    }

    pub fn config(&self) -> &DiagnosisConfig {
        &self.config
    }

    fn index(&self, graph: &KnowledgeGraph, kind: EntityKind) -> Result<SimilarityIndex<S>> {
        Ok(SimilarityIndex::build(
            graph,
            self.provider.clone(),
            Some(kind),
        )?)
    }

    /// Recognises and links symptoms.
    pub fn prepare(
        &self,
        graph: &KnowledgeGraph,
        history_text: &str,
        preliminary: &[DdxEntry],
        gateway: &Gateway,
    ) -> Result<Prepared<S>> {
        let mentions = recognize_symptoms(history_text, gateway)?;
        let index = self.index(graph, EntityKind::Symptom)?;
        Ok(Prepared {
            history_text: history_text.to_string(),
            recognized: link_symptoms(&mentions, &index, &self.config.linker)?,
            preliminary: preliminary.to_vec(),
        })
    }

    /// Structured top list and the combined set. Pure given the graph, so it
    /// can be repeated after evolution adds missing diseases.
    pub fn combine(
        &self,
        graph: &KnowledgeGraph,
        prepared: &Prepared<S>,
    ) -> Result<(Vec<CandidateDiagnosis<S>>, Combined<S>)> {
        let linked = &prepared.recognized.linked;
        let kg_top = kg_candidates_top(graph, linked, self.config.kg_top)?;
        let diseases = self.index(graph, EntityKind::Disease)?;
        let combined = combine_candidates(
            graph,
            &kg_top,
            &prepared.preliminary,
            linked,
            &diseases,
            &self.config.linker,
        )?;
        Ok((kg_top, combined))
    }

    /// Retrieves context and ranks the combined set.
    pub fn finalize(
        &self,
        graph: &KnowledgeGraph,
        prepared: &Prepared<S>,
        gateway: &Gateway,
    ) -> Result<DiagnosisRecord<S>> {
        let (kg_top, combined) = self.combine(graph, prepared)?;
        let linked = &prepared.recognized.linked;
        let symptoms = self.index(graph, EntityKind::Symptom)?;
        let context = build_evidence_context(
            graph,
            &combined.candidates,
            linked,
            &symptoms,
            &self.config.linker,
        )?;
        let knowledge = context.to_prompt_text(graph);
        let final_list = rank_and_select(
            &prepared.history_text,
            &knowledge,
            &combined.candidates,
            gateway,
            self.config.top_k,
        )?;
        let used_triples = context.used_triples(graph);
        Ok(DiagnosisRecord {
            mentions: prepared.recognized.mentions.clone(),
            linked_symptoms: linked.clone(),
            kg_top,
            combined: combined.candidates,
            unresolved: combined.unresolved,
            candidates: final_list,
            evidence_context: context,
            used_triples,
        })
    }

    pub fn run(
        &self,
        graph: &KnowledgeGraph,
        history_text: &str,
        preliminary: &[DdxEntry],
        gateway: &Gateway,
    ) -> Result<DiagnosisRecord<S>> {
        let prepared = self.prepare(graph, history_text, preliminary, gateway)?;
        self.finalize(graph, &prepared, gateway)
    }
}
