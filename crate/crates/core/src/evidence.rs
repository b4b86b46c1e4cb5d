//! Per-diagnosis evidence bundles and the reasoning report.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnosis::definition_text;
use crate::gateway::{Gateway, GatewayError};
use crate::kg::{EntityKind, KgError, KnowledgeGraph, Triple, TripleKey};
use crate::text::normalize_name;

#[derive(Debug, Error)]
pub enum EvidenceError {
    #[error("report is finalized")]
    Finalized,
    #[error("missing required fields: {}", .0.join(", "))]
    MissingFields(Vec<String>),
    #[error("no {list} item at position {index}")]
    BadIndex { list: &'static str, index: usize },
    #[error("invalid edit: {0}")]
    InvalidEdit(String),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

pub type Result<T, E = EvidenceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceLabel {
    SubjectiveSymptom,
    ObjectiveGuideline,
    InferredReasoning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTriple {
    /// Prompt-facing id, `S<n>` for symptom edges and `D<n>` for drug edges.
    pub evidence_id: String,
    pub triple: Triple,
    /// 1 is most important.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceBundle {
    pub disease_id: String,
    pub disease_name: String,
    pub definition: Option<String>,
    pub definition_edges: Vec<Triple>,
    pub symptom_edges: Vec<RankedTriple>,
    /// Linked symptom id → path from the disease; unreachable symptoms absent.
    pub paths: BTreeMap<String, Vec<String>>,
    pub drug_edges: Vec<RankedTriple>,
    /// Filled on request per drug.
    pub drug_extended: BTreeMap<String, Vec<TripleKey>>,
    /// `"s|r|o"` → label.
    pub labels: BTreeMap<String, EvidenceLabel>,
}

fn ranked(prefix: &str, triples: Vec<Triple>) -> Vec<RankedTriple> {
    triples
        .into_iter()
        .enumerate()
        .map(|(i, triple)| RankedTriple {
            evidence_id: format!("{prefix}{}", i + 1),
            triple,
            rank: i + 1,
        })
        .collect()
}

/// Collects definition, symptom edges, paths to linked symptoms and drug
/// edges for one disease from a graph snapshot. The caller records usage of
/// [`EvidenceBundle::included_keys`].
pub fn build_bundle(
    graph: &KnowledgeGraph,
    disease_id: &str,
    linked_symptoms: &[String],
) -> Result<EvidenceBundle> {
    let disease = graph.entity(disease_id)?;
    let of_kind = |k| -> Result<Vec<Triple>> {
        Ok(graph
            .one_hop_neighbors(disease_id, Some(k))?
            .into_iter()
            .map(|n| n.triple.clone())
            .collect())
    };
    let definition = definition_text(graph, disease_id)?;
    let mut paths = BTreeMap::new();
    for s in linked_symptoms {
        if let Some(p) = graph.shortest_path(disease_id, s)? {
            paths.insert(s.clone(), p);
        }
    }
    Ok(EvidenceBundle {
        disease_id: disease.id.clone(),
        disease_name: disease.name.clone(),
        definition: (!definition.is_empty()).then_some(definition),
        definition_edges: of_kind(EntityKind::Definition)?,
        symptom_edges: ranked("S", of_kind(EntityKind::Symptom)?),
        paths,
        drug_edges: ranked("D", of_kind(EntityKind::Drug)?),
        drug_extended: BTreeMap::new(),
        labels: BTreeMap::new(),
    })
}

impl EvidenceBundle {
    /// Every triple the bundle carries, without repeats.
    pub fn included_keys(&self) -> Vec<TripleKey> {
        let keys: BTreeSet<TripleKey> = self
            .definition_edges
            .iter()
            .chain(self.symptom_edges.iter().map(|r| &r.triple))
            .chain(self.drug_edges.iter().map(|r| &r.triple))
            .map(Triple::key)
            .collect();
        keys.into_iter().collect()
    }

    fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.definition_edges
            .iter()
            .chain(self.symptom_edges.iter().map(|r| &r.triple))
            .chain(self.drug_edges.iter().map(|r| &r.triple))
    }

    /// Loads one drug's own neighbors.
    pub fn expand_drug(&mut self, graph: &KnowledgeGraph, drug_id: &str) -> Result<&[TripleKey]> {
        if !self.drug_edges.iter().any(|r| r.triple.touches(drug_id)) {
            return Err(EvidenceError::InvalidEdit(format!(
                "{drug_id} is not a drug in this bundle"
            )));
        }
        let keys = graph
            .one_hop_neighbors(drug_id, None)?
            .into_iter()
            .map(|n| n.triple.key())
            .collect();
        Ok(self
            .drug_extended
            .entry(drug_id.to_string())
            .or_insert(keys))
    }

    fn line(graph: &KnowledgeGraph, t: &Triple) -> String {
        let name = |id: &str| graph.entity(id).map_or(id.to_string(), |e| e.name.clone());
        format!("{}|{}|{}", name(&t.subject), t.relation, name(&t.object))
    }

    /// Lines offered to the ranking prompt, `"<id>: s|r|o"`.
    pub fn evidence_lines(&self, graph: &KnowledgeGraph) -> Vec<String> {
        self.symptom_edges
            .iter()
            .chain(&self.drug_edges)
            .map(|r| format!("{}: {}", r.evidence_id, Self::line(graph, &r.triple)))
            .collect()
    }

    /// Labelled text for the reasoning prompt.
    pub fn to_prompt_text(&self, graph: &KnowledgeGraph) -> String {
        let mut out = String::new();
        if let Some(d) = &self.definition {
            out.push_str(&format!("Definition: {d}\n"));
        }
        let label = |t: &Triple| {
            self.labels
                .get(&t.key().to_string())
                .map(|l| format!(" [{}]", serde_json::to_value(l).unwrap().as_str().unwrap()))
                .unwrap_or_default()
        };
        let mut sorted: Vec<&RankedTriple> =
            self.symptom_edges.iter().chain(&self.drug_edges).collect();
        sorted.sort_by_key(|r| (!r.evidence_id.starts_with('S'), r.rank));
        for r in sorted {
            out.push_str(&format!(
                "- {}{}\n",
                Self::line(graph, &r.triple),
                label(&r.triple)
            ));
        }
        for p in self.paths.values() {
            let names: Vec<String> = p
                .iter()
                .map(|id| graph.entity(id).map_or(id.clone(), |e| e.name.clone()))
                .collect();
            out.push_str(&format!("Path: {}\n", names.join(" -> ")));
        }
        out
    }
}

/// Applies a model ordering to one category. Items the model mutated,
/// invented or left out keep their original relative order after the
/// accepted ones.
fn reorder(
    items: &mut Vec<RankedTriple>,
    order: &[(String, Option<String>)],
    expected: &BTreeMap<String, String>,
) {
    let mut placed: Vec<RankedTriple> = Vec::with_capacity(items.len());
    let mut taken = BTreeSet::new();
    for (id, content) in order {
        let Some(pos) = items.iter().position(|r| r.evidence_id == *id) else {
            continue;
        };
        if let Some(c) = content {
            if !c.is_empty() && normalize_name(c) != normalize_name(&expected[id]) {
                log::warn!("ranked evidence {id} came back altered; keeping original position");
                continue;
            }
        }
        if taken.insert(id.clone()) {
            placed.push(items[pos].clone());
        }
    }
    let missing = items
        .iter()
        .filter(|r| !taken.contains(&r.evidence_id))
        .count();
    if missing > 0 {
        log::warn!("{missing} evidence item(s) missing from ranking; ranked last");
    }
    placed.extend(
        items
            .iter()
            .filter(|r| !taken.contains(&r.evidence_id))
            .cloned(),
    );
    for (i, r) in placed.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    *items = placed;
}

/// Orders both categories by model-judged importance without changing
/// their contents.
pub fn rank_evidence(
    bundle: &EvidenceBundle,
    graph: &KnowledgeGraph,
    history_text: &str,
    gateway: &Gateway,
) -> Result<EvidenceBundle> {
    let mut out = bundle.clone();
    if bundle.symptom_edges.is_empty() && bundle.drug_edges.is_empty() {
        return Ok(out);
    }
    let expected: BTreeMap<String, String> = bundle
        .symptom_edges
        .iter()
        .chain(&bundle.drug_edges)
        .map(|r| {
            (
                r.evidence_id.clone(),
                EvidenceBundle::line(graph, &r.triple),
            )
        })
        .collect();
    let order = gateway.rank_evidence(
        &bundle.disease_name,
        history_text,
        &bundle.evidence_lines(graph).join("\n"),
    )?;
    for (id, _) in &order {
        if !expected.contains_key(id) {
            log::warn!("rank_evidence returned unknown item {id}; ignored");
        }
    }
    reorder(&mut out.symptom_edges, &order, &expected);
    reorder(&mut out.drug_edges, &order, &expected);
    Ok(out)
}

/// Label of one triple: patient-reported symptom endpoint, then reviewed
/// provenance, else inferred.
pub fn label_for(triple: &Triple, patient_symptoms: &BTreeSet<String>) -> EvidenceLabel {
    if patient_symptoms.contains(&triple.subject) || patient_symptoms.contains(&triple.object) {
        EvidenceLabel::SubjectiveSymptom
    } else if triple.provenance.is_reviewed() {
        EvidenceLabel::ObjectiveGuideline
    } else {
        EvidenceLabel::InferredReasoning
    }
}

/// Labels every triple in the bundle. `patient_symptoms` are the linked
/// symptom ids from the history.
pub fn categorize_evidence(bundle: &EvidenceBundle, patient_symptoms: &[String]) -> EvidenceBundle {
    let reported: BTreeSet<String> = patient_symptoms.iter().cloned().collect();
    let mut out = bundle.clone();
    out.labels = bundle
        .all_triples()
        .map(|t| (t.key().to_string(), label_for(t, &reported)))
        .collect();
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ReportEdit {
    EditStep { index: usize, text: String },
    DeleteStep { index: usize },
    AddStep { text: String },
    EditTreatment { index: usize, text: String },
    DeleteTreatment { index: usize },
    AddTreatment { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEdit {
    pub edit: ReportEdit,
    pub actor: String,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalizeFields {
    pub conclusion: String,
    pub plan: String,
    pub follow_up: String,
    pub precautions: String,
}

impl FinalizeFields {
    pub fn missing(&self) -> Vec<String> {
        [
            ("conclusion", &self.conclusion),
            ("plan", &self.plan),
            ("follow_up", &self.follow_up),
            ("precautions", &self.precautions),
        ]
        .into_iter()
        .filter(|(_, v)| v.trim().is_empty())
        .map(|(k, _)| k.to_string())
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningReport {
    pub disease_id: String,
    pub steps: Vec<String>,
    pub treatment_items: Vec<String>,
    pub edit_log: Vec<LoggedEdit>,
    pub created_at: DateTime<Utc>,
    pub fields: Option<FinalizeFields>,
    pub patient_facing_text: Option<String>,
    pub finalized_by: Option<String>,
    pub finalized_at: Option<DateTime<Utc>>,
}

pub fn generate_report(
    history_text: &str,
    bundle: &EvidenceBundle,
    graph: &KnowledgeGraph,
    gateway: &Gateway,
    now: DateTime<Utc>,
) -> Result<ReasoningReport> {
    let r = gateway.reason(
        &bundle.disease_name,
        history_text,
        &bundle.to_prompt_text(graph),
    )?;
    Ok(ReasoningReport {
        disease_id: bundle.disease_id.clone(),
        steps: r.steps,
        treatment_items: r.treatments,
        edit_log: Vec::new(),
        created_at: now,
        fields: None,
        patient_facing_text: None,
        finalized_by: None,
        finalized_at: None,
    })
}

impl ReasoningReport {
    pub fn is_finalized(&self) -> bool {
        self.finalized_at.is_some()
    }

    pub fn apply_edit(&mut self, edit: ReportEdit, actor: &str, at: DateTime<Utc>) -> Result<()> {
        if self.is_finalized() {
            return Err(EvidenceError::Finalized);
        }
        fn at_index<'a>(
            list: &'a mut [String],
            name: &'static str,
            i: usize,
        ) -> Result<&'a mut String> {
            list.get_mut(i).ok_or(EvidenceError::BadIndex {
                list: name,
                index: i,
            })
        }
        fn check(list: &[String], name: &'static str, i: usize) -> Result<()> {
            if i < list.len() {
                Ok(())
            } else {
                Err(EvidenceError::BadIndex {
                    list: name,
                    index: i,
                })
            }
        }
        let nonempty = |t: &str| {
            if t.trim().is_empty() {
                Err(EvidenceError::InvalidEdit("empty text".into()))
            } else {
                Ok(())
            }
        };
        match &edit {
            ReportEdit::EditStep { index, text } => {
                nonempty(text)?;
                *at_index(&mut self.steps, "step", *index)? = text.clone();
            }
            ReportEdit::DeleteStep { index } => {
                check(&self.steps, "step", *index)?;
                self.steps.remove(*index);
            }
            ReportEdit::AddStep { text } => {
                nonempty(text)?;
                self.steps.push(text.clone());
            }
            ReportEdit::EditTreatment { index, text } => {
                nonempty(text)?;
                *at_index(&mut self.treatment_items, "treatment", *index)? = text.clone();
            }
            ReportEdit::DeleteTreatment { index } => {
                check(&self.treatment_items, "treatment", *index)?;
                self.treatment_items.remove(*index);
            }
            ReportEdit::AddTreatment { text } => {
                nonempty(text)?;
                self.treatment_items.push(text.clone());
            }
        }
        self.edit_log.push(LoggedEdit {
            edit,
            actor: actor.to_string(),
            at,
        });
        Ok(())
    }
}

/// Produces the patient-facing explanation and locks the report.
pub fn finalize_report(
    report: &mut ReasoningReport,
    fields: FinalizeFields,
    gateway: &Gateway,
    physician: &str,
    now: DateTime<Utc>,
) -> Result<String> {
    if report.is_finalized() {
        return Err(EvidenceError::Finalized);
    }
    let mut missing = fields.missing();
    if physician.trim().is_empty() {
        missing.push("physician".into());
    }
    if !missing.is_empty() {
        return Err(EvidenceError::MissingFields(missing));
    }
    let text = gateway.patient_rewrite(
        &fields.conclusion,
        &fields.plan,
        &fields.follow_up,
        &fields.precautions,
    )?;
    report.fields = Some(fields);
    report.patient_facing_text = Some(text.clone());
    report.finalized_by = Some(physician.to_string());
    report.finalized_at = Some(now);
    Ok(text)
}
