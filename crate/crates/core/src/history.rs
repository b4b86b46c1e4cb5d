//! Guided history taking.
//!
//! A session moves strictly through `Main → Other → Ddx → Done`. `Main`
//! fills the chief-complaint template, `Other` the past/personal/family
//! template; completing the latter produces a preliminary differential and
//! enters `Ddx`, where targeted questions refine the differential until its
//! top three stabilise across a turn or the question budget runs out.
//!
//! Model output is schema-checked on every turn: only slots that exist in the
//! fixed templates are accepted, values are never deleted, and anything else
//! in the update is dropped and reported.

use std::collections::BTreeSet;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::gateway::{self, parse, Gateway, GatewayError, TemplateId};
use crate::text::normalize_name;

#[derive(Debug, Error)]
pub enum HistoryError {
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid history config: {0}")]
    Config(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl HistoryError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, HistoryError::Gateway(e) if e.is_retryable())
    }
}

pub type Result<T, E = HistoryError> = std::result::Result<T, E>;

/// Shown to the patient once history taking is over.
pub const COMPLETION_NOTICE: &str = "Thank you, your history is complete. A physician will now review it and perform the diagnosis. You will be notified here once they have finished.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub value: Option<String>,
    pub required: bool,
}

impl Slot {
    pub fn is_filled(&self) -> bool {
        self.value.as_deref().is_some_and(|v| !v.trim().is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub title: String,
    pub slots: Vec<Slot>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Main,
    Other,
}

/// `(section, title, [(slot, required)])`
type SectionSpec = (&'static str, &'static str, &'static [(&'static str, bool)]);

const MAIN_SCHEMA: [SectionSpec; 3] = [
    (
        "patient_information",
        "Patient Information",
        &[("age", true), ("sex", true), ("occupation", false)],
    ),
    (
        "chief_complaint",
        "Chief Complaint",
        &[
            ("complaint", true),
            ("onset", true),
            ("duration", true),
            ("severity", true),
            ("course", false),
        ],
    ),
    (
        "clinical_findings",
        "Clinical Findings",
        &[
            ("associated_symptoms", true),
            ("aggravating_factors", false),
            ("relieving_factors", false),
        ],
    ),
];

const OTHER_SCHEMA: [SectionSpec; 3] = [
    (
        "past_history",
        "Past History",
        &[
            ("past_diseases", true),
            ("medications", true),
            ("allergies", true),
        ],
    ),
    (
        "personal_family_history",
        "Personal & Family History",
        &[("smoking_alcohol", true), ("family_history", true)],
    ),
    (
        "patient_perspective",
        "Patient Perspective",
        &[("concerns", false), ("expectations", false)],
    ),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryTemplate {
    pub kind: TemplateKind,
    pub sections: Vec<Section>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotDelta {
    pub template: TemplateKind,
    pub section: String,
    pub slot: String,
    pub value: String,
}

impl HistoryTemplate {
    fn from_schema(kind: TemplateKind, schema: &[SectionSpec]) -> Self {
        let sections = schema
            .iter()
            .map(|(name, title, slots)| Section {
                name: name.to_string(),
                title: title.to_string(),
                slots: slots
                    .iter()
                    .map(|(n, req)| Slot {
                        name: n.to_string(),
                        value: None,
                        required: *req,
                    })
                    .collect(),
            })
            .collect();
        Self { kind, sections }
    }

    pub fn main() -> Self {
        Self::from_schema(TemplateKind::Main, &MAIN_SCHEMA)
    }

    pub fn other() -> Self {
        Self::from_schema(TemplateKind::Other, &OTHER_SCHEMA)
    }

    /// Every `(section, slot)` pair the schema allows, across both templates.
    pub fn schema_slots() -> BTreeSet<(String, String)> {
        MAIN_SCHEMA
            .iter()
            .chain(OTHER_SCHEMA.iter())
            .flat_map(|(s, _, slots)| {
                slots
                    .iter()
                    .map(move |(n, _)| (s.to_string(), n.to_string()))
            })
            .collect()
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name)
    }

    pub fn get(&self, section: &str, slot: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|s| s.name == section)?
            .slots
            .iter()
            .find(|s| s.name == slot)?
            .value
            .as_deref()
    }

    pub fn is_complete(&self) -> bool {
        self.sections
            .iter()
            .flat_map(|s| &s.slots)
            .all(|s| !s.required || s.is_filled())
    }

    pub fn required_count(&self) -> usize {
        self.sections
            .iter()
            .flat_map(|s| &s.slots)
            .filter(|s| s.required)
            .count()
    }

    pub fn filled_required(&self) -> usize {
        self.sections
            .iter()
            .flat_map(|s| &s.slots)
            .filter(|s| s.required && s.is_filled())
            .count()
    }

    pub fn missing_required(&self) -> Vec<String> {
        self.sections
            .iter()
            .flat_map(|sec| {
                sec.slots
                    .iter()
                    .filter(|s| s.required && !s.is_filled())
                    .map(move |s| format!("{}.{}", sec.name, s.name))
            })
            .collect()
    }

    /// Applies a `section → slot → value` object. Unknown sections or slots
    /// and non-scalar values are rejected; null or empty values never clear a
    /// slot. Returns the accepted changes and the rejected field paths.
    pub fn apply_update(&mut self, update: &Map<String, Value>) -> (Vec<SlotDelta>, Vec<String>) {
        let mut deltas = Vec::new();
        let mut rejected = Vec::new();
        for (sec_name, slots) in update {
            let Some(section) = self.sections.iter_mut().find(|s| &s.name == sec_name) else {
                rejected.push(sec_name.clone());
                continue;
            };
            let Value::Object(slots) = slots else {
                rejected.push(sec_name.clone());
                continue;
            };
            for (slot_name, value) in slots {
                let path = format!("{sec_name}.{slot_name}");
                let Some(slot) = section.slots.iter_mut().find(|s| &s.name == slot_name) else {
                    rejected.push(path);
                    continue;
                };
                let text = match value {
                    Value::Null => continue,
                    Value::String(s) => s.trim().to_string(),
                    Value::Number(n) => n.to_string(),
                    Value::Bool(b) => b.to_string(),
                    Value::Array(items) if items.iter().all(Value::is_string) => items
                        .iter()
                        .filter_map(Value::as_str)
                        .collect::<Vec<_>>()
                        .join(", "),
                    _ => {
                        rejected.push(path);
                        continue;
                    }
                };
                if text.is_empty() || slot.value.as_deref() == Some(text.as_str()) {
                    continue;
                }
                slot.value = Some(text.clone());
                deltas.push(SlotDelta {
                    template: self.kind,
                    section: sec_name.clone(),
                    slot: slot_name.clone(),
                    value: text,
                });
            }
        }
        (deltas, rejected)
    }

    /// `section → slot → value-or-null`.
    pub fn to_json(&self) -> Value {
        let mut out = Map::new();
        for sec in &self.sections {
            let slots: Map<String, Value> = sec
                .slots
                .iter()
                .map(|s| {
                    (
                        s.name.clone(),
                        s.value.clone().map(Value::String).unwrap_or(Value::Null),
                    )
                })
                .collect();
            out.insert(sec.name.clone(), Value::Object(slots));
        }
        Value::Object(out)
    }

    fn as_text(&self, out: &mut String) {
        for sec in &self.sections {
            for s in sec.slots.iter().filter(|s| s.is_filled()) {
                out.push_str(&format!(
                    "{} / {}: {}\n",
                    sec.title,
                    s.name.replace('_', " "),
                    s.value.as_deref().unwrap_or_default()
                ));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdxEntry {
    pub disease_name: String,
    pub likelihood: f64,
    #[serde(default)]
    pub rationale: String,
}

/// Sorts by likelihood descending then name ascending, clamps likelihoods to
/// `[0, 10]` and drops later duplicates by normalized name.
pub fn normalize_ddx(mut ddx: Vec<DdxEntry>) -> Vec<DdxEntry> {
    for d in &mut ddx {
        d.likelihood = if d.likelihood.is_finite() {
            d.likelihood.clamp(0.0, 10.0)
        } else {
            0.0
        };
    }
    ddx.sort_by(|a, b| {
        b.likelihood
            .total_cmp(&a.likelihood)
            .then_with(|| a.disease_name.cmp(&b.disease_name))
    });
    let mut seen = BTreeSet::new();
    ddx.retain(|d| seen.insert(normalize_name(&d.disease_name)));
    ddx
}

pub fn top_k(ddx: &[DdxEntry], k: usize) -> Vec<DdxEntry> {
    normalize_ddx(ddx.to_vec()).into_iter().take(k).collect()
}

fn top3_set(ddx: &[DdxEntry]) -> BTreeSet<String> {
    top_k(ddx, 3)
        .iter()
        .map(|d| normalize_name(&d.disease_name))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Main,
    Other,
    Ddx,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    Patient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistoryConfig {
    pub max_ddx_questions: usize,
    /// 1 or 2.
    pub max_questions_per_turn: usize,
    /// Pass every outgoing question through the `refine_question` prompt.
    pub refine_questions: bool,
}

impl Default for HistoryConfig {
    fn default() -> Self {
        Self {
            max_ddx_questions: 6,
            max_questions_per_turn: 2,
            refine_questions: false,
        }
    }
}

impl HistoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_ddx_questions == 0 {
            return Err(HistoryError::Config(
                "max_ddx_questions must be positive".into(),
            ));
        }
        if !(1..=2).contains(&self.max_questions_per_turn) {
            return Err(HistoryError::Config(
                "max_questions_per_turn must be 1 or 2".into(),
            ));
        }
        Ok(())
    }
}

/// Keeps text up to and including the `max`-th question mark.
pub fn limit_questions(text: &str, max: usize) -> String {
    let mut seen = 0;
    for (i, c) in text.char_indices() {
        if c == '?' {
            seen += 1;
            if seen == max {
                return text[..=i].trim().to_string();
            }
        }
    }
    text.trim().to_string()
}

pub fn count_questions(text: &str) -> usize {
    text.matches('?').count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueState {
    pub state: Stage,
    pub messages: Vec<Message>,
    pub main_template: HistoryTemplate,
    pub other_template: HistoryTemplate,
    pub ddx: Vec<DdxEntry>,
    pub ddx_questions_asked: usize,
    /// Top-3 set before the most recent targeted update; `None` until the
    /// first one.
    pub previous_top3: Option<BTreeSet<String>>,
    pub config: HistoryConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub prompt: String,
    pub deltas: Vec<SlotDelta>,
    pub rejected_fields: Vec<String>,
    pub from: Stage,
    pub to: Stage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub main_template: HistoryTemplate,
    pub other_template: HistoryTemplate,
}

/// Export document: templates as `section → slot → value` plus the top-3
/// preliminary differential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryExport {
    pub main_template: Value,
    pub other_template: Value,
    pub preliminary_ddx: Vec<DdxEntry>,
}

impl History {
    pub fn as_text(&self) -> String {
        let mut out = String::new();
        self.main_template.as_text(&mut out);
        self.other_template.as_text(&mut out);
        out
    }

    pub fn to_json(&self) -> Value {
        serde_json::json!({
            "main_template": self.main_template.to_json(),
            "other_template": self.other_template.to_json(),
        })
    }

    pub fn export(&self, preliminary_ddx: &[DdxEntry]) -> HistoryExport {
        HistoryExport {
            main_template: self.main_template.to_json(),
            other_template: self.other_template.to_json(),
            preliminary_ddx: preliminary_ddx.to_vec(),
        }
    }
}

struct TurnReply {
    question: String,
    template: Map<String, Value>,
    ddx: Option<Vec<DdxEntry>>,
}

fn parse_ddx(v: &Value) -> std::result::Result<Vec<DdxEntry>, String> {
    serde_json::from_value::<Vec<DdxEntry>>(v.clone()).map_err(|e| format!("bad ddx list: {e}"))
}

fn parse_turn(raw: &str, want_ddx: bool) -> parse::ParseResult<TurnReply> {
    let obj = parse::json_object(raw)?;
    let question = obj
        .get("question")
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|q| !q.is_empty())
        .ok_or("missing \"question\" string")?
        .to_string();
    let template = match obj.get("template") {
        None | Some(Value::Null) => Map::new(),
        Some(Value::Object(m)) => m.clone(),
        Some(_) => return Err("\"template\" must be an object".into()),
    };
    let ddx = if want_ddx {
        Some(parse_ddx(obj.get("ddx").ok_or("missing \"ddx\" list")?)?)
    } else {
        None
    };
    Ok(TurnReply {
        question,
        template,
        ddx,
    })
}

fn parse_preliminary(raw: &str) -> parse::ParseResult<Vec<DdxEntry>> {
    let obj = parse::json_object(raw)?;
    let ddx = parse_ddx(obj.get("ddx").ok_or("missing \"ddx\" list")?)?;
    if ddx.is_empty() {
        return Err("empty differential".into());
    }
    Ok(ddx)
}

impl DialogueState {
    /// Opens a session with the model-written greeting.
    pub fn start(config: HistoryConfig, gateway: &Gateway, now: DateTime<Utc>) -> Result<Self> {
        config.validate()?;
        let greeting = limit_questions(&gateway.greeting()?, config.max_questions_per_turn);
        Ok(Self {
            state: Stage::Main,
            messages: vec![Message {
                role: Role::System,
                text: greeting,
                timestamp: now,
            }],
            main_template: HistoryTemplate::main(),
            other_template: HistoryTemplate::other(),
            ddx: Vec::new(),
            ddx_questions_asked: 0,
            previous_top3: None,
            config,
        })
    }

    pub fn history(&self) -> History {
        History {
            main_template: self.main_template.clone(),
            other_template: self.other_template.clone(),
        }
    }

    pub fn filled_required(&self) -> usize {
        self.main_template.filled_required() + self.other_template.filled_required()
    }

    pub fn patient_turns(&self) -> usize {
        self.messages
            .iter()
            .filter(|m| m.role == Role::Patient)
            .count()
    }

    pub fn last_system_message(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::System)
            .map(|m| m.text.as_str())
    }

    /// Converged (top-3 unchanged across the last targeted update) or out of
    /// question budget.
    pub fn stopping_criteria(&self) -> bool {
        if self.ddx_questions_asked >= self.config.max_ddx_questions {
            return true;
        }
        self.ddx.len() >= 3 && self.previous_top3.as_ref() == Some(&top3_set(&self.ddx))
    }

    fn transcript_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| {
                let who = match m.role {
                    Role::System => "Assistant",
                    Role::Patient => "Patient",
                };
                format!("{who}: {}", m.text)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn history_json(&self) -> String {
        self.history().to_json().to_string()
    }

    fn apply_both(&mut self, update: &Map<String, Value>) -> (Vec<SlotDelta>, Vec<String>) {
        let mut main_part = Map::new();
        let mut other_part = Map::new();
        let mut rejected = Vec::new();
        for (k, v) in update {
            if self.main_template.has_section(k) {
                main_part.insert(k.clone(), v.clone());
            } else if self.other_template.has_section(k) {
                other_part.insert(k.clone(), v.clone());
            } else {
                rejected.push(k.clone());
            }
        }
        let (mut deltas, r1) = self.main_template.apply_update(&main_part);
        let (d2, r2) = self.other_template.apply_update(&other_part);
        deltas.extend(d2);
        rejected.extend(r1);
        rejected.extend(r2);
        (deltas, rejected)
    }

    fn dialogue_turn(&self, gateway: &Gateway, kind: TemplateKind) -> Result<TurnReply> {
        let (template, stage, next) = match kind {
            TemplateKind::Main => (
                &self.main_template,
                "chief complaint and present illness",
                self.other_template.missing_required().join(", "),
            ),
            TemplateKind::Other => (
                &self.other_template,
                "past, personal and family history",
                "none; the interview moves on to clarifying questions".to_string(),
            ),
        };
        let vars = gateway::vars([
            ("stage", stage.to_string()),
            ("transcript", self.transcript_text()),
            ("template_json", template.to_json().to_string()),
            ("missing_slots", template.missing_required().join(", ")),
            ("next_stage_slots", next),
            (
                "max_questions",
                self.config.max_questions_per_turn.to_string(),
            ),
        ]);
        Ok(gateway.call_with(TemplateId::UpdateByDialogue, &vars, |r| {
            parse_turn(r, false)
        })?)
    }

    /// Processes one patient utterance. On error the receiver is untouched and
    /// the turn can be retried.
    pub fn step(
        &self,
        utterance: &str,
        gateway: &Gateway,
        now: DateTime<Utc>,
    ) -> Result<(DialogueState, StepOutput)> {
        if self.state == Stage::Done {
            return Err(HistoryError::InvalidState(
                "history taking is already complete".into(),
            ));
        }
        let from = self.state;
        let mut s = self.clone();
        s.messages.push(Message {
            role: Role::Patient,
            text: utterance.to_string(),
            timestamp: now,
        });
        let (prompt, deltas, rejected) = match s.state {
            Stage::Main => {
                let reply = s.dialogue_turn(gateway, TemplateKind::Main)?;
                let (d, r) = s.main_template.apply_update(&reply.template);
                if s.main_template.is_complete() {
                    s.state = Stage::Other;
                }
                (reply.question, d, r)
            }
            Stage::Other => {
                let reply = s.dialogue_turn(gateway, TemplateKind::Other)?;
                let (d, r) = s.other_template.apply_update(&reply.template);
                if s.other_template.is_complete() {
                    let vars = gateway::vars([("history_json", s.history_json())]);
                    let ddx = gateway.call_with(
                        TemplateId::GeneratePreliminaryDdx,
                        &vars,
                        parse_preliminary,
                    )?;
                    s.ddx = normalize_ddx(ddx);
                    s.previous_top3 = None;
                    s.state = Stage::Ddx;
                }
                (reply.question, d, r)
            }
            Stage::Ddx => {
                if s.stopping_criteria() {
                    s.state = Stage::Done;
                    (COMPLETION_NOTICE.to_string(), Vec::new(), Vec::new())
                } else {
                    let ddx_json = serde_json::to_string(&s.ddx).expect("ddx serializes");
                    let vars = gateway::vars([
                        ("transcript", s.transcript_text()),
                        ("history_json", s.history_json()),
                        ("ddx_json", ddx_json),
                        ("max_questions", s.config.max_questions_per_turn.to_string()),
                    ]);
                    let reply = gateway
                        .call_with(TemplateId::TargetedUpdate, &vars, |r| parse_turn(r, true))?;
                    let (d, r) = s.apply_both(&reply.template);
                    s.previous_top3 = Some(top3_set(&s.ddx));
                    s.ddx = normalize_ddx(reply.ddx.unwrap_or_default());
                    s.ddx_questions_asked += 1;
                    (reply.question, d, r)
                }
            }
            Stage::Done => unreachable!(),
        };
        let max_q = s.config.max_questions_per_turn;
        let mut prompt = limit_questions(&prompt, max_q);
        if s.config.refine_questions && s.state != Stage::Done {
            prompt = limit_questions(&gateway.refine_question(&prompt, max_q)?, max_q);
        }
        if !rejected.is_empty() {
            log::warn!("dropped non-template fields from model update: {rejected:?}");
        }
        s.messages.push(Message {
            role: Role::System,
            text: prompt.clone(),
            timestamp: now,
        });
        let to = s.state;
        Ok((
            s,
            StepOutput {
                prompt,
                deltas,
                rejected_fields: rejected,
                from,
                to,
            },
        ))
    }

    /// Both templates plus the top three of the differential.
    pub fn finish(&self) -> Result<(History, Vec<DdxEntry>)> {
        if self.state != Stage::Done {
            return Err(HistoryError::InvalidState(format!(
                "finish requires Done, session is in {:?}",
                self.state
            )));
        }
        Ok((self.history(), top_k(&self.ddx, 3)))
    }
}
