//! Language-model boundary.
//!
//! All model traffic goes through [`Gateway`]: it renders a named
//! [`PromptTemplate`], dispatches to an [`LlmProvider`], retries transient
//! transport failures with exponential backoff, re-asks once with a format
//! reminder when a response violates its parsing contract, and records every
//! exchange in a transcript.

pub mod parse;
mod provider;
mod template;

pub use parse::{NameScore, Reasoning};
pub use provider::{HttpChat, LlmProvider, ScriptEntry, ScriptedMock};
pub use template::{PromptTemplate, ResponseSchema, TemplateId, TemplateSet};

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("unknown template id {0:?}")]
    UnknownTemplate(String),
    #[error("template {template} has no placeholder {name:?}")]
    UnknownPlaceholder { template: TemplateId, name: String },
    #[error("template {template} needs variable {name:?}")]
    MissingVariable { template: TemplateId, name: String },
    #[error("mock script exhausted for template {template} at call #{index}")]
    ScriptExhausted { template: TemplateId, index: usize },
    #[error("invalid mock script: {0}")]
    Script(String),
    #[error("transport error: {message}")]
    Transport { message: String, transient: bool },
    #[error("response to {template} violates its schema: {message}")]
    Schema {
        template: TemplateId,
        message: String,
        raw: String,
    },
    #[error("provider misconfigured: {0}")]
    Config(String),
}

impl GatewayError {
    /// True for failures a caller may retry without changing its inputs.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            GatewayError::Transport { .. } | GatewayError::Schema { .. }
        )
    }

    pub fn raw_payload(&self) -> Option<&str> {
        match self {
            GatewayError::Schema { raw, .. } => Some(raw),
            _ => None,
        }
    }
}

pub type Result<T, E = GatewayError> = std::result::Result<T, E>;

/// Headings a disease draft must contain, in order.
pub const DRAFT_HEADINGS: [&str; 6] = [
    "Definition",
    "Core symptoms",
    "Red-flag symptoms",
    "Typical course",
    "First-line treatments",
    "Second-line treatments",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    ScriptedMock,
    HttpChat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    #[serde(skip_serializing)]
    pub credential: Option<String>,
    pub script_path: Option<PathBuf>,
    pub max_retries: u32,
    pub timeout_secs: u64,
    pub backoff_ms: u64,
    /// Directory of `<template_id>.txt` overrides for the shipped prompts.
    pub prompts_dir: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::ScriptedMock,
            endpoint: None,
            credential: None,
            script_path: None,
            max_retries: 2,
            timeout_secs: 60,
            backoff_ms: 250,
            prompts_dir: None,
        }
    }
}

impl ProviderConfig {
    /// Applies `CASEGRAPH_LLM_PROVIDER`, `CASEGRAPH_LLM_ENDPOINT` and
    /// `CASEGRAPH_LLM_API_KEY` when set.
    pub fn with_env_overrides(mut self) -> Result<Self> {
        if let Ok(kind) = std::env::var("CASEGRAPH_LLM_PROVIDER") {
            self.kind = match kind.as_str() {
                "scripted_mock" | "mock" => ProviderKind::ScriptedMock,
                "http_chat" | "http" => ProviderKind::HttpChat,
                other => {
                    return Err(GatewayError::Config(format!(
                        "unknown provider kind {other}"
                    )))
                }
            };
        }
        if let Ok(ep) = std::env::var("CASEGRAPH_LLM_ENDPOINT") {
            self.endpoint = Some(ep);
        }
        if let Ok(key) = std::env::var("CASEGRAPH_LLM_API_KEY") {
            self.credential = Some(key);
        }
        Ok(self)
    }

    /// Builds a fresh provider. A scripted mock gets its own counters, so
    /// each call yields an independent replay of the script.
    pub fn build(&self) -> Result<Arc<dyn LlmProvider>> {
        match self.kind {
            ProviderKind::ScriptedMock => {
                let path = self.script_path.as_ref().ok_or_else(|| {
                    GatewayError::Config("scripted_mock needs script_path".into())
                })?;
                Ok(Arc::new(ScriptedMock::from_file(path)?))
            }
            ProviderKind::HttpChat => {
                let ep = self
                    .endpoint
                    .clone()
                    .ok_or_else(|| GatewayError::Config("http_chat needs endpoint".into()))?;
                Ok(Arc::new(HttpChat::new(
                    ep,
                    self.credential.clone(),
                    Duration::from_secs(self.timeout_secs),
                )?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: usize,
    pub template: TemplateId,
    pub attempt: u32,
    pub prompt: String,
    pub response: Option<String>,
    pub error: Option<String>,
    pub at: DateTime<Utc>,
}

/// Result of a generic [`Gateway::call`], one variant per response schema.
#[derive(Debug, Clone, PartialEq)]
pub enum Parsed {
    Text(String),
    Json(serde_json::Map<String, serde_json::Value>),
    Lines(Vec<String>),
    Scores(Vec<NameScore>),
    Sections(Vec<(String, String)>),
    Triples(Vec<(String, String, String)>),
    Ranked(Vec<(String, Option<String>)>),
    Reasoning(Reasoning),
}

const FORMAT_REMINDER: &str =
    "\n\nFORMAT REMINDER: your previous answer could not be parsed. Reply using exactly the output format specified above and nothing else.";

pub struct Gateway {
    provider: Arc<dyn LlmProvider>,
    templates: Arc<TemplateSet>,
    max_retries: u32,
    backoff: Duration,
    transcript: Mutex<Vec<TranscriptEntry>>,
    transcript_file: Option<Mutex<File>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("provider", &self.provider.name())
            .field("max_retries", &self.max_retries)
            .finish()
    }
}

type Vars = BTreeMap<String, String>;

pub fn vars<const N: usize>(pairs: [(&str, String); N]) -> Vars {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

impl Gateway {
    pub fn new(provider: Arc<dyn LlmProvider>) -> Self {
        Self {
            provider,
            templates: Arc::new(TemplateSet::builtin()),
            max_retries: 2,
            backoff: Duration::from_millis(250),
            transcript: Mutex::new(Vec::new()),
            transcript_file: None,
        }
    }

    pub fn scripted(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        Self::new(Arc::new(ScriptedMock::new(entries)))
    }

    pub fn from_config(config: &ProviderConfig) -> Result<Self> {
        let mut g = Self::new(config.build()?);
        g.max_retries = config.max_retries;
        g.backoff = Duration::from_millis(config.backoff_ms);
        if let Some(dir) = &config.prompts_dir {
            g.templates = Arc::new(TemplateSet::with_overrides(dir)?);
        }
        Ok(g)
    }

    pub fn with_templates(mut self, templates: Arc<TemplateSet>) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_retry(mut self, max_retries: u32, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.backoff = backoff;
        self
    }

    /// Appends every exchange as a JSON line to `path`.
    pub fn with_transcript_file(mut self, path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        self.transcript_file = Some(Mutex::new(f));
        Ok(self)
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.transcript.lock().clone()
    }

    fn log(&self, template: TemplateId, attempt: u32, prompt: &str, outcome: &Result<String>) {
        let mut t = self.transcript.lock();
        let entry = TranscriptEntry {
            seq: t.len(),
            template,
            attempt,
            prompt: prompt.to_string(),
            response: outcome.as_ref().ok().cloned(),
            error: outcome.as_ref().err().map(|e| e.to_string()),
            at: Utc::now(),
        };
        if let Some(f) = &self.transcript_file {
            if let Ok(mut line) = serde_json::to_vec(&entry) {
                line.push(b'\n');
                if let Err(e) = f.lock().write_all(&line) {
                    log::warn!("transcript write failed: {e}");
                }
            }
        }
        t.push(entry);
    }

    fn dispatch(&self, template: TemplateId, prompt: &str) -> Result<String> {
        let mut attempt = 0;
        loop {
            let outcome = self.provider.complete(template, prompt);
            self.log(template, attempt, prompt, &outcome);
            match outcome {
                Err(GatewayError::Transport {
                    transient: true, ..
                }) if attempt < self.max_retries => {
                    std::thread::sleep(self.backoff * 2u32.pow(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    pub fn render(&self, template: TemplateId, vars: &Vars) -> Result<String> {
        self.templates.get(template).render(vars)
    }

    /// Render, dispatch and parse under `parser`, re-asking once with a
    /// format reminder on a schema violation.
    pub fn call_with<T>(
        &self,
        template: TemplateId,
        vars: &Vars,
        parser: impl Fn(&str) -> parse::ParseResult<T>,
    ) -> Result<T> {
        let prompt = self.render(template, vars)?;
        let raw = self.dispatch(template, &prompt)?;
        match parser(&raw) {
            Ok(v) => Ok(v),
            Err(first) => {
                log::warn!("{template}: unparseable response ({first}); retrying with reminder");
                let raw2 = self.dispatch(template, &format!("{prompt}{FORMAT_REMINDER}"))?;
                parser(&raw2).map_err(|message| GatewayError::Schema {
                    template,
                    message,
                    raw: raw2,
                })
            }
        }
    }

    /// Generic entry point: parses under the template's own schema.
    pub fn call(&self, template: TemplateId, vars: &Vars) -> Result<Parsed> {
        match template.schema() {
            ResponseSchema::Text => self
                .call_with(template, vars, parse::text)
                .map(Parsed::Text),
            ResponseSchema::JsonObject => self
                .call_with(template, vars, parse::json_object)
                .map(Parsed::Json),
            ResponseSchema::LineList => self
                .call_with(template, vars, parse::line_list)
                .map(Parsed::Lines),
            ResponseSchema::NameScorePairs => self
                .call_with(template, vars, parse::name_score_pairs)
                .map(Parsed::Scores),
            ResponseSchema::HeadingSections => self
                .call_with(template, vars, |r| {
                    parse::heading_sections(r, &DRAFT_HEADINGS)
                })
                .map(Parsed::Sections),
            ResponseSchema::PipeTriples => self
                .call_with(template, vars, parse::pipe_triples)
                .map(Parsed::Triples),
            ResponseSchema::IdLines => self
                .call_with(template, vars, parse::id_lines)
                .map(Parsed::Ranked),
            ResponseSchema::NumberedSections => self
                .call_with(template, vars, parse::numbered_sections)
                .map(Parsed::Reasoning),
        }
    }

    pub fn greeting(&self) -> Result<String> {
        self.call_with(TemplateId::Greeting, &Vars::new(), parse::text)
    }

    pub fn json(
        &self,
        template: TemplateId,
        vars: &Vars,
    ) -> Result<serde_json::Map<String, serde_json::Value>> {
        self.call_with(template, vars, parse::json_object)
    }

    pub fn refine_question(&self, question: &str, max_questions: usize) -> Result<String> {
        self.call_with(
            TemplateId::RefineQuestion,
            &vars([
                ("question", question.to_string()),
                ("max_questions", max_questions.to_string()),
            ]),
            parse::text,
        )
    }

    pub fn recognize(&self, history_text: &str) -> Result<Vec<String>> {
        self.call_with(
            TemplateId::Recognize,
            &vars([("history_text", history_text.to_string())]),
            parse::line_list,
        )
    }

    pub fn rank(
        &self,
        history_text: &str,
        candidates: &str,
        knowledge: &str,
    ) -> Result<Vec<NameScore>> {
        self.call_with(
            TemplateId::Rank,
            &vars([
                ("history_text", history_text.to_string()),
                ("candidates", candidates.to_string()),
                ("knowledge", knowledge.to_string()),
            ]),
            parse::name_score_pairs,
        )
    }

    /// Returns the raw draft text and its heading sections.
    pub fn draft_disease(
        &self,
        disease_name: &str,
        neighbors: &str,
    ) -> Result<(String, Vec<(String, String)>)> {
        self.call_with(
            TemplateId::DraftDisease,
            &vars([
                ("disease_name", disease_name.to_string()),
                ("neighbors", neighbors.to_string()),
            ]),
            |raw| {
                parse::heading_sections(raw, &DRAFT_HEADINGS).map(|s| (raw.trim().to_string(), s))
            },
        )
    }

    pub fn extract_triples(
        &self,
        disease_name: &str,
        draft_text: &str,
        relations: &str,
    ) -> Result<Vec<(String, String, String)>> {
        self.call_with(
            TemplateId::ExtractTriples,
            &vars([
                ("disease_name", disease_name.to_string()),
                ("draft_text", draft_text.to_string()),
                ("relations", relations.to_string()),
            ]),
            parse::pipe_triples,
        )
    }

    pub fn rank_evidence(
        &self,
        disease_name: &str,
        history_text: &str,
        evidence: &str,
    ) -> Result<Vec<(String, Option<String>)>> {
        self.call_with(
            TemplateId::RankEvidence,
            &vars([
                ("disease_name", disease_name.to_string()),
                ("history_text", history_text.to_string()),
                ("evidence", evidence.to_string()),
            ]),
            parse::id_lines,
        )
    }

    pub fn reason(
        &self,
        disease_name: &str,
        history_text: &str,
        evidence: &str,
    ) -> Result<Reasoning> {
        self.call_with(
            TemplateId::Reason,
            &vars([
                ("disease_name", disease_name.to_string()),
                ("history_text", history_text.to_string()),
                ("evidence", evidence.to_string()),
            ]),
            parse::numbered_sections,
        )
    }

    pub fn patient_rewrite(
        &self,
        conclusion: &str,
        plan: &str,
        follow_up: &str,
        precautions: &str,
    ) -> Result<String> {
        self.call_with(
            TemplateId::PatientRewrite,
            &vars([
                ("conclusion", conclusion.to_string()),
                ("plan", plan.to_string()),
                ("follow_up", follow_up.to_string()),
                ("precautions", precautions.to_string()),
            ]),
            parse::text,
        )
    }
}
