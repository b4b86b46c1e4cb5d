use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use casegraph_core::evidence::{EvidenceBundle, ReasoningReport};
use casegraph_core::gateway::{ScriptEntry, TemplateId};
use casegraph_core::history::{DdxEntry, DialogueState, History, Message};
use casegraph_core::{Bar, Layout, Record};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auth::Role;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Collecting,
    AwaitingPhysician,
    InReview,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub at: DateTime<Utc>,
    pub actor: String,
    pub role: Role,
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FollowUp {
    pub question: String,
    pub asked_by: String,
    pub asked_at: DateTime<Utc>,
    pub answer: Option<String>,
    pub answered_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finalized {
    pub disease_id: String,
    pub by: String,
    pub at: DateTime<Utc>,
    pub patient_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub patient_id: String,
    pub status: SessionStatus,
    pub created_at: DateTime<Utc>,
    pub dialogue: DialogueState,
    pub history: Option<History>,
    pub preliminary_ddx: Vec<DdxEntry>,
    pub diagnosis: Option<Record>,
    pub bars: Vec<Bar>,
    /// Categorized evidence per candidate, ranked once selected.
    pub bundles: BTreeMap<String, EvidenceBundle>,
    #[serde(default)]
    pub ranked: Vec<String>,
    pub global_layout: Option<Layout>,
    /// The layout the physician currently sees, expansions included.
    pub layout: Option<Layout>,
    pub active_diagnosis: Option<String>,
    pub reports: BTreeMap<String, ReasoningReport>,
    pub assigned_physician: Option<String>,
    pub handover_at: Option<DateTime<Utc>>,
    pub followups: Vec<FollowUp>,
    pub finalized: Option<Finalized>,
    pub evolution_events: Vec<u64>,
    pub pipeline_error: Option<String>,
    /// Per-session mock script and how much of it has been used.
    pub script: Option<Vec<ScriptEntry>>,
    pub llm_consumed: BTreeMap<TemplateId, usize>,
    pub audit: Vec<AuditEntry>,
}

impl Session {
    pub fn new(
        id: String,
        patient_id: String,
        dialogue: DialogueState,
        script: Option<Vec<ScriptEntry>>,
        now: DateTime<Utc>,
    ) -> Self {
        Self {
            id,
            patient_id,
            status: SessionStatus::Collecting,
            created_at: now,
            dialogue,
            history: None,
            preliminary_ddx: Vec::new(),
            diagnosis: None,
            bars: Vec::new(),
            bundles: BTreeMap::new(),
            ranked: Vec::new(),
            global_layout: None,
            layout: None,
            active_diagnosis: None,
            reports: BTreeMap::new(),
            assigned_physician: None,
            handover_at: None,
            followups: Vec::new(),
            finalized: None,
            evolution_events: Vec::new(),
            pipeline_error: None,
            script,
            llm_consumed: BTreeMap::new(),
            audit: Vec::new(),
        }
    }

    pub fn messages(&self) -> &[Message] {
        &self.dialogue.messages
    }

    pub fn audit(&mut self, at: DateTime<Utc>, actor: &str, role: Role, action: impl Into<String>) {
        self.audit.push(AuditEntry {
            at,
            actor: actor.to_string(),
            role,
            action: action.into(),
        });
    }

    /// Script entries not used yet, in their original order.
    pub fn remaining_script(&self) -> Vec<ScriptEntry> {
        let mut seen: BTreeMap<TemplateId, usize> = BTreeMap::new();
        self.script
            .iter()
            .flatten()
            .filter(|e| {
                let n = seen.entry(e.template_id).or_insert(0);
                *n += 1;
                *n > self.llm_consumed.get(&e.template_id).copied().unwrap_or(0)
            })
            .cloned()
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum SessionLogError {
    #[error("{file}:{line}: {message}")]
    Corrupt {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{file}: {source}")]
    Io {
        file: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct LogLine {
    at: DateTime<Utc>,
    action: String,
    session: Session,
}

/// One append-only JSON-lines file per session; the last line is current.
#[derive(Debug, Clone)]
pub struct SessionLog {
    dir: PathBuf,
}

impl SessionLog {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, SessionLogError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|source| SessionLogError::Io {
            file: dir.clone(),
            source,
        })?;
        Ok(Self { dir })
    }

    pub fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    pub fn append(
        &self,
        session: &Session,
        action: &str,
        at: DateTime<Utc>,
    ) -> Result<(), SessionLogError> {
        let file = self.path(&session.id);
        let io = |source| SessionLogError::Io {
            file: file.clone(),
            source,
        };
        let line = serde_json::to_string(&LogLine {
            at,
            action: action.to_string(),
            session: session.clone(),
        })
        .expect("session serializes");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&file)
            .map_err(io)?;
        writeln!(f, "{line}").map_err(io)?;
        f.sync_data().map_err(io)
    }

    /// Every session in the directory. Any unreadable line is an error.
    pub fn load_all(&self) -> Result<Vec<Session>, SessionLogError> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&self.dir)
            .map_err(|source| SessionLogError::Io {
                file: self.dir.clone(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        files.sort();
        let mut out = Vec::new();
        for f in files {
            if let Some(s) = Self::load_file(&f)? {
                out.push(s);
            }
        }
        Ok(out)
    }

    fn load_file(path: &Path) -> Result<Option<Session>, SessionLogError> {
        let io = |source| SessionLogError::Io {
            file: path.to_path_buf(),
            source,
        };
        let reader = BufReader::new(File::open(path).map_err(io)?);
        let mut last = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine =
                serde_json::from_str(&line).map_err(|e| SessionLogError::Corrupt {
                    file: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            last = Some(parsed.session);
        }
        Ok(last)
    }
}
