use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Greeting,
    UpdateByDialogue,
    GeneratePreliminaryDdx,
    TargetedUpdate,
    Recognize,
    Rank,
    DraftDisease,
    ExtractTriples,
    RankEvidence,
    Reason,
    PatientRewrite,
    RefineQuestion,
}

impl TemplateId {
    pub const ALL: [TemplateId; 12] = [
        TemplateId::Greeting,
        TemplateId::UpdateByDialogue,
        TemplateId::GeneratePreliminaryDdx,
        TemplateId::TargetedUpdate,
        TemplateId::Recognize,
        TemplateId::Rank,
        TemplateId::DraftDisease,
        TemplateId::ExtractTriples,
        TemplateId::RankEvidence,
        TemplateId::Reason,
        TemplateId::PatientRewrite,
        TemplateId::RefineQuestion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Greeting => "greeting",
            TemplateId::UpdateByDialogue => "update_by_dialogue",
            TemplateId::GeneratePreliminaryDdx => "generate_preliminary_ddx",
            TemplateId::TargetedUpdate => "targeted_update",
            TemplateId::Recognize => "recognize",
            TemplateId::Rank => "rank",
            TemplateId::DraftDisease => "draft_disease",
            TemplateId::ExtractTriples => "extract_triples",
            TemplateId::RankEvidence => "rank_evidence",
            TemplateId::Reason => "reason",
            TemplateId::PatientRewrite => "patient_rewrite",
            TemplateId::RefineQuestion => "refine_question",
        }
    }

    /// Parsing contract applied to responses of this template.
    pub fn schema(self) -> ResponseSchema {
        match self {
            TemplateId::Greeting | TemplateId::PatientRewrite | TemplateId::RefineQuestion => {
                ResponseSchema::Text
            }
            TemplateId::UpdateByDialogue
            | TemplateId::GeneratePreliminaryDdx
            | TemplateId::TargetedUpdate => ResponseSchema::JsonObject,
            TemplateId::Recognize => ResponseSchema::LineList,
            TemplateId::Rank => ResponseSchema::NameScorePairs,
            TemplateId::DraftDisease => ResponseSchema::HeadingSections,
            TemplateId::ExtractTriples => ResponseSchema::PipeTriples,
            TemplateId::RankEvidence => ResponseSchema::IdLines,
            TemplateId::Reason => ResponseSchema::NumberedSections,
        }
    }

    fn builtin_body(self) -> &'static str {
        match self {
            TemplateId::Greeting => include_str!("../../prompts/greeting.txt"),
            TemplateId::UpdateByDialogue => include_str!("../../prompts/update_by_dialogue.txt"),
            TemplateId::GeneratePreliminaryDdx => {
                include_str!("../../prompts/generate_preliminary_ddx.txt")
            }
            TemplateId::TargetedUpdate => include_str!("../../prompts/targeted_update.txt"),
            TemplateId::Recognize => include_str!("../../prompts/recognize.txt"),
            TemplateId::Rank => include_str!("../../prompts/rank.txt"),
            TemplateId::DraftDisease => include_str!("../../prompts/draft_disease.txt"),
            TemplateId::ExtractTriples => include_str!("../../prompts/extract_triples.txt"),
            TemplateId::RankEvidence => include_str!("../../prompts/rank_evidence.txt"),
            TemplateId::Reason => include_str!("../../prompts/reason.txt"),
            TemplateId::PatientRewrite => include_str!("../../prompts/patient_rewrite.txt"),
            TemplateId::RefineQuestion => include_str!("../../prompts/refine_question.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| GatewayError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseSchema {
    Text,
    JsonObject,
    LineList,
    NameScorePairs,
    HeadingSections,
    PipeTriples,
    IdLines,
    NumberedSections,
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Literal(String),
    Placeholder(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: String,
    pieces: Vec<Piece>,
}

impl PromptTemplate {
    /// Parses `{{name}}` placeholders; `;;` lines are asset comments.
    pub fn parse(id: TemplateId, source: &str) -> Self {
        let body: String = source
            .lines()
            .filter(|l| !l.starts_with(";;"))
            .collect::<Vec<_>>()
            .join("\n");
        let mut pieces = Vec::new();
        let mut rest = body.as_str();
        let mut literal = String::new();
        while let Some(start) = rest.find("{{") {
            let after = &rest[start + 2..];
            let name_len = after
                .find(|c: char| !(c.is_ascii_lowercase() || c == '_'))
                .unwrap_or(after.len());
            if name_len > 0 && after[name_len..].starts_with("}}") {
                literal.push_str(&rest[..start]);
                if !literal.is_empty() {
                    pieces.push(Piece::Literal(std::mem::take(&mut literal)));
                }
                pieces.push(Piece::Placeholder(after[..name_len].to_string()));
                rest = &after[name_len + 2..];
            } else {
                literal.push_str(&rest[..start + 2]);
                rest = after;
            }
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            pieces.push(Piece::Literal(literal));
        }
        Self { id, body, pieces }
    }

    pub fn placeholders(&self) -> BTreeSet<&str> {
        self.pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Placeholder(n) => Some(n.as_str()),
                Piece::Literal(_) => None,
            })
            .collect()
    }

    /// Every placeholder must be supplied, and every supplied variable must
    /// name a placeholder.
    pub fn render(&self, vars: &BTreeMap<String, String>) -> Result<String, GatewayError> {
        let names = self.placeholders();
        if let Some(unknown) = vars.keys().find(|k| !names.contains(k.as_str())) {
            return Err(GatewayError::UnknownPlaceholder {
                template: self.id,
                name: unknown.clone(),
            });
        }
        let mut out = String::with_capacity(self.body.len());
        for p in &self.pieces {
            match p {
                Piece::Literal(s) => out.push_str(s),
                Piece::Placeholder(n) => {
                    let v = vars.get(n).ok_or_else(|| GatewayError::MissingVariable {
                        template: self.id,
                        name: n.clone(),
                    })?;
                    out.push_str(v);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateId, PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = TemplateId::ALL
            .into_iter()
            .map(|id| (id, PromptTemplate::parse(id, id.builtin_body())))
            .collect();
        Self { templates }
    }

    /// Builtins overridden by any `<template_id>.txt` found in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, GatewayError> {
        let mut set = Self::builtin();
        for id in TemplateId::ALL {
            let p = dir.join(format!("{id}.txt"));
            if p.exists() {
                let src = std::fs::read_to_string(&p).map_err(|e| GatewayError::Transport {
                    message: format!("{}: {e}", p.display()),
                    transient: false,
                })?;
                set.templates.insert(id, PromptTemplate::parse(id, &src));
            }
        }
        Ok(set)
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        &self.templates[&id]
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}
