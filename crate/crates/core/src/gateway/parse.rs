//! Response parsing contracts. Each parser returns `Err(message)` on a schema
//! violation; the gateway attaches the raw payload.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::text::normalize_name;

pub type ParseResult<T> = Result<T, String>;

fn strip_bullet(line: &str) -> &str {
    let t = line.trim();
    let t = t
        .strip_prefix("- ")
        .or_else(|| t.strip_prefix("* "))
        .or_else(|| t.strip_prefix("• "))
        .unwrap_or(t);
    strip_number(t).unwrap_or(t).trim()
}

/// `"3. text"` or `"3) text"` -> `Some("text")`.
fn strip_number(line: &str) -> Option<&str> {
    let t = line.trim_start();
    let digits = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    if digits == 0 {
        return None;
    }
    let rest = &t[digits..];
    rest.strip_prefix('.')
        .or_else(|| rest.strip_prefix(')'))
        .map(str::trim)
}

pub fn text(raw: &str) -> ParseResult<String> {
    let t = raw.trim();
    if t.is_empty() {
        return Err("empty response".into());
    }
    Ok(t.to_string())
}

pub fn json_object(raw: &str) -> ParseResult<serde_json::Map<String, serde_json::Value>> {
    let t = raw.trim();
    // Tolerate a fenced block around the object.
    let t = t
        .strip_prefix("```json")
        .or_else(|| t.strip_prefix("```"))
        .map(|s| s.trim_end().trim_end_matches("```"))
        .unwrap_or(t);
    match serde_json::from_str::<serde_json::Value>(t.trim()) {
        Ok(serde_json::Value::Object(m)) => Ok(m),
        Ok(_) => Err("expected a JSON object".into()),
        Err(e) => Err(format!("invalid JSON: {e}")),
    }
}

/// One item per line; bullets and numbering stripped; case-insensitive
/// duplicates removed keeping the first.
pub fn line_list(raw: &str) -> ParseResult<Vec<String>> {
    let mut seen = BTreeSet::new();
    let items: Vec<String> = raw
        .lines()
        .map(strip_bullet)
        .filter(|l| !l.is_empty())
        .filter(|l| seen.insert(normalize_name(l)))
        .map(str::to_string)
        .collect();
    if items.is_empty() {
        return Err("no items".into());
    }
    Ok(items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NameScore {
    pub name: String,
    /// Clamped into `[0, 10]`.
    pub score: f64,
    pub raw_score: f64,
}

/// `"name: score"` per line. The split is on the last colon.
pub fn name_score_pairs(raw: &str) -> ParseResult<Vec<NameScore>> {
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let l = strip_bullet(line);
        if l.is_empty() {
            continue;
        }
        let (name, score) = l
            .rsplit_once(':')
            .ok_or_else(|| format!("line {}: expected \"name: score\"", i + 1))?;
        let score = score.trim().trim_end_matches("/10").trim();
        let raw_score: f64 = score
            .parse()
            .map_err(|_| format!("line {}: score {score:?} is not a number", i + 1))?;
        if !raw_score.is_finite() {
            return Err(format!("line {}: score is not finite", i + 1));
        }
        let name = name.trim();
        if name.is_empty() {
            return Err(format!("line {}: empty name", i + 1));
        }
        out.push(NameScore {
            name: name.to_string(),
            score: raw_score.clamp(0.0, 10.0),
            raw_score,
        });
    }
    if out.is_empty() {
        return Err("no scores".into());
    }
    Ok(out)
}

/// Heading-structured text: each recognised heading starts a section. A
/// heading line may carry inline content after its colon. Returns
/// `(normalized heading, body)` pairs in order of appearance.
pub fn heading_sections(raw: &str, headings: &[&str]) -> ParseResult<Vec<(String, String)>> {
    let wanted: Vec<String> = headings.iter().map(|h| normalize_heading(h)).collect();
    let mut out: Vec<(String, String)> = Vec::new();
    for line in raw.lines() {
        let t = line.trim();
        let candidate = t.trim_start_matches('#').trim().trim_matches('*').trim();
        let (head, inline) = match candidate.split_once(':') {
            Some((h, rest)) => (h, rest.trim()),
            None => (candidate, ""),
        };
        let norm = normalize_heading(head);
        if let Some(h) = wanted.iter().find(|w| **w == norm) {
            out.push((h.clone(), inline.to_string()));
            continue;
        }
        if let Some(last) = out.last_mut() {
            if !last.1.is_empty() {
                last.1.push('\n');
            }
            last.1.push_str(t);
        }
    }
    for s in &mut out {
        s.1 = s.1.trim().to_string();
    }
    if out.is_empty() {
        return Err("no recognised headings".into());
    }
    Ok(out)
}

pub fn normalize_heading(h: &str) -> String {
    normalize_name(&h.replace(['-', '*', '#'], " "))
}

/// `"subject|relation|object"` per line; exactly three non-empty fields.
pub fn pipe_triples(raw: &str) -> ParseResult<Vec<(String, String, String)>> {
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let l = strip_bullet(line);
        if l.is_empty() {
            continue;
        }
        let fields: Vec<&str> = l.split('|').map(str::trim).collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(format!(
                "line {}: expected exactly three non-empty fields \"s|r|o\", got {:?}",
                i + 1,
                l
            ));
        }
        out.push((fields[0].into(), fields[1].into(), fields[2].into()));
    }
    if out.is_empty() {
        return Err("no triples".into());
    }
    Ok(out)
}

/// `"<id>: <content>"` per line; content may be empty (`"<id>"` alone).
pub fn id_lines(raw: &str) -> ParseResult<Vec<(String, Option<String>)>> {
    let mut out = Vec::new();
    for line in raw.lines() {
        let l = strip_bullet(line);
        if l.is_empty() {
            continue;
        }
        match l.split_once(':') {
            Some((id, rest)) => out.push((id.trim().to_string(), Some(rest.trim().to_string()))),
            None => out.push((l.to_string(), None)),
        }
    }
    if out.is_empty() {
        return Err("no ranked items".into());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Reasoning {
    pub steps: Vec<String>,
    pub treatments: Vec<String>,
}

/// Numbered lines split into reasoning steps and treatment items by a
/// `Treatment` heading. Numbered lines before any heading are steps.
pub fn numbered_sections(raw: &str) -> ParseResult<Reasoning> {
    let mut r = Reasoning::default();
    let mut in_treatment = false;
    for line in raw.lines() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let head = normalize_heading(t.trim_end_matches(':'));
        if head.starts_with("treatment") || head.starts_with("recommended treatment") {
            in_treatment = true;
            continue;
        }
        if head.starts_with("reasoning") {
            in_treatment = false;
            continue;
        }
        let item = strip_number(t)
            .or_else(|| t.strip_prefix("- "))
            .map(str::trim);
        if let Some(item) = item.filter(|i| !i.is_empty()) {
            if in_treatment {
                r.treatments.push(item.to_string());
            } else {
                r.steps.push(item.to_string());
            }
        }
    }
    if r.steps.is_empty() {
        return Err("no numbered reasoning steps".into());
    }
    Ok(r)
}
