//! Line-delimited JSON node/edge files.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Entity, EntityKind, KgError, KnowledgeGraph, Provenance, Result, Triple};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub id: String,
    pub name: String,
    pub kind: EntityKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub definition_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    /// Time of the last expert-reviewed evolution of this disease.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_evolution: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeRecord {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub provenance: Provenance,
    /// Omitted on export when zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<DateTime<Utc>>,
}

impl From<&Triple> for EdgeRecord {
    fn from(t: &Triple) -> Self {
        Self {
            subject: t.subject.clone(),
            relation: t.relation.clone(),
            object: t.object.clone(),
            provenance: t.provenance.clone(),
            usage_count: (t.usage_count > 0).then_some(t.usage_count),
            created_at: t.created_at,
        }
    }
}

impl From<EdgeRecord> for Triple {
    fn from(r: EdgeRecord) -> Self {
        Triple {
            subject: r.subject,
            relation: r.relation,
            object: r.object,
            provenance: r.provenance,
            usage_count: r.usage_count.unwrap_or(0),
            created_at: r.created_at,
        }
    }
}

/// Parses one JSON value per non-blank line; `file` labels error messages.
pub fn read_jsonl<T: DeserializeOwned>(
    reader: impl BufRead,
    file: &str,
) -> Result<Vec<(usize, T)>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| KgError::Malformed {
            file: file.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(mut writer: impl Write, records: &[T]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r).map_err(std::io::Error::other)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Builds a graph from parsed records. Records carry their 1-based line
/// numbers for diagnostics.
pub fn import_graph(
    nodes: Vec<(usize, NodeRecord)>,
    edges: Vec<(usize, EdgeRecord)>,
) -> Result<KnowledgeGraph> {
    let mut g = KnowledgeGraph::new();
    let mut evolved = BTreeMap::new();
    for (line, n) in nodes {
        if g.contains(&n.id) {
            return Err(KgError::Duplicate {
                file: "nodes".into(),
                line,
                what: "node id",
                id: n.id,
            });
        }
        let e = Entity {
            id: n.id,
            name: n.name,
            kind: n.kind,
            definition_text: n.definition_text,
            severity: n.severity,
            embedding: n.embedding,
        };
        e.validate().map_err(|err| KgError::Malformed {
            file: "nodes".into(),
            line,
            message: err.to_string(),
        })?;
        if let Some(t) = n.last_evolution {
            evolved.insert(e.id.clone(), t);
        }
        g.insert_entity_unchecked(e);
    }
    for (line, r) in edges {
        let t: Triple = r.into();
        let key = t.key();
        for end in [&t.subject, &t.object] {
            if !g.contains(end) {
                return Err(KgError::Malformed {
                    file: "edges".into(),
                    line,
                    message: format!("edge {key} references unknown entity {end}"),
                });
            }
        }
        if g.contains_triple(&key) {
            return Err(KgError::Duplicate {
                file: "edges".into(),
                line,
                what: "triple",
                id: key.to_string(),
            });
        }
        g.insert_triple_unchecked(t);
    }
    for (id, t) in evolved {
        g.set_last_evolution(&id, t)?;
    }
    Ok(g)
}

pub fn export_graph(g: &KnowledgeGraph) -> (Vec<NodeRecord>, Vec<EdgeRecord>) {
    let nodes = g
        .entities()
        .map(|e| NodeRecord {
            id: e.id.clone(),
            name: e.name.clone(),
            kind: e.kind,
            definition_text: e.definition_text.clone(),
            severity: e.severity,
            embedding: e.embedding.clone(),
            last_evolution: g.last_evolution(&e.id),
        })
        .collect();
    let edges = g.triples().map(EdgeRecord::from).collect();
    (nodes, edges)
}

impl KnowledgeGraph {
    pub fn load_files(nodes: &std::path::Path, edges: &std::path::Path) -> Result<Self> {
        let open = |p: &std::path::Path| -> Result<std::io::BufReader<std::fs::File>> {
            Ok(std::io::BufReader::new(std::fs::File::open(p)?))
        };
        let n = read_jsonl(open(nodes)?, &nodes.display().to_string())?;
        let e = read_jsonl(open(edges)?, &edges.display().to_string())?;
        import_graph(n, e)
    }

    pub fn save_files(&self, nodes: &std::path::Path, edges: &std::path::Path) -> Result<()> {
        let (n, e) = export_graph(self);
        write_jsonl(std::io::BufWriter::new(std::fs::File::create(nodes)?), &n)?;
        write_jsonl(std::io::BufWriter::new(std::fs::File::create(edges)?), &e)?;
        Ok(())
    }
}
