//! Durable graph: a node/edge snapshot plus a write-ahead journal.
//!
//! Every mutation is appended to `journal.jsonl` before it is applied in
//! memory. Opening the store loads the snapshot and replays the journal;
//! [`GraphStore::compact`] folds the journal back into the snapshot.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{KgError, KnowledgeGraph, MergeBatch, MergeDiff, Result, TripleKey};

const NODES: &str = "nodes.jsonl";
const EDGES: &str = "edges.jsonl";
const JOURNAL: &str = "journal.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum JournalEntry {
    Merge {
        diff: MergeDiff,
    },
    Usage {
        keys: Vec<TripleKey>,
    },
    Evolved {
        disease_id: String,
        at: DateTime<Utc>,
    },
}

#[derive(Debug)]
pub struct GraphStore {
    dir: PathBuf,
    graph: KnowledgeGraph,
    journal: File,
}

impl GraphStore {
    /// Creates a store directory holding `graph` as its snapshot. Fails if a
    /// snapshot already exists there.
    pub fn create(dir: impl AsRef<Path>, graph: KnowledgeGraph) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        if dir.join(NODES).exists() {
            return Err(KgError::Io(std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                format!("store already exists at {}", dir.display()),
            )));
        }
        graph.save_files(&dir.join(NODES), &dir.join(EDGES))?;
        File::create(dir.join(JOURNAL))?;
        Self::open(dir)
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let mut graph = KnowledgeGraph::load_files(&dir.join(NODES), &dir.join(EDGES))?;
        let journal_path = dir.join(JOURNAL);
        if journal_path.exists() {
            let reader = BufReader::new(File::open(&journal_path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: JournalEntry =
                    serde_json::from_str(&line).map_err(|e| KgError::Journal {
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                replay(&mut graph, &entry).map_err(|e| KgError::Journal {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            }
        }
        let journal = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&journal_path)?;
        Ok(Self {
            dir,
            graph,
            journal,
        })
    }

    pub fn graph(&self) -> &KnowledgeGraph {
        &self.graph
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn append(&mut self, entry: &JournalEntry) -> Result<()> {
        let mut line = serde_json::to_vec(entry).map_err(std::io::Error::other)?;
        line.push(b'\n');
        self.journal.write_all(&line)?;
        self.journal.sync_data()?;
        Ok(())
    }

    pub fn merge(&mut self, batch: &MergeBatch) -> Result<MergeDiff> {
        let diff = self.graph.plan_merge(batch)?;
        if !diff.is_empty() {
            self.append(&JournalEntry::Merge { diff: diff.clone() })?;
            self.graph.apply_diff(&diff);
        }
        Ok(diff)
    }

    pub fn record_usage(&mut self, keys: &[TripleKey]) -> Result<usize> {
        if keys.is_empty() {
            return Ok(0);
        }
        if let Some(k) = keys.iter().find(|k| !self.graph.contains_triple(k)) {
            return Err(KgError::TripleNotFound(k.clone()));
        }
        let mut keys = keys.to_vec();
        keys.sort();
        keys.dedup();
        self.append(&JournalEntry::Usage { keys: keys.clone() })?;
        self.graph.increment_usage(&keys)
    }

    pub fn mark_evolved(&mut self, disease_id: &str, at: DateTime<Utc>) -> Result<()> {
        self.graph.entity(disease_id)?;
        self.append(&JournalEntry::Evolved {
            disease_id: disease_id.to_string(),
            at,
        })?;
        self.graph.set_last_evolution(disease_id, at)
    }

    /// Rewrites the snapshot from memory and truncates the journal.
    pub fn compact(&mut self) -> Result<()> {
        let tmp_nodes = self.dir.join("nodes.jsonl.tmp");
        let tmp_edges = self.dir.join("edges.jsonl.tmp");
        self.graph.save_files(&tmp_nodes, &tmp_edges)?;
        std::fs::rename(tmp_nodes, self.dir.join(NODES))?;
        std::fs::rename(tmp_edges, self.dir.join(EDGES))?;
        self.journal = File::create(self.dir.join(JOURNAL))?;
        self.journal.sync_data()?;
        self.journal = OpenOptions::new()
            .append(true)
            .open(self.dir.join(JOURNAL))?;
        Ok(())
    }
}

fn replay(graph: &mut KnowledgeGraph, entry: &JournalEntry) -> Result<()> {
    match entry {
        JournalEntry::Merge { diff } => {
            let batch = MergeBatch {
                entities: diff.added_entities.clone(),
                triples: diff.added.clone(),
            };
            let planned = graph.plan_merge(&batch)?;
            graph.apply_diff(&planned);
        }
        JournalEntry::Usage { keys } => {
            for k in keys {
                let cur = graph
                    .triple(k)
                    .ok_or_else(|| KgError::TripleNotFound(k.clone()))?
                    .usage_count;
                graph.set_usage(k, cur + 1);
            }
        }
        JournalEntry::Evolved { disease_id, at } => graph.set_last_evolution(disease_id, *at)?,
    }
    Ok(())
}
