//! Scripted patient runs and top-k hit metrics.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use chrono::{DateTime, Duration, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::AppConfig;
use crate::diagnosis::{Diagnoser, DiagnosisError, DiagnosisRecord};
use crate::evolution::{EvolutionError, EvolutionEvent, Worklist};
use crate::gateway::{Gateway, ScriptEntry, TranscriptEntry};
use crate::history::{DialogueState, HistoryError, HistoryExport, Message, Stage};
use crate::kg::{KgError, KnowledgeGraph, MergeDiff};
use crate::linker::EmbeddingProvider;
use crate::text::normalize_name;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Pack { path: PathBuf, message: String },
    #[error("pack {0} has an empty patient script")]
    EmptyScript(String),
    #[error("patient script ran out in stage {stage:?} after {turns} turns")]
    ScriptExhausted { stage: Stage, turns: usize },
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error(transparent)]
    Diagnosis(#[from] DiagnosisError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
}

pub type Result<T, E = ScenarioError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgFiles {
    pub nodes: PathBuf,
    pub edges: PathBuf,
}

/// Reviewer that approves every drafted evolution event during a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertScript {
    pub reviewer: String,
}

fn default_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 3, 1, 9, 0, 0).unwrap()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPack {
    pub id: String,
    #[serde(default)]
    pub description: String,
    /// Paths relative to the pack file.
    pub kg: KgFiles,
    pub patient_script: Vec<String>,
    pub llm_script: Vec<ScriptEntry>,
    pub ground_truth: String,
    #[serde(default)]
    pub acceptable_differentials: Vec<String>,
    #[serde(default)]
    pub max_ddx_questions: Option<usize>,
    #[serde(default)]
    pub expert: Option<ExpertScript>,
    #[serde(default = "default_start")]
    pub started_at: DateTime<Utc>,
}

impl ScenarioPack {
    pub fn load(path: &Path) -> Result<Self> {
        let err = |message: String| ScenarioError::Pack {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut pack: ScenarioPack = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut pack.kg.nodes, &mut pack.kg.edges] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if pack.patient_script.is_empty() {
            return Err(ScenarioError::EmptyScript(pack.id));
        }
        Ok(pack)
    }

    pub fn load_graph(&self) -> Result<KnowledgeGraph> {
        Ok(KnowledgeGraph::load_files(&self.kg.nodes, &self.kg.edges)?)
    }

    /// Exact normalized match against the ground truth or an acceptable
    /// differential.
    pub fn is_hit(&self, name: &str) -> bool {
        let n = normalize_name(name);
        std::iter::once(&self.ground_truth)
            .chain(&self.acceptable_differentials)
            .any(|g| normalize_name(g) == n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackMetrics {
    pub pack_id: String,
    pub top1_hit: bool,
    pub top3_hit: bool,
    pub turns: usize,
    pub top: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub pack_count: usize,
    pub top1_count: usize,
    pub top3_count: usize,
    pub failed_count: usize,
    pub mean_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub packs: Vec<PackMetrics>,
    pub aggregate: Aggregate,
}

impl RunMetrics {
    /// Sorted by pack id so parallel runs aggregate identically.
    pub fn from_packs(mut packs: Vec<PackMetrics>) -> Self {
        packs.sort_by(|a, b| a.pack_id.cmp(&b.pack_id));
        let n = packs.len();
        let aggregate = Aggregate {
            pack_count: n,
            top1_count: packs.iter().filter(|p| p.top1_hit).count(),
            top3_count: packs.iter().filter(|p| p.top3_hit).count(),
            failed_count: packs.iter().filter(|p| p.error.is_some()).count(),
            mean_time_ms: if n == 0 {
                0.0
            } else {
                packs.iter().map(|p| p.wall_time_ms as f64).sum::<f64>() / n as f64
            },
        };
        Self { packs, aggregate }
    }

    /// JSON with wall-time fields removed.
    pub fn stable_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("metrics serialize");
        if let Some(ps) = v["packs"].as_array_mut() {
            for p in ps {
                p.as_object_mut().map(|o| o.remove("wall_time_ms"));
            }
        }
        v["aggregate"]
            .as_object_mut()
            .map(|o| o.remove("mean_time_ms"));
        v
    }

    pub fn to_table(&self) -> String {
        let w = self
            .packs
            .iter()
            .map(|p| p.pack_id.len())
            .max()
            .unwrap_or(4)
            .max(4);
        let mut out = format!("{:<w$}  top1  top3  turns  time_ms  top\n", "pack");
        for p in &self.packs {
            let yn = |b: bool| if b { "yes" } else { "no" };
            out.push_str(&format!(
                "{:<w$}  {:<4}  {:<4}  {:>5}  {:>7}  {}\n",
                p.pack_id,
                yn(p.top1_hit),
                yn(p.top3_hit),
                p.turns,
                p.wall_time_ms,
                p.error
                    .as_deref()
                    .map_or_else(|| p.top.join(", "), |e| format!("FAILED: {e}")),
            ));
        }
        let a = &self.aggregate;
        out.push_str(&format!(
            "{:<w$}  {:<4}  {:<4}  {:>5}  {:>7.0}  {} failed of {}\n",
            "total", a.top1_count, a.top3_count, "", a.mean_time_ms, a.failed_count, a.pack_count
        ));
        out
    }
}

/// Everything a scenario run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRun {
    pub metrics: PackMetrics,
    pub dialogue: DialogueState,
    pub stages: Vec<Stage>,
    pub history: HistoryExport,
    pub record: DiagnosisRecord,
    pub evolution_events: Vec<EvolutionEvent>,
    pub merge_diffs: Vec<MergeDiff>,
    pub llm_transcript: Vec<TranscriptEntry>,
    #[serde(skip)]
    pub graph: KnowledgeGraph,
}

impl ScenarioRun {
    pub fn messages(&self) -> &[Message] {
        &self.dialogue.messages
    }
}

fn clock(pack: &ScenarioPack, tick: usize) -> DateTime<Utc> {
    pack.started_at + Duration::minutes(tick as i64)
}

/// Drives one pack end to end: scripted dialogue to Done, diagnosis, and
/// evolution of differential names missing from the graph (approved by the
/// pack's expert, if any, before the final ranking).
pub fn run_scenario(pack: &ScenarioPack, config: &AppConfig) -> Result<ScenarioRun> {
    let graph = pack.load_graph()?;
    let embedder = config.embedder.build()?;
    run_scenario_with(pack, config, graph, embedder)
}

pub fn run_scenario_with(
    pack: &ScenarioPack,
    config: &AppConfig,
    mut graph: KnowledgeGraph,
    embedder: Arc<dyn EmbeddingProvider>,
) -> Result<ScenarioRun> {
    let started = Instant::now();
    if pack.patient_script.is_empty() {
        return Err(ScenarioError::EmptyScript(pack.id.clone()));
    }
    let mut hcfg = config.history();
    if let Some(m) = pack.max_ddx_questions {
        hcfg.max_ddx_questions = m;
    }
    let gw = Gateway::scripted(pack.llm_script.clone());
    let mut tick = 0;
    let mut state = DialogueState::start(hcfg, &gw, clock(pack, tick))?;
    let mut stages = vec![state.state];
    let mut turns = 0;
    for utterance in &pack.patient_script {
        if state.state == Stage::Done {
            break;
        }
        tick += 1;
        let (next, out) = state.step(utterance, &gw, clock(pack, tick))?;
        state = next;
        turns += 1;
        if stages.last() != Some(&out.to) {
            stages.push(out.to);
        }
    }
    if state.state != Stage::Done {
        return Err(ScenarioError::ScriptExhausted {
            stage: state.state,
            turns,
        });
    }
    let (history, top3) = state.finish()?;
    let now = clock(pack, tick + 1);

    let diagnoser = Diagnoser::<f64>::new(embedder.clone(), config.diagnosis())?;
    let prepared = diagnoser.prepare(&graph, &history.as_text(), &top3, &gw)?;
    let (_, combined) = diagnoser.combine(&graph, &prepared)?;
    let mut worklist = Worklist::new();
    let mut merge_diffs = Vec::new();
    if !combined.unresolved.is_empty() {
        let ecfg = config.evolution();
        let ids = worklist.detect(&graph, &combined.unresolved, &ecfg, now);
        if let Some(expert) = &pack.expert {
            for id in ids {
                worklist.draft(id, &graph, &gw, now)?;
                let diff = worklist.approve(
                    id,
                    None,
                    &mut graph,
                    &embedder,
                    &ecfg,
                    &expert.reviewer,
                    now,
                )?;
                merge_diffs.push(diff);
            }
        }
    }
    let record = diagnoser.finalize(&graph, &prepared, &gw)?;
    graph.increment_usage(&record.used_triples)?;

    let top: Vec<String> = record.candidates.iter().map(|c| c.name.clone()).collect();
    let metrics = PackMetrics {
        pack_id: pack.id.clone(),
        top1_hit: top.first().is_some_and(|n| pack.is_hit(n)),
        top3_hit: top.iter().take(3).any(|n| pack.is_hit(n)),
        turns,
        top,
        error: None,
        wall_time_ms: started.elapsed().as_millis() as u64,
    };
    Ok(ScenarioRun {
        metrics,
        history: history.export(&top3),
        dialogue: state,
        stages,
        record,
        evolution_events: worklist.events().cloned().collect(),
        merge_diffs,
        llm_transcript: gw.transcript(),
        graph,
    })
}

/// Metrics row for a run that failed.
pub fn failed_metrics(pack_id: &str, err: &ScenarioError, wall_time_ms: u64) -> PackMetrics {
    PackMetrics {
        pack_id: pack_id.to_string(),
        top1_hit: false,
        top3_hit: false,
        turns: 0,
        top: Vec::new(),
        error: Some(err.to_string()),
        wall_time_ms,
    }
}

/// `*.json` packs in a directory, by file name.
pub fn pack_paths(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    out.sort();
    Ok(out)
}

/// Runs every pack in `dir`; unreadable or failing packs become error rows.
pub fn eval_dir(dir: &Path, config: &AppConfig) -> std::io::Result<RunMetrics> {
    let mut rows = Vec::new();
    for path in pack_paths(dir)? {
        let started = Instant::now();
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let row = match ScenarioPack::load(&path).and_then(|p| run_scenario(&p, config)) {
            Ok(run) => run.metrics,
            Err(e) => failed_metrics(&id, &e, started.elapsed().as_millis() as u64),
        };
        rows.push(row);
    }
    Ok(RunMetrics::from_packs(rows))
}
