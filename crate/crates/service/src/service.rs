use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use casegraph_core::config::ConfigError;
use casegraph_core::diagnosis::Diagnoser;
use casegraph_core::evidence::{
    build_bundle, categorize_evidence, finalize_report, generate_report, rank_evidence,
    EvidenceBundle, FinalizeFields, ReasoningReport, ReportEdit,
};
use casegraph_core::evolution::{EditAction, EditPayload, EvolutionError, Worklist};
use casegraph_core::gateway::{Gateway, GatewayError, ProviderKind, ScriptEntry, TemplateId};
use casegraph_core::history::{DialogueState, Message, Role as Speaker, Stage};
use casegraph_core::kg::{GraphStore, KgError, KnowledgeGraph};
use casegraph_core::layout::{expand_node, focus_layout, global_layout, severity_bars, Canvas};
use casegraph_core::linker::EmbeddingProvider;
use casegraph_core::Layout;
use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::broadcast;

use crate::auth::{Principal, Role};
use crate::config::ServiceConfig;
use crate::error::ApiError;
use crate::session::{Finalized, FollowUp, Session, SessionLog, SessionLogError, SessionStatus};

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

/// A server-sent event: name plus JSON payload.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServerEvent {
    pub event: String,
    pub data: Value,
}

impl ServerEvent {
    pub fn new(event: &str, data: Value) -> Self {
        Self {
            event: event.to_string(),
            data,
        }
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("storage.data_dir is not set")]
    MissingDataDir,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("knowledge graph: {0}")]
    Kg(#[from] KgError),
    #[error("sessions: {0}")]
    Sessions(#[from] SessionLogError),
    #[error("worklist: {0}")]
    Worklist(#[from] EvolutionError),
    #[error("llm provider: {0}")]
    Gateway(#[from] GatewayError),
}

pub struct SessionSlot {
    pub session: Session,
    gateway: Arc<Gateway>,
    /// Script entries already used before this process loaded the session.
    base: BTreeMap<TemplateId, usize>,
}

impl SessionSlot {
    fn sync_consumed(&mut self) {
        if self.session.script.is_none() {
            return;
        }
        let mut counts = self.base.clone();
        for t in self.gateway.transcript() {
            if t.response.is_some() {
                *counts.entry(t.template).or_insert(0) += 1;
            }
        }
        self.session.llm_consumed = counts;
    }
}

/// What a patient message produced.
pub struct MessageOutcome {
    pub events: Vec<ServerEvent>,
    /// The history just completed; the diagnosis pipeline should run next.
    pub run_pipeline: bool,
}

pub struct Service {
    config: ServiceConfig,
    store: RwLock<GraphStore>,
    worklist: Mutex<Worklist>,
    worklist_path: PathBuf,
    sessions: Mutex<BTreeMap<String, Arc<tokio::sync::Mutex<SessionSlot>>>>,
    channels: Mutex<HashMap<String, broadcast::Sender<ServerEvent>>>,
    log: SessionLog,
    embedder: Arc<dyn EmbeddingProvider>,
    gateway: Arc<Gateway>,
    clock: Clock,
    next_id: AtomicU64,
}

fn chunks(text: &str) -> Vec<ServerEvent> {
    text.split_inclusive(' ')
        .map(|c| ServerEvent::new("prompt_delta", json!({ "text": c })))
        .collect()
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Main => "main",
        Stage::Other => "other",
        Stage::Ddx => "clarifying",
        Stage::Done => "done",
    }
}

fn status_event(s: &Session) -> ServerEvent {
    ServerEvent::new(
        "status_change",
        json!({ "status": s.status, "stage": stage_name(s.dialogue.state) }),
    )
}

impl Service {
    /// Opens or initializes the data directory: graph store (seeded from
    /// the configured files on first start), worklist and sessions.
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.app.validate()?;
        let data_dir = config
            .app
            .storage
            .data_dir
            .clone()
            .ok_or(ServiceError::MissingDataDir)?;
        std::fs::create_dir_all(&data_dir).map_err(KgError::Io)?;
        let kg_dir = data_dir.join("kg");
        let store = if kg_dir.join("nodes.jsonl").exists() {
            GraphStore::open(&kg_dir)?
        } else {
            let seed = match (
                &config.app.storage.seed_nodes,
                &config.app.storage.seed_edges,
            ) {
                (Some(n), Some(e)) => KnowledgeGraph::load_files(n, e)?,
                _ => KnowledgeGraph::new(),
            };
            GraphStore::create(&kg_dir, seed)?
        };
        let worklist_path = data_dir.join("worklist.json");
        let worklist = Worklist::load(&worklist_path)?;
        let log = SessionLog::open(data_dir.join("sessions"))?;
        let provider = &config.app.provider;
        let gateway = match (provider.kind, &provider.script_path) {
            (ProviderKind::ScriptedMock, None) => Gateway::scripted(Vec::new()),
            _ => Gateway::from_config(provider)?,
        };
        let embedder = config.app.embedder.build()?;
        let svc = Self {
            store: RwLock::new(store),
            worklist: Mutex::new(worklist),
            worklist_path,
            sessions: Mutex::new(BTreeMap::new()),
            channels: Mutex::new(HashMap::new()),
            log,
            embedder,
            gateway: Arc::new(gateway),
            clock: Arc::new(Utc::now),
            next_id: AtomicU64::new(1),
            config,
        };
        let mut max = 0;
        for s in svc.log.load_all()? {
            if let Some(n) = s.id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                max = max.max(n);
            }
            let slot = svc.slot_for(s);
            svc.install(slot);
        }
        svc.next_id.store(max + 1, Ordering::SeqCst);
        Ok(svc)
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn now(&self) -> DateTime<Utc> {
        (self.clock)()
    }

    pub fn graph_snapshot(&self) -> KnowledgeGraph {
        self.store.read().graph().clone()
    }

    fn canvas(&self) -> Canvas<f64> {
        Canvas::new(
            self.config.server.canvas_width,
            self.config.server.canvas_height,
        )
    }

    fn session_gateway(&self, script: &[ScriptEntry]) -> Gateway {
        let p = &self.config.app.provider;
        Gateway::scripted(script.to_vec())
            .with_retry(p.max_retries, Duration::from_millis(p.backoff_ms))
    }

    fn slot_for(&self, session: Session) -> SessionSlot {
        let gateway = match &session.script {
            Some(_) => Arc::new(self.session_gateway(&session.remaining_script())),
            None => self.gateway.clone(),
        };
        SessionSlot {
            base: session.llm_consumed.clone(),
            session,
            gateway,
        }
    }

    fn install(&self, slot: SessionSlot) {
        let id = slot.session.id.clone();
        self.channels
            .lock()
            .entry(id.clone())
            .or_insert_with(|| broadcast::channel(256).0);
        self.sessions
            .lock()
            .insert(id, Arc::new(tokio::sync::Mutex::new(slot)));
    }

    pub fn slot(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<SessionSlot>>, ApiError> {
        self.sessions
            .lock()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("session {id}")))
    }

    pub fn subscribe(&self, id: &str) -> Result<broadcast::Receiver<ServerEvent>, ApiError> {
        self.channels
            .lock()
            .get(id)
            .map(|c| c.subscribe())
            .ok_or_else(|| ApiError::not_found(format!("session {id}")))
    }

    fn publish(&self, id: &str, events: &[ServerEvent]) {
        if let Some(tx) = self.channels.lock().get(id) {
            for e in events {
                let _ = tx.send(e.clone());
            }
        }
    }

    fn persist(&self, slot: &mut SessionSlot, action: &str) -> Result<(), ApiError> {
        slot.sync_consumed();
        self.log
            .append(&slot.session, action, self.now())
            .map_err(|e| ApiError::internal(e.to_string()))
    }

    // ---- access rules ----

    /// Patients see only their own sessions; physicians see any session not
    /// assigned to someone else; experts see none.
    pub fn check_access(&self, p: &Principal, s: &Session) -> Result<(), ApiError> {
        match p.role {
            Role::Patient if s.patient_id != p.actor => {
                Err(ApiError::forbidden("not your session"))
            }
            Role::Physician => match &s.assigned_physician {
                Some(a) if a != &p.actor => Err(ApiError::forbidden(
                    "session is assigned to another physician",
                )),
                _ => Ok(()),
            },
            Role::Expert => Err(ApiError::forbidden("experts have no session access")),
            _ => Ok(()),
        }
    }

    fn reviewing(&self, p: &Principal, s: &Session) -> Result<(), ApiError> {
        p.require(&[Role::Physician])?;
        self.check_access(p, s)?;
        if s.status != SessionStatus::InReview {
            return Err(ApiError::conflict(format!(
                "session must be in review, it is {:?}",
                s.status
            )));
        }
        Ok(())
    }

    // ---- patient ----

    pub fn create_session(
        &self,
        p: &Principal,
        script: Option<Vec<ScriptEntry>>,
    ) -> Result<Value, ApiError> {
        p.require(&[Role::Patient])?;
        if script.is_some() && self.config.app.provider.kind != ProviderKind::ScriptedMock {
            return Err(ApiError::invalid(
                "a per-session script needs the scripted_mock provider",
            ));
        }
        let gateway = match &script {
            Some(s) => Arc::new(self.session_gateway(s)),
            None => self.gateway.clone(),
        };
        let now = self.now();
        let dialogue = DialogueState::start(self.config.app.history(), &gateway, now)?;
        let id = format!("s{:04}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let mut session = Session::new(id.clone(), p.actor.clone(), dialogue, script, now);
        session.audit(now, &p.actor, p.role, "created");
        let mut slot = SessionSlot {
            session,
            gateway,
            base: BTreeMap::new(),
        };
        self.persist(&mut slot, "created")?;
        let prompt = slot
            .session
            .dialogue
            .last_system_message()
            .unwrap_or_default()
            .to_string();
        let status = slot.session.status;
        self.install(slot);
        Ok(json!({ "id": id, "status": status, "prompt": prompt }))
    }

    pub fn post_message(
        &self,
        p: &Principal,
        slot: &mut SessionSlot,
        text: &str,
    ) -> Result<MessageOutcome, ApiError> {
        p.require(&[Role::Patient])?;
        self.check_access(p, &slot.session)?;
        if text.trim().is_empty() {
            return Err(ApiError::invalid("empty message"));
        }
        let now = self.now();
        let s = &mut slot.session;
        match s.status {
            SessionStatus::Collecting => {
                let (next, out) = s.dialogue.step(text, &slot.gateway, now)?;
                s.dialogue = next;
                let mut events = chunks(&out.prompt);
                events.extend(out.deltas.iter().map(|d| {
                    ServerEvent::new(
                        "history_delta",
                        json!({
                            "template": d.template,
                            "section": d.section,
                            "slot": d.slot,
                            "value": d.value,
                        }),
                    )
                }));
                let done = out.to == Stage::Done;
                if done {
                    let (history, ddx) = s.dialogue.finish()?;
                    s.history = Some(history);
                    s.preliminary_ddx = ddx;
                    s.status = SessionStatus::AwaitingPhysician;
                    s.audit(now, &p.actor, p.role, "history completed");
                }
                if out.from != out.to {
                    events.push(status_event(s));
                }
                self.persist(slot, "message")?;
                self.publish(&slot.session.id, &events);
                Ok(MessageOutcome {
                    events,
                    run_pipeline: done,
                })
            }
            SessionStatus::InReview => {
                let open = s
                    .followups
                    .iter_mut()
                    .rev()
                    .find(|f| f.answer.is_none())
                    .ok_or_else(|| ApiError::conflict("no question is waiting for an answer"))?;
                open.answer = Some(text.to_string());
                open.answered_at = Some(now);
                s.dialogue.messages.push(Message {
                    role: Speaker::Patient,
                    text: text.to_string(),
                    timestamp: now,
                });
                s.audit(now, &p.actor, p.role, "answered follow-up");
                self.persist(slot, "follow-up answer")?;
                Ok(MessageOutcome {
                    events: Vec::new(),
                    run_pipeline: false,
                })
            }
            other => Err(ApiError::conflict(format!(
                "session is {other:?}, messages are closed"
            ))),
        }
    }

    /// Diagnosis after the history completes. Failures are kept on the
    /// session for the physician to see.
    pub fn run_pipeline(&self, slot: &mut SessionSlot) {
        let now = self.now();
        if let Err(e) = self.diagnose(slot, now) {
            log::error!("diagnosis for {} failed: {e}", slot.session.id);
            slot.session.pipeline_error = Some(e.message);
        }
        if let Err(e) = self.persist(slot, "diagnosed") {
            log::error!("persisting {} failed: {e}", slot.session.id);
        }
    }

    fn history_text(s: &Session) -> Result<String, ApiError> {
        let h = s
            .history
            .as_ref()
            .ok_or_else(|| ApiError::conflict("history is not complete"))?;
        let mut text = h.as_text();
        for f in &s.followups {
            if let Some(a) = &f.answer {
                text.push_str(&format!(
                    "\nFollow-up question: {}\nAnswer: {a}",
                    f.question
                ));
            }
        }
        Ok(text)
    }

    fn diagnose(&self, slot: &mut SessionSlot, now: DateTime<Utc>) -> Result<(), ApiError> {
        let s = &mut slot.session;
        let text = Self::history_text(s)?;
        let graph = self.graph_snapshot();
        let diagnoser = Diagnoser::<f64>::new(self.embedder.clone(), self.config.app.diagnosis())?;
        let prepared = diagnoser.prepare(&graph, &text, &s.preliminary_ddx, &slot.gateway)?;
        let (_, combined) = diagnoser.combine(&graph, &prepared)?;
        if !combined.unresolved.is_empty() {
            let mut wl = self.worklist.lock();
            let ids = wl.detect(
                &graph,
                &combined.unresolved,
                &self.config.app.evolution(),
                now,
            );
            wl.save(&self.worklist_path)?;
            s.evolution_events.extend(ids);
        }
        let record = diagnoser.finalize(&graph, &prepared, &slot.gateway)?;
        self.store.write().record_usage(&record.used_triples)?;

        let mut bundles = BTreeMap::new();
        let mut ordered = Vec::new();
        for c in &record.candidates {
            let b = build_bundle(&graph, &c.disease_id, &record.linked_symptoms)?;
            let b = categorize_evidence(&b, &record.linked_symptoms);
            ordered.push(b.clone());
            bundles.insert(c.disease_id.clone(), b);
        }
        let layout = global_layout(
            &graph,
            &ordered,
            self.config.app.thresholds.k,
            self.canvas(),
            self.config.server.min_severity,
        )?;
        s.bars = severity_bars(&record.candidates);
        s.reports.retain(|d, _| bundles.contains_key(d));
        s.bundles = bundles;
        s.ranked.clear();
        s.global_layout = Some(layout.clone());
        s.layout = Some(layout);
        s.active_diagnosis = None;
        s.diagnosis = Some(record);
        s.pipeline_error = None;
        Ok(())
    }

    pub fn patient_summary(&self, p: &Principal, s: &Session) -> Result<Value, ApiError> {
        self.check_access(p, s)?;
        Ok(json!({
            "id": s.id,
            "status": s.status,
            "stage": stage_name(s.dialogue.state),
            "messages": s.messages(),
        }))
    }

    pub fn list_sessions(&self, p: &Principal) -> Result<Value, ApiError> {
        p.require(&[Role::Patient, Role::Physician])?;
        let slots: Vec<_> = self.sessions.lock().values().cloned().collect();
        let mut out = Vec::new();
        for slot in slots {
            let Ok(g) = slot.try_lock() else {
                continue;
            };
            let s = &g.session;
            if self.check_access(p, s).is_err() {
                continue;
            }
            out.push(match p.role {
                Role::Patient => {
                    json!({ "id": s.id, "status": s.status, "created_at": s.created_at })
                }
                _ => json!({
                    "id": s.id,
                    "patient_id": s.patient_id,
                    "status": s.status,
                    "created_at": s.created_at,
                    "assigned_physician": s.assigned_physician,
                }),
            });
        }
        Ok(Value::Array(out))
    }

    pub fn history_view(&self, p: &Principal, s: &Session) -> Result<Value, ApiError> {
        self.check_access(p, s)?;
        let history = s.history.clone().unwrap_or_else(|| s.dialogue.history());
        let export = history.export(&s.preliminary_ddx);
        Ok(match p.role {
            Role::Patient => json!({
                "id": s.id,
                "status": s.status,
                "main_template": export.main_template,
                "other_template": export.other_template,
                "messages": s.messages(),
            }),
            _ => json!({
                "id": s.id,
                "status": s.status,
                "main_template": export.main_template,
                "other_template": export.other_template,
                "preliminary_ddx": export.preliminary_ddx,
                "messages": s.messages(),
            }),
        })
    }

    pub fn explanation(&self, p: &Principal, s: &Session) -> Result<Value, ApiError> {
        p.require(&[Role::Patient, Role::Physician])?;
        self.check_access(p, s)?;
        let f = s
            .finalized
            .as_ref()
            .ok_or_else(|| ApiError::not_found("no explanation has been released yet"))?;
        Ok(json!({ "text": f.patient_text, "released_at": f.at }))
    }

    // ---- physician ----

    fn physician_view(s: &Session) -> Value {
        let history = s.history.clone().unwrap_or_else(|| s.dialogue.history());
        json!({
            "id": s.id,
            "patient_id": s.patient_id,
            "status": s.status,
            "assigned_physician": s.assigned_physician,
            "handover_at": s.handover_at,
            "history": history.export(&s.preliminary_ddx),
            "messages": s.messages(),
            "diagnosis": s.diagnosis,
            "bars": s.bars,
            "layout": s.layout,
            "active_diagnosis": s.active_diagnosis,
            "reports": s.reports,
            "followups": s.followups,
            "evolution_events": s.evolution_events,
            "pipeline_error": s.pipeline_error,
            "finalized": s.finalized,
            "audit": s.audit,
        })
    }

    pub fn diagnosis_view(&self, p: &Principal, s: &Session) -> Result<Value, ApiError> {
        p.require(&[Role::Physician])?;
        self.check_access(p, s)?;
        Ok(json!({
            "diagnosis": s.diagnosis,
            "bars": s.bars,
            "layout": s.layout,
            "pipeline_error": s.pipeline_error,
        }))
    }

    /// Hands the case to the calling physician on first open.
    pub fn open_case(&self, p: &Principal, slot: &mut SessionSlot) -> Result<Value, ApiError> {
        p.require(&[Role::Physician])?;
        self.check_access(p, &slot.session)?;
        let s = &mut slot.session;
        match s.status {
            SessionStatus::Collecting => {
                return Err(ApiError::conflict("history taking is still in progress"))
            }
            SessionStatus::AwaitingPhysician => {
                let now = self.now();
                s.assigned_physician = Some(p.actor.clone());
                s.handover_at = Some(now);
                s.status = SessionStatus::InReview;
                s.audit(now, &p.actor, p.role, "handover");
                let ev = [status_event(s)];
                self.persist(slot, "handover")?;
                self.publish(&slot.session.id, &ev);
            }
            _ => {}
        }
        Ok(Self::physician_view(&slot.session))
    }

    pub fn select(
        &self,
        p: &Principal,
        slot: &mut SessionSlot,
        disease_id: &str,
    ) -> Result<Value, ApiError> {
        self.reviewing(p, &slot.session)?;
        let now = self.now();
        let graph = self.graph_snapshot();
        let text = Self::history_text(&slot.session)?;
        let s = &mut slot.session;
        let record = s
            .diagnosis
            .as_ref()
            .ok_or_else(|| ApiError::conflict("no diagnosis is available"))?;
        let order: Vec<String> = record
            .candidates
            .iter()
            .map(|c| c.disease_id.clone())
            .collect();
        let mut bundle = s
            .bundles
            .get(disease_id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("{disease_id} is not a candidate")))?;
        if !s.ranked.iter().any(|d| d == disease_id) {
            bundle = rank_evidence(&bundle, &graph, &text, &slot.gateway)?;
            s.bundles.insert(disease_id.to_string(), bundle.clone());
            s.ranked.push(disease_id.to_string());
        }
        if !s.reports.contains_key(disease_id) {
            let r = generate_report(&text, &bundle, &graph, &slot.gateway, now)?;
            s.reports.insert(disease_id.to_string(), r);
        }
        let global = s
            .global_layout
            .as_ref()
            .ok_or_else(|| ApiError::conflict("no layout is available"))?;
        let ordered: Vec<EvidenceBundle> = order
            .iter()
            .filter_map(|d| s.bundles.get(d).cloned())
            .collect();
        let layout = focus_layout(&graph, disease_id, global, &ordered)?;
        s.layout = Some(layout.clone());
        s.active_diagnosis = Some(disease_id.to_string());
        s.audit(now, &p.actor, p.role, format!("selected {disease_id}"));
        self.store.write().record_usage(&bundle.included_keys())?;
        let report = s.reports[disease_id].clone();
        let annotations = annotate(&report, &layout, &bundle, &graph);
        self.persist(slot, "select")?;
        Ok(json!({
            "bundle": bundle,
            "layout": layout,
            "report": report,
            "annotations": annotations,
        }))
    }

    pub fn edit_report(
        &self,
        p: &Principal,
        slot: &mut SessionSlot,
        disease_id: &str,
        edit: ReportEdit,
    ) -> Result<ReasoningReport, ApiError> {
        self.reviewing(p, &slot.session)?;
        let now = self.now();
        let s = &mut slot.session;
        let report = s
            .reports
            .get_mut(disease_id)
            .ok_or_else(|| ApiError::not_found(format!("no report for {disease_id}")))?;
        report.apply_edit(edit, &p.actor, now)?;
        let out = report.clone();
        s.audit(now, &p.actor, p.role, format!("edited report {disease_id}"));
        self.persist(slot, "report edit")?;
        Ok(out)
    }

    pub fn expand(
        &self,
        p: &Principal,
        slot: &mut SessionSlot,
        entity_id: &str,
    ) -> Result<Layout, ApiError> {
        self.reviewing(p, &slot.session)?;
        let graph = self.graph_snapshot();
        let s = &mut slot.session;
        let current = s
            .layout
            .as_ref()
            .ok_or_else(|| ApiError::conflict("no layout is available"))?;
        let layout = expand_node(current, entity_id, &graph)?;
        if let Some(b) = s
            .active_diagnosis
            .as_ref()
            .and_then(|d| s.bundles.get_mut(d))
        {
            if graph.contains(entity_id)
                && graph.entity(entity_id)?.kind == casegraph_core::kg::EntityKind::Drug
            {
                let _ = b.expand_drug(&graph, entity_id);
            }
        }
        s.layout = Some(layout.clone());
        self.persist(slot, "expand")?;
        Ok(layout)
    }

    /// Sends a follow-up question to the patient and, on request, reruns
    /// the diagnosis with the answers received so far.
    pub fn continue_review(
        &self,
        p: &Principal,
        slot: &mut SessionSlot,
        question: Option<String>,
        rerun: bool,
    ) -> Result<Value, ApiError> {
        self.reviewing(p, &slot.session)?;
        let now = self.now();
        let mut events = Vec::new();
        if let Some(q) = question.filter(|q| !q.trim().is_empty()) {
            let s = &mut slot.session;
            s.followups.push(FollowUp {
                question: q.clone(),
                asked_by: p.actor.clone(),
                asked_at: now,
                answer: None,
                answered_at: None,
            });
            s.dialogue.messages.push(Message {
                role: Speaker::System,
                text: q.clone(),
                timestamp: now,
            });
            s.audit(now, &p.actor, p.role, "asked follow-up");
            events = chunks(&q);
        }
        if rerun {
            self.diagnose(slot, now)?;
            slot.session.audit(now, &p.actor, p.role, "reran diagnosis");
        }
        self.persist(slot, "continue")?;
        self.publish(&slot.session.id, &events);
        Ok(Self::physician_view(&slot.session))
    }

    pub fn finalize(
        &self,
        p: &Principal,
        slot: &mut SessionSlot,
        disease_id: &str,
        fields: FinalizeFields,
    ) -> Result<Value, ApiError> {
        self.reviewing(p, &slot.session)?;
        let now = self.now();
        let s = &mut slot.session;
        let report = s
            .reports
            .get_mut(disease_id)
            .ok_or_else(|| ApiError::not_found(format!("select {disease_id} before finalizing")))?;
        let text = finalize_report(report, fields, &slot.gateway, &p.actor, now)?;
        s.finalized = Some(Finalized {
            disease_id: disease_id.to_string(),
            by: p.actor.clone(),
            at: now,
            patient_text: text.clone(),
        });
        s.status = SessionStatus::Completed;
        s.audit(now, &p.actor, p.role, format!("finalized {disease_id}"));
        let events = [
            ServerEvent::new("final_explanation", json!({ "text": text })),
            status_event(s),
        ];
        self.persist(slot, "finalize")?;
        self.publish(&slot.session.id, &events);
        Ok(json!({ "disease_id": disease_id, "patient_text": text, "finalized_at": now }))
    }

    // ---- expert ----

    fn save_worklist(&self, wl: &Worklist) -> Result<(), ApiError> {
        wl.save(&self.worklist_path).map_err(ApiError::from)
    }

    pub fn worklist(&self, p: &Principal) -> Result<Value, ApiError> {
        p.require(&[Role::Expert])?;
        let wl = self.worklist.lock();
        Ok(Value::Array(
            wl.events()
                .map(|e| {
                    json!({
                        "id": e.id,
                        "version": e.version,
                        "disease_name": e.disease_name,
                        "disease_id": e.disease_id,
                        "trigger": e.trigger,
                        "status": e.status,
                        "updated_at": e.updated_at,
                    })
                })
                .collect(),
        ))
    }

    pub fn event(&self, p: &Principal, id: u64) -> Result<Value, ApiError> {
        p.require(&[Role::Expert])?;
        Ok(json!(self.worklist.lock().get(id)?))
    }

    pub fn event_diff(&self, p: &Principal, id: u64) -> Result<Value, ApiError> {
        p.require(&[Role::Expert])?;
        Ok(json!(self.worklist.lock().get(id)?.diff_view()))
    }

    pub fn draft_event(&self, p: &Principal, id: u64) -> Result<Value, ApiError> {
        p.require(&[Role::Expert])?;
        let graph = self.graph_snapshot();
        let mut wl = self.worklist.lock();
        let res = wl
            .draft(id, &graph, &self.gateway, self.now())
            .map(|e| json!(e));
        self.save_worklist(&wl)?;
        Ok(res?)
    }

    pub fn edit_event(
        &self,
        p: &Principal,
        id: u64,
        expected: Option<u64>,
        payload: EditPayload,
    ) -> Result<Value, ApiError> {
        p.require(&[Role::Expert])?;
        let graph = self.graph_snapshot();
        let mut wl = self.worklist.lock();
        let action = EditAction::new(payload, &p.actor, self.now());
        let e = json!(wl.edit(id, expected, action, &graph)?);
        self.save_worklist(&wl)?;
        Ok(e)
    }

    pub fn approve_event(
        &self,
        p: &Principal,
        id: u64,
        expected: Option<u64>,
    ) -> Result<Value, ApiError> {
        p.require(&[Role::Expert])?;
        let mut wl = self.worklist.lock();
        let diff = {
            let mut store = self.store.write();
            wl.approve(
                id,
                expected,
                &mut *store,
                &self.embedder,
                &self.config.app.evolution(),
                &p.actor,
                self.now(),
            )?
        };
        self.save_worklist(&wl)?;
        Ok(json!({ "diff": diff, "event": wl.get(id)? }))
    }

    pub fn reject_event(
        &self,
        p: &Principal,
        id: u64,
        expected: Option<u64>,
        reason: &str,
    ) -> Result<Value, ApiError> {
        p.require(&[Role::Expert])?;
        let mut wl = self.worklist.lock();
        let e = json!(wl.reject(id, expected, &p.actor, reason, self.now())?);
        self.save_worklist(&wl)?;
        Ok(e)
    }

    /// Entity with the provenance of every triple touching it.
    pub fn entity(&self, p: &Principal, id: &str) -> Result<Value, ApiError> {
        p.require(&[Role::Physician, Role::Expert])?;
        let store = self.store.read();
        let g = store.graph();
        let e = g.entity(id)?;
        let triples: Vec<_> = g.triples().filter(|t| t.touches(id)).collect();
        Ok(json!({
            "entity": e,
            "last_evolution": g.last_evolution(id),
            "triples": triples,
        }))
    }
}

/// Graph entities named in report text, restricted to what the panel and
/// the bundle can show.
fn annotate(
    report: &ReasoningReport,
    layout: &Layout,
    bundle: &EvidenceBundle,
    graph: &KnowledgeGraph,
) -> Vec<Value> {
    let mut ids: BTreeSet<&str> = layout.nodes.iter().map(|n| n.id.as_str()).collect();
    for k in bundle.included_keys() {
        if let Some(t) = graph.triple(&k) {
            ids.insert(&t.subject);
            ids.insert(&t.object);
        }
    }
    let names: Vec<(&str, String)> = ids
        .into_iter()
        .filter_map(|id| graph.entity(id).ok())
        .map(|e| (e.id.as_str(), e.name.to_lowercase()))
        .filter(|(_, n)| !n.is_empty())
        .collect();
    let mut out = Vec::new();
    let sections = [
        ("step", &report.steps),
        ("treatment", &report.treatment_items),
    ];
    for (section, items) in sections {
        for (i, text) in items.iter().enumerate() {
            let lower = text.to_lowercase();
            for (id, name) in &names {
                if let Some(pos) = lower.find(name.as_str()) {
                    out.push(json!({
                        "entity_id": id,
                        "section": section,
                        "index": i,
                        "start": pos,
                        "end": pos + name.len(),
                    }));
                }
            }
        }
    }
    out
}
