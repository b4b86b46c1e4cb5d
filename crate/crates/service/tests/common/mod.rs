#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use casegraph_core::gateway::{ScriptEntry, TemplateId};
use casegraph_core::scenario::ScenarioPack;
use casegraph_service::{router, Role, Service, ServiceConfig, TokenGrant};
use chrono::{DateTime, Duration, TimeZone, Utc};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub const PATIENT: &str = "tok-patient";
pub const OTHER_PATIENT: &str = "tok-patient-2";
pub const DOCTOR: &str = "tok-doctor";
pub const OTHER_DOCTOR: &str = "tok-doctor-2";
pub const EXPERT: &str = "tok-expert";

pub fn core_fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

pub fn pack(name: &str) -> ScenarioPack {
    ScenarioPack::load(&core_fixtures().join("packs").join(format!("{name}.json"))).unwrap()
}

/// The pack's dialogue and diagnosis script plus responses for the review
/// steps: evidence ranking, reasoning and the patient rewrite.
pub fn review_script(p: &ScenarioPack) -> Vec<ScriptEntry> {
    let mut s = p.llm_script.clone();
    s.push(ScriptEntry::new(TemplateId::RankEvidence, "S2\nS1\nD1"));
    s.push(ScriptEntry::new(
        TemplateId::Reason,
        "Reasoning:\n1. Throbbing headache with nausea fits migraine.\n2. Visual aura before the pain supports migraine with aura.\nTreatment:\n1. Sumatriptan at onset\n2. Ibuprofen for milder attacks",
    ));
    s.push(ScriptEntry::new(
        TemplateId::PatientRewrite,
        "Your headaches are migraines. Take the prescribed tablet when one starts and come back in four weeks.",
    ));
    s
}

pub fn config(data: &Path) -> ServiceConfig {
    let mut c = ServiceConfig::default();
    c.app.storage.data_dir = Some(data.to_path_buf());
    c.app.storage.seed_nodes = Some(core_fixtures().join("kg/nodes.jsonl"));
    c.app.storage.seed_edges = Some(core_fixtures().join("kg/edges.jsonl"));
    for (tok, role, actor) in [
        (PATIENT, Role::Patient, "p-001"),
        (OTHER_PATIENT, Role::Patient, "p-002"),
        (DOCTOR, Role::Physician, "dr-lee"),
        (OTHER_DOCTOR, Role::Physician, "dr-kim"),
        (EXPERT, Role::Expert, "dr-okafor"),
    ] {
        c.server.tokens.insert(
            tok.into(),
            TokenGrant {
                role,
                actor: actor.into(),
            },
        );
    }
    c
}

pub fn start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 3, 1, 9, 0, 0).unwrap()
}

/// Each reading is one minute after the previous one.
pub fn ticking_clock() -> casegraph_service::Clock {
    let n = Arc::new(AtomicI64::new(0));
    Arc::new(move || start() + Duration::minutes(n.fetch_add(1, Ordering::SeqCst)))
}

pub fn open(c: ServiceConfig) -> Arc<Service> {
    Arc::new(Service::open(c).unwrap().with_clock(ticking_clock()))
}

pub struct Api {
    pub svc: Arc<Service>,
    pub app: Router,
}

impl Api {
    pub fn new(svc: Arc<Service>) -> Self {
        Self {
            app: router(svc.clone()),
            svc,
        }
    }

    pub async fn raw(
        &self,
        method: Method,
        path: &str,
        token: Option<&str>,
        body: Option<Value>,
    ) -> (StatusCode, String) {
        let mut req = Request::builder().method(method).uri(path);
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        let req = match body {
            Some(b) => req
                .header("content-type", "application/json")
                .body(Body::from(b.to_string())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        let res = self.app.clone().oneshot(req).await.unwrap();
        let status = res.status();
        let bytes = res.into_body().collect().await.unwrap().to_bytes();
        (status, String::from_utf8(bytes.to_vec()).unwrap())
    }

    pub async fn call(
        &self,
        method: Method,
        path: &str,
        token: Option<&str>,
        body: Option<Value>,
    ) -> (StatusCode, Value) {
        let (s, text) = self.raw(method, path, token, body).await;
        (
            s,
            serde_json::from_str(&text).unwrap_or(Value::String(text)),
        )
    }

    pub async fn get(&self, path: &str, token: &str) -> (StatusCode, Value) {
        self.call(Method::GET, path, Some(token), None).await
    }

    pub async fn post(&self, path: &str, token: &str, body: Value) -> (StatusCode, Value) {
        self.call(Method::POST, path, Some(token), Some(body)).await
    }

    /// Posts one patient message and returns the streamed events.
    pub async fn say(
        &self,
        id: &str,
        token: &str,
        text: &str,
    ) -> (StatusCode, Vec<(String, Value)>) {
        let (s, body) = self
            .raw(
                Method::POST,
                &format!("/sessions/{id}/messages"),
                Some(token),
                Some(serde_json::json!({ "text": text })),
            )
            .await;
        (s, parse_sse(&body))
    }

    /// New session for `PATIENT` carrying `script`; returns its id.
    pub async fn create(&self, script: &[ScriptEntry]) -> String {
        let (s, v) = self
            .post(
                "/sessions",
                PATIENT,
                serde_json::json!({ "script": script }),
            )
            .await;
        assert_eq!(s, StatusCode::OK, "{v}");
        v["id"].as_str().unwrap().to_string()
    }

    /// Runs the pack's patient utterances until history taking is done.
    pub async fn interview(&self, id: &str, p: &ScenarioPack) -> Vec<(String, Value)> {
        let mut all = Vec::new();
        for u in &p.patient_script {
            let (s, ev) = self.say(id, PATIENT, u).await;
            assert_eq!(s, StatusCode::OK);
            let done = ev
                .iter()
                .any(|(n, d)| n == "status_change" && d["status"] == "awaiting_physician");
            all.extend(ev);
            if done {
                break;
            }
        }
        all
    }
}

pub fn parse_sse(body: &str) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    for block in body.split("\n\n") {
        let mut name = String::from("message");
        let mut data = String::new();
        for line in block.lines() {
            if let Some(n) = line.strip_prefix("event:") {
                name = n.trim().to_string();
            } else if let Some(d) = line.strip_prefix("data:") {
                data.push_str(d.trim_start());
            }
        }
        if !data.is_empty() {
            out.push((name, serde_json::from_str(&data).unwrap()));
        }
    }
    out
}

/// Every object key anywhere in `v`.
pub fn keys(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                out.push(k.clone());
                keys(x, out);
            }
        }
        Value::Array(a) => a.iter().for_each(|x| keys(x, out)),
        _ => {}
    }
}

/// Keys that would reveal diagnostic reasoning to a patient.
pub const DIAGNOSTIC_KEYS: [&str; 14] = [
    "preliminary_ddx",
    "ddx",
    "disease_name",
    "disease_id",
    "likelihood",
    "relative_likelihood",
    "kg_score",
    "candidates",
    "kg_top",
    "diagnosis",
    "bars",
    "layout",
    "rationale",
    "reports",
];

pub fn assert_patient_safe(v: &Value, context: &str) {
    let mut ks = Vec::new();
    keys(v, &mut ks);
    for k in ks {
        assert!(
            !DIAGNOSTIC_KEYS.contains(&k.as_str()),
            "{context}: patient saw key {k}"
        );
    }
}
