use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use casegraph_core::evidence::{FinalizeFields, ReportEdit};
use casegraph_core::evolution::EditPayload;
use casegraph_core::gateway::ScriptEntry;
use futures::stream::{self, Stream, StreamExt};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::broadcast;

use crate::auth::{Principal, Role};
use crate::error::ApiError;
use crate::service::{ServerEvent, Service, SessionSlot};

type Svc = State<Arc<Service>>;
type ApiResult<T = Json<Value>> = Result<T, ApiError>;

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(session_summary))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/history", get(history))
        .route("/sessions/{id}/explanation", get(explanation))
        .route("/sessions/{id}/diagnosis", get(diagnosis))
        .route("/sessions/{id}/open", post(open_case))
        .route("/sessions/{id}/select", post(select))
        .route("/sessions/{id}/reports/{disease}/edits", post(edit_report))
        .route("/sessions/{id}/expand", post(expand))
        .route("/sessions/{id}/continue", post(continue_review))
        .route("/sessions/{id}/finalize", post(finalize))
        .route("/expert/worklist", get(worklist))
        .route("/expert/events/{id}", get(event))
        .route("/expert/events/{id}/draft", post(draft))
        .route("/expert/events/{id}/edits", post(edit_event))
        .route("/expert/events/{id}/approve", post(approve))
        .route("/expert/events/{id}/reject", post(reject))
        .route("/expert/events/{id}/diff", get(diff))
        .route("/kg/entities/{id}", get(entity))
        .with_state(svc)
}

fn sse_event(e: &ServerEvent) -> Event {
    Event::default()
        .event(&e.event)
        .json_data(&e.data)
        .expect("event payload serializes")
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

/// Runs `f` on a blocking thread while holding the session lock.
async fn with_slot<T: Send + 'static>(
    svc: Arc<Service>,
    id: &str,
    f: impl FnOnce(&Service, &mut SessionSlot) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let slot = svc.slot(id)?;
    let mut guard = slot.lock_owned().await;
    blocking(move || f(&svc, &mut guard)).await
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct CreateBody {
    script: Option<Vec<ScriptEntry>>,
}

async fn create_session(
    State(svc): Svc,
    p: Principal,
    body: Option<Json<CreateBody>>,
) -> ApiResult {
    let script = body.and_then(|b| b.0.script);
    blocking(move || svc.create_session(&p, script))
        .await
        .map(Json)
}

async fn list_sessions(State(svc): Svc, p: Principal) -> ApiResult {
    svc.list_sessions(&p).map(Json)
}

async fn session_summary(State(svc): Svc, p: Principal, Path(id): Path<String>) -> ApiResult {
    with_slot(svc, &id, move |svc, slot| {
        svc.patient_summary(&p, &slot.session)
    })
    .await
    .map(Json)
}

#[derive(Debug, Deserialize)]
struct MessageBody {
    text: String,
}

async fn post_message(
    State(svc): Svc,
    p: Principal,
    Path(id): Path<String>,
    Json(body): Json<MessageBody>,
) -> ApiResult<impl IntoResponse> {
    let slot = svc.slot(&id)?;
    let guard = slot.lock_owned().await;
    let worker = svc.clone();
    let (guard, outcome) = tokio::task::spawn_blocking(move || {
        let mut guard = guard;
        let r = worker.post_message(&p, &mut guard, &body.text);
        (guard, r)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?;
    let outcome = outcome?;
    if outcome.run_pipeline {
        let worker = svc.clone();
        tokio::task::spawn_blocking(move || {
            let mut guard = guard;
            worker.run_pipeline(&mut guard);
        });
    }
    let events: Vec<Result<Event, Infallible>> =
        outcome.events.iter().map(|e| Ok(sse_event(e))).collect();
    Ok(Sse::new(stream::iter(events)))
}

fn subscription(
    rx: broadcast::Receiver<ServerEvent>,
) -> impl Stream<Item = Result<Event, Infallible>> {
    stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(e) => return Some((Ok(sse_event(&e)), rx)),
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    log::warn!("event subscriber lagged by {n}");
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    })
}

async fn events(
    State(svc): Svc,
    p: Principal,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    p.require(&[Role::Patient, Role::Physician])?;
    let rx = svc.subscribe(&id)?;
    with_slot(svc, &id, move |svc, slot| {
        svc.check_access(&p, &slot.session)
    })
    .await?;
    Ok(Sse::new(subscription(rx).boxed()).keep_alive(KeepAlive::default()))
}

async fn history(State(svc): Svc, p: Principal, Path(id): Path<String>) -> ApiResult {
    with_slot(svc, &id, move |svc, slot| {
        svc.history_view(&p, &slot.session)
    })
    .await
    .map(Json)
}

async fn explanation(State(svc): Svc, p: Principal, Path(id): Path<String>) -> ApiResult {
    with_slot(svc, &id, move |svc, slot| {
        svc.explanation(&p, &slot.session)
    })
    .await
    .map(Json)
}

async fn diagnosis(State(svc): Svc, p: Principal, Path(id): Path<String>) -> ApiResult {
    p.require(&[Role::Physician])?;
    with_slot(svc, &id, move |svc, slot| {
        svc.diagnosis_view(&p, &slot.session)
    })
    .await
    .map(Json)
}

async fn open_case(State(svc): Svc, p: Principal, Path(id): Path<String>) -> ApiResult {
    p.require(&[Role::Physician])?;
    with_slot(svc, &id, move |svc, slot| svc.open_case(&p, slot))
        .await
        .map(Json)
}

#[derive(Debug, Deserialize)]
struct SelectBody {
    disease_id: String,
}

async fn select(
    State(svc): Svc,
    p: Principal,
    Path(id): Path<String>,
    Json(body): Json<SelectBody>,
) -> ApiResult {
    p.require(&[Role::Physician])?;
    with_slot(svc, &id, move |svc, slot| {
        svc.select(&p, slot, &body.disease_id)
    })
    .await
    .map(Json)
}

async fn edit_report(
    State(svc): Svc,
    p: Principal,
    Path((id, disease)): Path<(String, String)>,
    Json(edit): Json<ReportEdit>,
) -> ApiResult {
    p.require(&[Role::Physician])?;
    with_slot(svc, &id, move |svc, slot| {
        svc.edit_report(&p, slot, &disease, edit).map(|r| json!(r))
    })
    .await
    .map(Json)
}

#[derive(Debug, Deserialize)]
struct ExpandBody {
    entity_id: String,
}

async fn expand(
    State(svc): Svc,
    p: Principal,
    Path(id): Path<String>,
    Json(body): Json<ExpandBody>,
) -> ApiResult {
    p.require(&[Role::Physician])?;
    with_slot(svc, &id, move |svc, slot| {
        svc.expand(&p, slot, &body.entity_id).map(|l| json!(l))
    })
    .await
    .map(Json)
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct ContinueBody {
    question: Option<String>,
    rerun: bool,
}

async fn continue_review(
    State(svc): Svc,
    p: Principal,
    Path(id): Path<String>,
    Json(body): Json<ContinueBody>,
) -> ApiResult {
    p.require(&[Role::Physician])?;
    with_slot(svc, &id, move |svc, slot| {
        svc.continue_review(&p, slot, body.question, body.rerun)
    })
    .await
    .map(Json)
}

#[derive(Debug, Deserialize)]
struct FinalizeBody {
    disease_id: String,
    fields: FinalizeFields,
}

async fn finalize(
    State(svc): Svc,
    p: Principal,
    Path(id): Path<String>,
    Json(body): Json<FinalizeBody>,
) -> ApiResult {
    p.require(&[Role::Physician])?;
    with_slot(svc, &id, move |svc, slot| {
        svc.finalize(&p, slot, &body.disease_id, body.fields)
    })
    .await
    .map(Json)
}

async fn worklist(State(svc): Svc, p: Principal) -> ApiResult {
    svc.worklist(&p).map(Json)
}

async fn event(State(svc): Svc, p: Principal, Path(id): Path<u64>) -> ApiResult {
    svc.event(&p, id).map(Json)
}

async fn diff(State(svc): Svc, p: Principal, Path(id): Path<u64>) -> ApiResult {
    svc.event_diff(&p, id).map(Json)
}

async fn draft(State(svc): Svc, p: Principal, Path(id): Path<u64>) -> ApiResult {
    blocking(move || svc.draft_event(&p, id)).await.map(Json)
}

#[derive(Debug, Deserialize)]
struct EditEventBody {
    expected_version: Option<u64>,
    payload: EditPayload,
}

async fn edit_event(
    State(svc): Svc,
    p: Principal,
    Path(id): Path<u64>,
    Json(body): Json<EditEventBody>,
) -> ApiResult {
    blocking(move || svc.edit_event(&p, id, body.expected_version, body.payload))
        .await
        .map(Json)
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct VersionBody {
    expected_version: Option<u64>,
    reason: String,
}

async fn approve(
    State(svc): Svc,
    p: Principal,
    Path(id): Path<u64>,
    body: Option<Json<VersionBody>>,
) -> ApiResult {
    let expected = body.and_then(|b| b.0.expected_version);
    blocking(move || svc.approve_event(&p, id, expected))
        .await
        .map(Json)
}

async fn reject(
    State(svc): Svc,
    p: Principal,
    Path(id): Path<u64>,
    Json(body): Json<VersionBody>,
) -> ApiResult {
    blocking(move || svc.reject_event(&p, id, body.expected_version, &body.reason))
        .await
        .map(Json)
}

async fn entity(State(svc): Svc, p: Principal, Path(id): Path<String>) -> ApiResult {
    svc.entity(&p, &id).map(Json)
}
