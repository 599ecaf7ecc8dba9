//! HTTP routes. Handlers translate requests into hub commands and reads.

use std::collections::{BTreeMap, VecDeque};
use std::convert::Infallible;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::Deserialize;
use serde_json::{json, Value as Json_};
use sportprov::game::{GameEvent, Roster};
use sportprov::query::QueryFilter;
use sportprov::workflow::{Override, Value, WorkflowDef};
use tokio::sync::broadcast::error::RecvError;
use tokio::sync::broadcast::Receiver;

use crate::error::{ErrorClass, ServiceError};
use crate::hub::{Command, Feed, Message};
use crate::store::Service;

pub type Shared = Arc<RwLock<Service>>;

pub struct ApiError(ServiceError);

impl<E: Into<ServiceError>> From<E> for ApiError {
    fn from(e: E) -> Self {
        ApiError(e.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self.0.class() {
            ErrorClass::Invalid => StatusCode::BAD_REQUEST,
            ErrorClass::NotFound => StatusCode::NOT_FOUND,
            ErrorClass::Conflict => StatusCode::CONFLICT,
            ErrorClass::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(self.0.body())).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn body<T>(r: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    r.map(|Json(v)| v).map_err(|e| ApiError(ServiceError::BadRequest(e.body_text())))
}

fn poisoned() -> ApiError {
    ApiError(ServiceError::Storage("service state lock poisoned".into()))
}

/// Run a command off the async workers; the write lock is held for the
/// whole command so commands apply in arrival order.
async fn command(state: &Shared, cmd: Command) -> ApiResult<Json_> {
    let state = state.clone();
    tokio::task::spawn_blocking(move || {
        let mut svc = state.write().map_err(|_| poisoned())?;
        svc.apply(cmd).map_err(ApiError)
    })
    .await
    .map_err(|e| ApiError(ServiceError::Storage(e.to_string())))?
}

async fn read<T, F>(state: &Shared, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Service) -> Result<T, ServiceError> + Send + 'static,
{
    let state = state.clone();
    tokio::task::spawn_blocking(move || {
        let svc = state.read().map_err(|_| poisoned())?;
        f(&svc).map_err(ApiError)
    })
    .await
    .map_err(|e| ApiError(ServiceError::Storage(e.to_string())))?
}

pub fn router(svc: Service) -> Router {
    router_with(Arc::new(RwLock::new(svc)))
}

pub fn router_with(state: Shared) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(json!({ "ok": true })) }))
        .route("/games", get(list_games))
        .route("/games/{id}", post(create_game))
        .route("/games/{id}/events", post(post_event))
        .route("/games/{id}/flush", post(flush_game))
        .route("/games/{id}/chains", get(chains))
        .route("/query/trace", post(trace))
        .route("/metrics/{workflow}/latest", get(metrics))
        .route("/workflows", get(list_workflows).post(define))
        .route("/workflows/{id}", get(get_workflow).put(edit))
        .route("/workflows/{id}/inputs", post(set_inputs))
        .route("/workflows/{id}/run", post(run))
        .route("/workflows/{id}/recompute", post(recompute))
        .route("/workflows/{id}/overrides", get(list_overrides).post(add_override))
        .route("/workflows/{id}/rollback", post(rollback))
        .route("/workflows/{id}/diff", get(diff))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/manual/{step}", post(manual))
        .route("/export/sprov", get(export_sprov))
        .route("/import/sprov", post(import_sprov))
        .route("/merge/sprov", post(merge_sprov))
        .route("/stream", get(stream_messages))
        .with_state(state)
}

async fn list_games(State(s): State<Shared>) -> ApiResult<Json<Json_>> {
    let ids = read(&s, |svc| Ok(svc.hub().game_ids().map(String::from).collect::<Vec<_>>())).await?;
    Ok(Json(json!({ "games": ids })))
}

#[derive(Deserialize)]
struct GameBody {
    roster: Roster,
}

async fn create_game(
    State(s): State<Shared>,
    Path(game): Path<String>,
    req: Result<Json<GameBody>, JsonRejection>,
) -> ApiResult<Json<Json_>> {
    let b = body(req)?;
    Ok(Json(command(&s, Command::Game { game, roster: b.roster }).await?))
}

async fn post_event(
    State(s): State<Shared>,
    Path(game): Path<String>,
    req: Result<Json<GameEvent>, JsonRejection>,
) -> ApiResult<Json<Json_>> {
    let event = body(req)?;
    Ok(Json(command(&s, Command::Event { game, event }).await?))
}

async fn flush_game(State(s): State<Shared>, Path(game): Path<String>) -> ApiResult<Json<Json_>> {
    Ok(Json(command(&s, Command::Flush { game }).await?))
}

async fn chains(State(s): State<Shared>, Path(game): Path<String>) -> ApiResult<Json<Json_>> {
    let v = read(&s, move |svc| svc.hub().chains(&game)).await?;
    Ok(Json(serde_json::to_value(v).expect("serializable")))
}

#[derive(Deserialize)]
struct TraceBody {
    target: String,
    #[serde(default)]
    filter: QueryFilter,
}

async fn trace(State(s): State<Shared>, req: Result<Json<TraceBody>, JsonRejection>) -> ApiResult<Json<Json_>> {
    let b = body(req)?;
    let v = read(&s, move |svc| svc.hub().trace(&b.target, &b.filter)).await?;
    Ok(Json(serde_json::to_value(v).expect("serializable")))
}

async fn metrics(State(s): State<Shared>, Path(wf): Path<String>) -> ApiResult<Json<Json_>> {
    let v = read(&s, move |svc| svc.hub().metrics(&wf)).await?;
    Ok(Json(serde_json::to_value(v).expect("serializable")))
}

async fn list_workflows(State(s): State<Shared>) -> ApiResult<Json<Json_>> {
    let v = read(&s, |svc| {
        let engine = svc.hub().engine();
        let mut out = Vec::new();
        for wf in engine.workflow_ids() {
            out.push(json!({
                "workflow": wf,
                "version": engine.definition(wf)?.version,
                "dirty": engine.is_dirty(wf)?,
                "feed": svc.hub().feed(wf),
            }));
        }
        Ok(out)
    })
    .await?;
    Ok(Json(json!({ "workflows": v })))
}

#[derive(Deserialize)]
struct DefineBody {
    definition: WorkflowDef,
    #[serde(default)]
    inputs: BTreeMap<String, Value>,
    #[serde(default)]
    feed: Option<Feed>,
}

async fn define(State(s): State<Shared>, req: Result<Json<DefineBody>, JsonRejection>) -> ApiResult<(StatusCode, Json<Json_>)> {
    let b = body(req)?;
    let v = command(&s, Command::Define { definition: b.definition, inputs: b.inputs, feed: b.feed }).await?;
    Ok((StatusCode::CREATED, Json(v)))
}

async fn get_workflow(State(s): State<Shared>, Path(wf): Path<String>) -> ApiResult<Json<Json_>> {
    let v = read(&s, move |svc| {
        let engine = svc.hub().engine();
        Ok(json!({
            "definition": engine.definition(&wf)?,
            "versions": engine.versions(&wf)?,
            "dirty": engine.is_dirty(&wf)?,
            "latest_run": engine.latest_run(&wf)?.map(|r| r.run_id.clone()),
        }))
    })
    .await?;
    Ok(Json(v))
}

#[derive(Deserialize)]
struct EditBody {
    definition: WorkflowDef,
}

async fn edit(State(s): State<Shared>, Path(workflow): Path<String>, req: Result<Json<EditBody>, JsonRejection>) -> ApiResult<Json<Json_>> {
    let b = body(req)?;
    Ok(Json(command(&s, Command::Edit { workflow, definition: b.definition }).await?))
}

#[derive(Deserialize, Default)]
struct InputsBody {
    #[serde(default)]
    inputs: BTreeMap<String, Value>,
}

async fn set_inputs(
    State(s): State<Shared>,
    Path(workflow): Path<String>,
    req: Result<Json<InputsBody>, JsonRejection>,
) -> ApiResult<Json<Json_>> {
    let b = body(req)?;
    Ok(Json(command(&s, Command::Inputs { workflow, inputs: b.inputs }).await?))
}

/// `POST /workflows/{id}/run` takes an optional body.
async fn run(State(s): State<Shared>, Path(workflow): Path<String>, raw: String) -> ApiResult<Json<Json_>> {
    let b: InputsBody = if raw.trim().is_empty() {
        InputsBody::default()
    } else {
        serde_json::from_str(&raw).map_err(|e| ApiError(ServiceError::BadRequest(e.to_string())))?
    };
    Ok(Json(command(&s, Command::Run { workflow, inputs: b.inputs }).await?))
}

async fn recompute(State(s): State<Shared>, Path(workflow): Path<String>) -> ApiResult<Json<Json_>> {
    Ok(Json(command(&s, Command::Recompute { workflow }).await?))
}

async fn list_overrides(State(s): State<Shared>, Path(wf): Path<String>) -> ApiResult<Json<Json_>> {
    let v = read(&s, move |svc| Ok(svc.hub().engine().active_overrides(&wf)?)).await?;
    Ok(Json(json!({ "overrides": v })))
}

async fn add_override(
    State(s): State<Shared>,
    Path(workflow): Path<String>,
    req: Result<Json<Override>, JsonRejection>,
) -> ApiResult<Json<Json_>> {
    let ov = body(req)?;
    Ok(Json(command(&s, Command::Override { workflow, ov }).await?))
}

#[derive(Deserialize)]
struct RollbackBody {
    version: u32,
}

async fn rollback(
    State(s): State<Shared>,
    Path(workflow): Path<String>,
    req: Result<Json<RollbackBody>, JsonRejection>,
) -> ApiResult<Json<Json_>> {
    let b = body(req)?;
    Ok(Json(command(&s, Command::Rollback { workflow, version: b.version }).await?))
}

#[derive(Deserialize)]
struct DiffQuery {
    from: u32,
    to: u32,
}

async fn diff(State(s): State<Shared>, Path(wf): Path<String>, q: Result<Query<DiffQuery>, axum::extract::rejection::QueryRejection>) -> ApiResult<Json<Json_>> {
    let Query(q) = q.map_err(|e| ApiError(ServiceError::BadRequest(e.body_text())))?;
    let v = read(&s, move |svc| Ok(svc.hub().engine().diff(&wf, q.from, q.to)?)).await?;
    Ok(Json(serde_json::to_value(v).expect("serializable")))
}

async fn get_run(State(s): State<Shared>, Path(run): Path<String>) -> ApiResult<Json<Json_>> {
    let v = read(&s, move |svc| Ok(svc.hub().engine().report(&run)?.clone())).await?;
    Ok(Json(serde_json::to_value(v).expect("serializable")))
}

#[derive(Deserialize)]
struct ManualBody {
    outputs: BTreeMap<String, Value>,
    author: String,
}

async fn manual(
    State(s): State<Shared>,
    Path((run, step)): Path<(String, String)>,
    req: Result<Json<ManualBody>, JsonRejection>,
) -> ApiResult<Json<Json_>> {
    let b = body(req)?;
    Ok(Json(command(&s, Command::Manual { run, step, outputs: b.outputs, author: b.author }).await?))
}

#[derive(Deserialize)]
struct ExportQuery {
    #[serde(default)]
    boundary: Option<String>,
}

async fn export_sprov(State(s): State<Shared>, Query(q): Query<ExportQuery>) -> ApiResult<Response> {
    let boundary: Vec<String> = q
        .boundary
        .iter()
        .flat_map(|b| b.split(','))
        .map(str::trim)
        .filter(|b| !b.is_empty())
        .map(String::from)
        .collect();
    let text = read(&s, move |svc| svc.hub().export_sprov(&boundary)).await?;
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], text).into_response())
}

async fn import_sprov(State(s): State<Shared>, text: String) -> ApiResult<Json<Json_>> {
    Ok(Json(command(&s, Command::Import { text }).await?))
}

async fn merge_sprov(State(s): State<Shared>, text: String) -> ApiResult<Json<Json_>> {
    Ok(Json(command(&s, Command::Merge { text }).await?))
}

#[derive(Deserialize)]
struct StreamQuery {
    #[serde(default)]
    since: Option<u64>,
}

struct Cursor {
    state: Shared,
    rx: Receiver<Message>,
    queue: VecDeque<Message>,
    last: u64,
}

fn sse_event(m: &Message) -> Event {
    Event::default()
        .id(m.seq.to_string())
        .event(m.kind.name())
        .data(serde_json::to_string(m).expect("messages serialize"))
}

/// Server-sent events. Messages retained by the hub after `since` (or the
/// `Last-Event-ID` header) are sent first, then live ones; sequence numbers
/// never go backwards on one connection.
async fn stream_messages(
    State(s): State<Shared>,
    headers: HeaderMap,
    Query(q): Query<StreamQuery>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let since = q
        .since
        .or_else(|| headers.get("last-event-id").and_then(|v| v.to_str().ok()).and_then(|v| v.parse().ok()));
    let (rx, backlog) = {
        let svc = s.read().map_err(|_| poisoned())?;
        let hub = svc.hub();
        // subscribe before reading the backlog so nothing falls in between
        let rx = hub.subscribe();
        let backlog = match since {
            Some(seq) => hub.history_since(seq),
            None => Vec::new(),
        };
        let last = since.unwrap_or(hub.last_seq());
        (rx, (backlog, last))
    };
    let cursor = Cursor { state: s.clone(), rx, queue: backlog.0.into(), last: backlog.1 };
    let events = stream::unfold(cursor, |mut c| async move {
        loop {
            if let Some(m) = c.queue.pop_front() {
                if m.seq <= c.last {
                    continue;
                }
                c.last = m.seq;
                return Some((Ok(sse_event(&m)), c));
            }
            match c.rx.recv().await {
                Ok(m) => c.queue.push_back(m),
                Err(RecvError::Lagged(_)) => {
                    let svc = c.state.read().ok()?;
                    c.queue.extend(svc.hub().history_since(c.last));
                }
                Err(RecvError::Closed) => return None,
            }
        }
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}
