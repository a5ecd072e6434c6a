//! HTTP control API and event stream for agent tasks.
//!
//! | method | path | body |
//! |---|---|---|
//! | POST | `/tasks` | [`CreateTask`] |
//! | GET | `/tasks/{id}` | |
//! | POST | `/tasks/{id}/answers` | `{"answers": [..]}` |
//! | POST | `/tasks/{id}/pause` `resume` `abort` `takeover` `release` | |
//! | GET | `/tasks/{id}/transcript` | |
//! | GET | `/tasks/{id}/events?since=N` | server-sent events, or a WebSocket on upgrade |
//!
//! Every stream event is `{"seq", "type", "payload"}`. Streams end after
//! `task_complete`.

use std::collections::HashMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::task::JoinHandle;
use tokio_stream::wrappers::BroadcastStream;
use tracing::{info, warn};

use webpilot_core::gateway::{HttpModel, LanguageModel, OracleScript, ScriptedOracle};
use webpilot_core::orchestrator::{
    Agent, AgentConfig, ControlCommand, EventType, OrchestratorError, StreamEvent, TaskHandle, TaskRunner,
    TaskSpec,
};
use webpilot_core::session::{BrowserSession, FixtureSession, FixtureWorld, LiveSession};

pub const DEFAULT_PORT: u16 = 8787;
/// Browser debugging WebSocket used by live tasks that do not name one.
pub const ENV_BROWSER_WS: &str = "AGENT_BROWSER_WS";

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub agent: AgentConfig,
    /// Where task transcripts are written, one `<task_id>.jsonl` each.
    pub transcripts_dir: PathBuf,
    /// Relative world/oracle paths in requests resolve against this.
    pub base_dir: PathBuf,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            agent: AgentConfig::default(),
            transcripts_dir: std::env::temp_dir().join("webpilot-transcripts"),
            base_dir: PathBuf::from("."),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Fixture,
    Live,
}

/// A JSON document given inline or as a path on the server.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Source {
    Path(String),
    Inline(Value),
}

#[derive(Debug, Clone, Deserialize)]
pub struct CreateTask {
    pub goal: String,
    /// Start page; fixture tasks default to the world's start page.
    #[serde(default)]
    pub start: Option<String>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub world: Option<Source>,
    /// Scripted responses; without one the model comes from `endpoint`.
    #[serde(default)]
    pub oracle: Option<Source>,
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Debugging WebSocket of the browser, live mode only.
    #[serde(default)]
    pub browser: Option<String>,
    /// Create the task Paused so observers can attach first.
    #[serde(default)]
    pub paused: bool,
    #[serde(default)]
    pub step_delay_ms: Option<u64>,
}

#[derive(Debug, Deserialize)]
pub struct Answers {
    pub answers: Vec<String>,
}

#[derive(Debug, Deserialize)]
pub struct Since {
    #[serde(default)]
    pub since: u64,
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("no task {0}")]
    NotFound(String),
    #[error("transcript not available yet")]
    TranscriptPending,
    #[error(transparent)]
    Task(#[from] OrchestratorError),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self {
            ApiError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            ApiError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ApiError::TranscriptPending => (StatusCode::NOT_FOUND, "not_found"),
            ApiError::Task(e) => match e {
                OrchestratorError::IllegalTransition { .. } => (StatusCode::CONFLICT, "illegal_transition"),
                OrchestratorError::WrongStatus { .. } => (StatusCode::CONFLICT, "wrong_status"),
                OrchestratorError::AnswerCountMismatch { .. } => {
                    (StatusCode::UNPROCESSABLE_ENTITY, "answer_count_mismatch")
                }
                OrchestratorError::EmptyGoal | OrchestratorError::UnknownCommand(_) => {
                    (StatusCode::BAD_REQUEST, "bad_request")
                }
                OrchestratorError::TaskGone => (StatusCode::CONFLICT, "task_finished"),
                _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
            },
        };
        (status, Json(json!({"error": kind, "message": self.to_string()}))).into_response()
    }
}

struct TaskEntry {
    handle: TaskHandle,
    transcript_path: PathBuf,
    _join: JoinHandle<()>,
}

#[derive(Clone)]
pub struct AppState {
    config: Arc<ServerConfig>,
    tasks: Arc<RwLock<HashMap<String, Arc<TaskEntry>>>>,
}

impl AppState {
    pub fn new(config: ServerConfig) -> Self {
        Self { config: Arc::new(config), tasks: Arc::default() }
    }

    fn task(&self, id: &str) -> Result<Arc<TaskEntry>, ApiError> {
        self.tasks
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(id.to_string()))
    }

    fn resolve(&self, path: &str) -> PathBuf {
        let p = FsPath::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.config.base_dir.join(p)
        }
    }

    fn load_json(&self, source: &Source, what: &str) -> Result<Value, ApiError> {
        match source {
            Source::Inline(v) => Ok(v.clone()),
            Source::Path(p) => {
                let text = std::fs::read_to_string(self.resolve(p))
                    .map_err(|e| ApiError::BadRequest(format!("reading {what} {p}: {e}")))?;
                serde_json::from_str(&text).map_err(|e| ApiError::BadRequest(format!("{what} {p}: {e}")))
            }
        }
    }

    fn model(&self, req: &CreateTask) -> Result<Arc<dyn LanguageModel>, ApiError> {
        if let Some(source) = &req.oracle {
            let value = self.load_json(source, "oracle")?;
            let script = OracleScript::from_json(&value.to_string())
                .map_err(|e| ApiError::BadRequest(format!("oracle: {e}")))?;
            return Ok(Arc::new(ScriptedOracle::new(script)));
        }
        if let Some(endpoint) = &req.endpoint {
            return Ok(Arc::new(HttpModel::with_env_credentials(endpoint)));
        }
        HttpModel::from_env()
            .map(|m| Arc::new(m) as Arc<dyn LanguageModel>)
            .map_err(|_| ApiError::BadRequest("give an oracle or an endpoint".into()))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/tasks", post(create_task))
        .route("/tasks/{id}", get(get_task))
        .route("/tasks/{id}/answers", post(post_answers))
        .route("/tasks/{id}/transcript", get(get_transcript))
        .route("/tasks/{id}/events", get(events))
        .route("/tasks/{id}/{command}", post(post_control))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Loopback address on `port`.
pub fn loopback(port: u16) -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], port))
}

async fn create_task(
    State(app): State<AppState>,
    body: Result<Json<CreateTask>, JsonRejection>,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    let Json(req) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let mut config = app.config.agent.clone();
    if let Some(delay) = req.step_delay_ms {
        config.step_delay_ms = delay;
    }
    let model = app.model(&req)?;

    let (session, start): (Box<dyn BrowserSession>, String) = match req.mode {
        Mode::Fixture => {
            let source = req.world.as_ref().ok_or_else(|| ApiError::BadRequest("fixture mode needs a world".into()))?;
            let world: FixtureWorld = serde_json::from_value(app.load_json(source, "world")?)
                .map_err(|e| ApiError::BadRequest(format!("world: {e}")))?;
            world.validate().map_err(|e| ApiError::BadRequest(e.to_string()))?;
            let start = req
                .start
                .clone()
                .or_else(|| world.start_page().map(str::to_string))
                .ok_or_else(|| ApiError::BadRequest("no start page".into()))?;
            (Box::new(FixtureSession::with_config(world, config.harvest.clone())), start)
        }
        Mode::Live => {
            let ws = req
                .browser
                .clone()
                .or_else(|| std::env::var(ENV_BROWSER_WS).ok())
                .ok_or_else(|| ApiError::BadRequest(format!("live mode needs browser or {ENV_BROWSER_WS}")))?;
            let start = req.start.clone().ok_or_else(|| ApiError::BadRequest("live mode needs start".into()))?;
            let session = LiveSession::connect(&ws)
                .await
                .map_err(|e| ApiError::BadRequest(format!("browser: {e}")))?
                .with_harvest_config(config.harvest.clone());
            (Box::new(session), start)
        }
    };

    let task_id = uuid::Uuid::new_v4().simple().to_string();
    std::fs::create_dir_all(&app.config.transcripts_dir)
        .map_err(|e| ApiError::Task(OrchestratorError::Io(e)))?;
    let transcript_path = app.config.transcripts_dir.join(format!("{task_id}.jsonl"));
    let mut spec = TaskSpec::new(task_id.clone(), req.goal.clone(), start);
    spec.transcript_path = Some(transcript_path.clone());
    spec.start_paused = req.paused;
    let (runner, handle) = TaskRunner::new(spec, Agent::new(config))?;

    let id = task_id.clone();
    let join = tokio::spawn(async move {
        let mut session = session;
        match runner.run(session.as_mut(), model.as_ref()).await {
            Ok(t) => info!(task = %id, status = ?t.final_status(), "task finished"),
            Err(e) => warn!(task = %id, "task runner error: {e}"),
        }
    });
    app.tasks.write().unwrap().insert(
        task_id.clone(),
        Arc::new(TaskEntry { handle, transcript_path, _join: join }),
    );
    Ok((StatusCode::CREATED, Json(json!({"task_id": task_id}))))
}

async fn get_task(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let task = app.task(&id)?;
    let state = task.handle.state();
    let mut view = serde_json::to_value(&state).expect("state serializes");
    view["last_seq"] = json!(task.handle.events().last_seq());
    Ok(Json(view))
}

async fn post_answers(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<Answers>, JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let Json(body) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let task = app.task(&id)?;
    let state = task.handle.answer(body.answers).await?;
    Ok(Json(serde_json::to_value(state).expect("state serializes")))
}

async fn post_control(
    State(app): State<AppState>,
    Path((id, command)): Path<(String, String)>,
) -> Result<Json<Value>, ApiError> {
    let task = app.task(&id)?;
    let command: ControlCommand = command.parse().map_err(|_| ApiError::NotFound(format!("{id}/{command}")))?;
    let state = task.handle.control(command).await?;
    Ok(Json(serde_json::to_value(state).expect("state serializes")))
}

async fn get_transcript(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let task = app.task(&id)?;
    let text = tokio::fs::read_to_string(&task.transcript_path).await.map_err(|_| ApiError::TranscriptPending)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}

/// Backlog after `since`, then live events, ending after `task_complete`.
fn event_stream(handle: &TaskHandle, since: u64) -> impl Stream<Item = StreamEvent> + Send + 'static {
    let (past, rx) = handle.events().subscribe_since(since);
    let last_past = past.last().map(|e| e.seq).unwrap_or(since);
    let live = BroadcastStream::new(rx).filter_map(move |r| async move {
        // a lagged receiver skips ahead; the seq gap tells the client
        r.ok().filter(|e| e.seq > last_past)
    });
    let inner = Box::pin(futures::stream::iter(past).chain(live));
    futures::stream::unfold((inner, false), |(mut inner, done)| async move {
        if done {
            return None;
        }
        let event = inner.next().await?;
        let done = event.kind == EventType::TaskComplete;
        Some((event, (inner, done)))
    })
}

async fn events(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(since): Query<Since>,
    ws: Result<WebSocketUpgrade, axum::extract::ws::rejection::WebSocketUpgradeRejection>,
) -> Result<Response, ApiError> {
    let task = app.task(&id)?;
    let stream = event_stream(&task.handle, since.since);
    if let Ok(ws) = ws {
        return Ok(ws.on_upgrade(move |socket| pump_ws(socket, stream)));
    }
    let sse = stream.map(|e| {
        let data = serde_json::to_string(&e).expect("event serializes");
        let kind = serde_json::to_value(e.kind).expect("kind serializes");
        Ok::<_, Infallible>(
            Event::default().id(e.seq.to_string()).event(kind.as_str().unwrap_or("event")).data(data),
        )
    });
    Ok(Sse::new(sse).keep_alive(KeepAlive::default()).into_response())
}

async fn pump_ws(mut socket: WebSocket, stream: impl Stream<Item = StreamEvent> + Send + 'static) {
    let mut stream = Box::pin(stream);
    while let Some(event) = stream.next().await {
        let text = serde_json::to_string(&event).expect("event serializes");
        if socket.send(Message::text(text)).await.is_err() {
            return;
        }
    }
    let _ = socket.send(Message::Close(None)).await;
}
