//! HTTP API over the knowledge base, chaining models and executor.
//!
//! All mutable state sits behind one lock. Handlers work on copies and
//! swap them in at the end, so a rejected request changes nothing.
//! Event subscribers read the session log and wait on a watch channel,
//! never holding the lock across an await.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{self, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::watch;

use skillchain::bim::{load_task_model_with_default_units, serialize_task_payload, BimError, TaskModel, Units};
use skillchain::chaining::{chain_task, ChainError, ChainingBackend};
use skillchain::executor::{self, Event, ExecError, ExecutionSession, Plan, PlanSource, SessionStatus, WorldState};
use skillchain::skill_kb::{canonicalize, check_chain_continuity, SkillId, SkillLibrary, Tool};

/// Acknowledgment `status` for `/send_data` unless configured otherwise.
pub const DEFAULT_ACK: &str = "Data sent to ROS 2";
pub const DEFAULT_MAX_LEN: usize = 32;

pub type SharedBackend = Arc<dyn ChainingBackend>;

pub struct AppState {
    library: Arc<SkillLibrary>,
    models: BTreeMap<String, SharedBackend>,
    ack: String,
    inner: RwLock<Inner>,
    changed: watch::Sender<u64>,
}

#[derive(Clone, Default)]
struct Inner {
    task: Option<Arc<TaskModel>>,
    pending: Option<Pending>,
    session: Option<ExecutionSession>,
    /// Bumped whenever a new session starts.
    generation: u64,
    /// Bumped on every mutation.
    version: u64,
}

#[derive(Clone)]
struct Pending {
    plan: Plan,
    task: Arc<TaskModel>,
}

impl AppState {
    pub fn new(library: SkillLibrary) -> Self {
        let (changed, _) = watch::channel(0);
        AppState {
            library: Arc::new(library),
            models: BTreeMap::new(),
            ack: DEFAULT_ACK.into(),
            inner: RwLock::new(Inner::default()),
            changed,
        }
    }

    pub fn with_model(mut self, name: impl Into<String>, backend: SharedBackend) -> Self {
        self.models.insert(name.into(), backend);
        self
    }

    pub fn with_ack(mut self, ack: impl Into<String>) -> Self {
        self.ack = ack.into();
        self
    }

    /// Preloads a task model as if it had been posted.
    pub fn with_task(self, task: TaskModel) -> Self {
        self.write().task = Some(Arc::new(task));
        self
    }

    pub fn library(&self) -> &SkillLibrary {
        &self.library
    }

    fn read(&self) -> RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write(&self) -> RwLockWriteGuard<'_, Inner> {
        self.inner.write().unwrap_or_else(|p| p.into_inner())
    }

    /// Replaces the state and wakes subscribers.
    fn commit(&self, guard: &mut RwLockWriteGuard<'_, Inner>, mut next: Inner) {
        next.version = guard.version + 1;
        let v = next.version;
        **guard = next;
        self.changed.send_replace(v);
    }

    /// Full state snapshot, as served by `GET /session`.
    pub fn snapshot(&self) -> Value {
        snapshot_of(&self.read())
    }
}

fn snapshot_of(inner: &Inner) -> Value {
    let session = inner.session.as_ref().map(|s| {
        json!({
            "generation": inner.generation,
            "status": s.status(),
            "cursor": s.cursor(),
            "world": s.world(),
            "plan": s.plan(),
            "gate": s.gate_progress().map(|(kind, done, needed)| json!({
                "kind": kind, "confirmations": done, "needed": needed,
            })),
            "last_seq_no": s.events().last().map(|e| e.seq_no),
        })
    });
    let task = inner
        .task
        .as_ref()
        .map(|t| serde_json::from_slice::<Value>(&serialize_task_payload(t)).expect("payload is JSON"));
    json!({
        "task": task,
        "pending_plan": inner.pending.as_ref().map(|p| &p.plan),
        "session": session,
    })
}

fn is_live(s: &ExecutionSession) -> bool {
    matches!(s.status(), SessionStatus::Running | SessionStatus::AwaitingHuman { .. })
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, message: impl Into<String>) -> Self {
        ApiError { status, body: json!({ "error": error, "message": message.into() }) }
    }

    fn with(mut self, key: &str, value: Value) -> Self {
        self.body[key] = value;
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<BimError> for ApiError {
    fn from(e: BimError) -> Self {
        match &e {
            BimError::SchemaViolation { path, .. } => {
                ApiError::new(StatusCode::BAD_REQUEST, "SchemaViolation", e.to_string()).with("path", json!(path))
            }
            BimError::NonPositiveDimension { path } => {
                ApiError::new(StatusCode::BAD_REQUEST, "SchemaViolation", e.to_string()).with("path", json!(path))
            }
            _ => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "BindError", e.to_string()),
        }
    }
}

impl From<ExecError> for ApiError {
    fn from(e: ExecError) -> Self {
        match e {
            ExecError::NotAwaitingHuman => ApiError::new(StatusCode::CONFLICT, "NotAwaitingHuman", e.to_string()),
            ExecError::Bim(b) => b.into(),
            other => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "ExecError", other.to_string()),
        }
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", e.to_string()))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/skills", get(skills))
        .route("/send_data", post(send_data))
        .route("/sequence", post(sequence))
        .route("/chain", post(chain))
        .route("/approve", post(approve))
        .route("/confirm", post(confirm))
        .route("/events", get(events))
        .route("/session", get(session))
        .with_state(state)
}

async fn skills(State(app): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "version": app.library.version(), "skills": app.library.skills() }))
}

async fn session(State(app): State<Arc<AppState>>) -> Json<Value> {
    Json(app.snapshot())
}

async fn send_data(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let text = std::str::from_utf8(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "SchemaViolation", e.to_string()))?;
    let task = load_task_model_with_default_units(text, Units::Inches)?;
    let mut g = app.write();
    let mut next = g.clone();
    next.task = Some(Arc::new(task));
    // a pending plan was bound to the old geometry
    next.pending = None;
    app.commit(&mut g, next);
    Ok(Json(json!({ "status": app.ack })))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SequenceBody {
    Names(Vec<String>),
    Full {
        skills: Vec<String>,
        #[serde(default)]
        object: Option<String>,
        #[serde(default)]
        target: Option<String>,
        #[serde(default)]
        task_label: Option<String>,
    },
}

fn default_object_and_target(task: &TaskModel, object: Option<String>, target: Option<String>) -> Result<(String, Option<String>), ApiError> {
    let object = match object {
        Some(o) => o,
        None => task
            .objects
            .first()
            .map(|o| o.id.clone())
            .ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "BindError", "task model has no objects"))?,
    };
    let target = target.or_else(|| task.targets().first().map(|t| t.id.clone()));
    Ok((object, target))
}

fn no_task() -> ApiError {
    ApiError::new(StatusCode::CONFLICT, "NoTask", "no task model has been sent")
}

/// Surrounds `ids` with the library's sentinels when they are missing.
fn with_sentinels(lib: &SkillLibrary, mut ids: Vec<SkillId>) -> (Vec<SkillId>, usize) {
    let mut offset = 0;
    if let Some(s) = lib.start() {
        if ids.first() != Some(&s.id) {
            ids.insert(0, s.id.clone());
            offset = 1;
        }
    }
    if let Some(f) = lib.finish() {
        if ids.last() != Some(&f.id) {
            ids.push(f.id.clone());
        }
    }
    (ids, offset)
}

async fn sequence(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let (names, object, target, label) = match parse_body::<SequenceBody>(&body)? {
        SequenceBody::Names(n) => (n, None, None, None),
        SequenceBody::Full { skills, object, target, task_label } => (skills, object, target, task_label),
    };
    if names.is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "EmptySequence", "no skills given"));
    }
    let lib = &app.library;
    let mut ids = Vec::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        let id = canonicalize(n, lib).ok_or_else(|| {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "UnknownSkill", format!("`{n}` is not a library skill"))
                .with("index", json!(i))
        })?;
        ids.push(id);
    }
    let (full, offset) = with_sentinels(lib, ids);
    let c = check_chain_continuity(&full, lib).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "UnknownSkill", e.to_string()))?;
    if let Some(b) = c.first_break {
        // index into the submitted list; == len means the end is incomplete
        let submitted = b.saturating_sub(offset).min(names.len());
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "DiscontinuousPlan", format!("`{}` does not follow its predecessor", full[b]))
            .with("first_break", json!(submitted))
            .with("sequence", json!(full)));
    }

    let mut g = app.write();
    let task = g.task.clone().ok_or_else(no_task)?;
    let (object, target) = default_object_and_target(&task, object, target)?;
    let label = label.unwrap_or_else(|| "task".into());
    let plan = Plan::bind(lib, &task, &full, &object, target.as_deref(), &label, PlanSource::ManualSelection)?;
    let mut next = g.clone();
    next.pending = Some(Pending { plan: plan.clone(), task });
    app.commit(&mut g, next);
    Ok(Json(json!({ "pending_plan": plan })))
}

#[derive(Deserialize)]
struct ChainBody {
    backend: String,
    #[serde(default)]
    start: Option<String>,
    #[serde(default)]
    max_len: Option<usize>,
    #[serde(default)]
    object: Option<String>,
    #[serde(default)]
    target: Option<String>,
    #[serde(default)]
    task_label: Option<String>,
}

fn chain_error(e: ChainError) -> ApiError {
    let kind = match &e {
        ChainError::NoContinuousSuccessor { .. } => "NoContinuousSuccessor",
        ChainError::MaxLenExceeded { .. } => "MaxLenExceeded",
        ChainError::UnknownToken(_) => "UnknownToken",
        ChainError::BackendUnavailable(_) => "BackendUnavailable",
        _ => "ChainError",
    };
    let status = if kind == "BackendUnavailable" { StatusCode::SERVICE_UNAVAILABLE } else { StatusCode::UNPROCESSABLE_ENTITY };
    let mut err = ApiError::new(status, kind, e.to_string());
    match e {
        ChainError::NoContinuousSuccessor { chain } => err = err.with("partial", json!(chain)),
        ChainError::MaxLenExceeded { partial } => err = err.with("partial", json!(partial)),
        _ => {}
    }
    err
}

fn session_live() -> ApiError {
    ApiError::new(StatusCode::CONFLICT, "SessionLive", "a session is running")
}

async fn chain(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: ChainBody = parse_body(&body)?;
    let backend = app
        .models
        .get(&req.backend)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "UnknownBackend", format!("no backend named `{}`", req.backend)))?;
    {
        let g = app.read();
        if g.session.as_ref().is_some_and(is_live) {
            return Err(session_live());
        }
        if g.task.is_none() {
            return Err(no_task());
        }
    }
    let start = match req.start {
        Some(s) => canonicalize(&s, &app.library).unwrap_or_else(|| SkillId::from(s)),
        None => app
            .library
            .start()
            .map(|s| s.id.clone())
            .ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "ChainError", "library has no start sentinel"))?,
    };
    let max_len = req.max_len.unwrap_or(DEFAULT_MAX_LEN);
    let lib = app.library.clone();
    // backends may block on a network model
    let ids = tokio::task::spawn_blocking(move || chain_task(backend.as_ref(), &lib, &start, max_len))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
        .map_err(chain_error)?;

    let mut g = app.write();
    if g.session.as_ref().is_some_and(is_live) {
        return Err(session_live());
    }
    let task = g.task.clone().ok_or_else(no_task)?;
    let (object, target) = default_object_and_target(&task, req.object, req.target)?;
    let label = req.task_label.unwrap_or_else(|| "task".into());
    let plan = Plan::bind(&app.library, &task, &ids, &object, target.as_deref(), &label, PlanSource::AutoChained)?;
    let mut next = g.clone();
    next.pending = Some(Pending { plan: plan.clone(), task });
    app.commit(&mut g, next);
    Ok(Json(json!({ "pending_plan": plan })))
}

#[derive(Deserialize, Default)]
struct SupervisorBody {
    #[serde(default)]
    supervisor_id: Option<String>,
}

fn supervisor(body: &Bytes) -> Result<String, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok("supervisor".into());
    }
    let b: SupervisorBody = parse_body(body)?;
    Ok(b.supervisor_id.unwrap_or_else(|| "supervisor".into()))
}

async fn approve(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let who = supervisor(&body)?;
    let mut g = app.write();
    if g.session.as_ref().is_some_and(is_live) {
        return Err(session_live());
    }
    let Pending { mut plan, task } =
        g.pending.clone().ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "NoPendingPlan", "nothing to approve"))?;
    plan.approved_by = Some(who);
    let mut s = executor::start(plan, WorldState::from_task(&task, Tool::Gripper), &app.library)?;
    s.run_until_blocked()?;
    let mut next = g.clone();
    next.pending = None;
    next.generation += 1;
    next.session = Some(s);
    app.commit(&mut g, next);
    Ok(Json(snapshot_of(&g)))
}

async fn confirm(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let who = supervisor(&body)?;
    let mut g = app.write();
    let mut s = g.session.clone().ok_or(ExecError::NotAwaitingHuman)?;
    s.confirm_gate(&who)?;
    s.run_until_blocked()?;
    let mut next = g.clone();
    next.session = Some(s);
    app.commit(&mut g, next);
    Ok(Json(snapshot_of(&g)))
}

#[derive(Deserialize)]
struct EventsQuery {
    #[serde(default)]
    from: Option<u64>,
}

struct Cursor {
    app: Arc<AppState>,
    rx: watch::Receiver<u64>,
    generation: Option<u64>,
    next: u64,
}

/// Next batch of events for the cursor, waiting for changes. `None` ends
/// the stream: the session it followed has been replaced.
async fn next_batch(mut c: Cursor) -> Option<(Vec<Event>, Cursor)> {
    loop {
        // mark the current version seen before reading, so no update is missed
        c.rx.borrow_and_update();
        let batch = {
            let g = c.app.read();
            match (&g.session, c.generation) {
                (None, _) => Vec::new(),
                (Some(_), Some(gen)) if gen != g.generation => return None,
                (Some(s), _) => {
                    c.generation = Some(g.generation);
                    s.events_from(c.next).to_vec()
                }
            }
        };
        if let Some(last) = batch.last() {
            c.next = last.seq_no + 1;
            return Some((batch, c));
        }
        c.rx.changed().await.ok()?;
    }
}

/// Events of the current session from `?from=` (or after `Last-Event-ID`)
/// onwards, one JSON object per frame.
async fn events(
    State(app): State<Arc<AppState>>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Sse<impl Stream<Item = Result<sse::Event, Infallible>>> {
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok())
        .map(|id| id + 1);
    let from = q.from.or(resume).unwrap_or(0);
    let rx = app.changed.subscribe();
    let cursor = Cursor { app, rx, generation: None, next: from };
    let s = stream::unfold(cursor, next_batch).flat_map(|batch| {
        stream::iter(batch.into_iter().map(|e| {
            let data = serde_json::to_string(&e).expect("event serializes");
            Ok(sse::Event::default().id(e.seq_no.to_string()).event(event_name(&e)).data(data))
        }))
    });
    Sse::new(s).keep_alive(KeepAlive::default())
}

fn event_name(e: &Event) -> String {
    match serde_json::to_value(e.kind) {
        Ok(Value::String(s)) => s,
        _ => "event".into(),
    }
}
