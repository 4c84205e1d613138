//! HTTP+JSON front end for allocation sessions.
//!
//! Every transition is validated here; clients only render what the server confirms.
//! Each session sits behind its own mutex so requests for one session apply one at a time
//! in arrival order, while different sessions proceed independently.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{Mutex, RwLock};
use trimodal_core::allocation::{
    predict, summarize, AllocationError, AllocationRecord, BudgetScale, ModelCoefficients, ModelKind,
    PredictionResult,
};
use trimodal_core::cost::{CostCatalog, CostError, Modality};
use trimodal_core::session::{self, Clock, LevelOutcome, Session, SessionError, SessionLog, TrialState};

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("no session `{0}`")]
    UnknownSession(String),
    #[error("session `{0}` already exists")]
    DuplicateSession(String),
    #[error("{0}")]
    BadRequest(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Allocation(#[from] AllocationError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ApiError::DuplicateSession(_) => StatusCode::CONFLICT,
            ApiError::Session(SessionError::SessionComplete | SessionError::SmellUnaffordable { .. }) => {
                StatusCode::CONFLICT
            }
            ApiError::Session(SessionError::Io(_) | SessionError::CorruptLog(_)) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::BadRequest(r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub struct AppState {
    catalog: CostCatalog,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<Session>>>>,
    /// Latest log of every session, refreshed on each commit; summaries and the store read this.
    committed: Mutex<BTreeMap<String, SessionLog>>,
    store: Option<PathBuf>,
    next_id: AtomicU64,
    clock: Clock,
}

pub type SharedState = Arc<AppState>;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub catalog: CostCatalog,
    /// Session store; existing sessions are loaded from it and every commit rewrites it.
    pub store: Option<PathBuf>,
    pub clock: Clock,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            catalog: CostCatalog::default(),
            store: None,
            clock: Clock::Wall,
        }
    }
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Result<SharedState, ApiError> {
        let mut sessions = BTreeMap::new();
        let mut committed = BTreeMap::new();
        if let Some(path) = config.store.as_ref().filter(|p| p.exists()) {
            for log in session::load(path)? {
                let id = log.session_id.clone();
                let s = Session::from_log(log.clone(), config.clock)?;
                sessions.insert(id.clone(), Arc::new(Mutex::new(s)));
                committed.insert(id, log);
            }
        }
        Ok(Arc::new(Self {
            next_id: AtomicU64::new(sessions.len() as u64 + 1),
            catalog: config.catalog,
            sessions: RwLock::new(sessions),
            committed: Mutex::new(committed),
            store: config.store,
            clock: config.clock,
        }))
    }

    async fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::UnknownSession(id.to_string()))
    }

    async fn record_commit(&self, log: SessionLog) -> ApiResult<()> {
        let mut committed = self.committed.lock().await;
        committed.insert(log.session_id.clone(), log);
        if let Some(path) = &self.store {
            let logs: Vec<SessionLog> = committed.values().cloned().collect();
            session::persist(path, &logs)?;
        }
        Ok(())
    }

    /// Records committed so far, in session-id then commit order.
    pub async fn committed_records(&self) -> Vec<AllocationRecord> {
        self.committed.lock().await.values().flat_map(SessionLog::records).collect()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub session_id: Option<String>,
    pub participant_id: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub participant_id: String,
    pub position: usize,
    pub total_trials: usize,
    pub complete: bool,
    pub trial: Option<TrialState>,
}

impl SessionView {
    fn of(s: &Session) -> Self {
        Self {
            session_id: s.log().session_id.clone(),
            participant_id: s.log().participant_id.clone(),
            position: s.position(),
            total_trials: s.total_trials(),
            complete: s.is_complete(),
            trial: s.current().cloned(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelRequest {
    pub modality: Modality,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelResponse {
    pub outcome: LevelOutcome,
    pub trial: TrialState,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SmellRequest {
    /// Explicit state; omitted means toggle.
    #[serde(default)]
    pub on: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitResponse {
    pub record: AllocationRecord,
    pub session: SessionView,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictRequest {
    pub model: String,
    /// Budget label (B1..B5) or a raw regressor value.
    pub budget: BudgetRef,
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default)]
    pub scale: BudgetScale,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BudgetRef {
    Regressor(f64),
    Label(String),
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct SummaryQuery {
    #[serde(default)]
    pub session: Option<String>,
}

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/catalog", get(catalog))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/trial", get(get_trial))
        .route("/sessions/{id}/level", post(set_level))
        .route("/sessions/{id}/smell", post(set_smell))
        .route("/sessions/{id}/commit", post(commit))
        .route("/sessions/{id}/log", get(get_log))
        .route("/summary", get(summary))
        .route("/predict", post(predict_handler))
        .with_state(state)
}

async fn catalog(State(st): State<SharedState>) -> Json<CostCatalog> {
    Json(st.catalog.clone())
}

async fn create_session(
    State(st): State<SharedState>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<SessionView>)> {
    let Json(req) = body?;
    if req.participant_id.trim().is_empty() {
        return Err(ApiError::BadRequest("participant_id is empty".into()));
    }
    let n = st.next_id.fetch_add(1, Ordering::Relaxed);
    let id = req.session_id.unwrap_or_else(|| format!("s{n:04}"));
    let seed = req.seed.unwrap_or(n);
    let mut s = Session::new(&id, &req.participant_id, st.catalog.clone(), seed)?;
    s.set_clock(st.clock);
    let view = SessionView::of(&s);
    let mut sessions = st.sessions.write().await;
    if sessions.contains_key(&id) {
        return Err(ApiError::DuplicateSession(id));
    }
    sessions.insert(id, Arc::new(Mutex::new(s)));
    Ok((StatusCode::CREATED, Json(view)))
}

async fn list_sessions(State(st): State<SharedState>) -> Json<Vec<String>> {
    Json(st.sessions.read().await.keys().cloned().collect())
}

async fn get_session(State(st): State<SharedState>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let s = st.session(&id).await?;
    let s = s.lock().await;
    Ok(Json(SessionView::of(&s)))
}

async fn get_trial(State(st): State<SharedState>, Path(id): Path<String>) -> ApiResult<Json<TrialState>> {
    let s = st.session(&id).await?;
    let s = s.lock().await;
    s.current().cloned().map(Json).ok_or(ApiError::Session(SessionError::SessionComplete))
}

async fn set_level(
    State(st): State<SharedState>,
    Path(id): Path<String>,
    body: Result<Json<LevelRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<LevelResponse>)> {
    let Json(req) = body?;
    let s = st.session(&id).await?;
    let mut s = s.lock().await;
    let (trial, outcome) = s.set_level(req.modality, req.index)?;
    // a refused increase is reported as a conflict; the body is the state to snap back to
    let status = if outcome == LevelOutcome::Rejected {
        StatusCode::CONFLICT
    } else {
        StatusCode::OK
    };
    Ok((status, Json(LevelResponse { outcome, trial })))
}

async fn set_smell(
    State(st): State<SharedState>,
    Path(id): Path<String>,
    body: Option<Json<SmellRequest>>,
) -> ApiResult<Json<TrialState>> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let s = st.session(&id).await?;
    let mut s = s.lock().await;
    let trial = match req.on {
        Some(on) => s.set_smell(on)?,
        None => s.toggle_smell()?,
    };
    Ok(Json(trial))
}

async fn commit(State(st): State<SharedState>, Path(id): Path<String>) -> ApiResult<Json<CommitResponse>> {
    let s = st.session(&id).await?;
    let mut s = s.lock().await;
    let record = s.commit()?;
    st.record_commit(s.log().clone()).await?;
    Ok(Json(CommitResponse {
        record,
        session: SessionView::of(&s),
    }))
}

async fn get_log(State(st): State<SharedState>, Path(id): Path<String>) -> ApiResult<Json<SessionLog>> {
    let s = st.session(&id).await?;
    let s = s.lock().await;
    Ok(Json(s.log().clone()))
}

async fn summary(State(st): State<SharedState>, Query(q): Query<SummaryQuery>) -> ApiResult<Response> {
    let records = match q.session {
        Some(id) => {
            let committed = st.committed.lock().await;
            committed
                .get(&id)
                .map(SessionLog::records)
                .ok_or(ApiError::UnknownSession(id))?
        }
        None => st.committed_records().await,
    };
    let body = summary_json(&records)?;
    Ok(([(axum::http::header::CONTENT_TYPE, "application/json")], body).into_response())
}

/// Exact body served by `/summary`.
pub fn summary_json(records: &[AllocationRecord]) -> Result<String, ApiError> {
    let groups = if records.is_empty() { Vec::new() } else { summarize(records)? };
    serde_json::to_string(&groups).map_err(|e| ApiError::BadRequest(e.to_string()))
}

async fn predict_handler(
    State(st): State<SharedState>,
    body: Result<Json<PredictRequest>, JsonRejection>,
) -> ApiResult<Json<PredictionResult>> {
    let Json(req) = body?;
    let kind: ModelKind = req.model.parse()?;
    let b = match &req.budget {
        BudgetRef::Regressor(v) => *v,
        BudgetRef::Label(label) => req.scale.regressor(st.catalog.budget(label)?),
    };
    let coeffs = ModelCoefficients::reference(kind);
    Ok(Json(predict(&coeffs, b, req.scenario.as_deref())?))
}

/// Serves until the process receives ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: SharedState) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
