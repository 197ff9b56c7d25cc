//! Annotation HTTP API over a run's candidates and preference store.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::commands::{annotation_tasks, load_candidates, open_store, TaskSpec};
use super::state::{Run, Stage};
use super::store::{now_timestamp, KeywordRecord, PreferenceRecord, PreferenceStore};
use crate::corpus::{load_collection, DayStamp, Timeline};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryView {
    pub date: DayStamp,
    pub summary: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineView {
    pub id: String,
    pub entries: Vec<EntryView>,
}

impl TimelineView {
    fn new(id: &str, t: &Timeline) -> Self {
        TimelineView {
            id: id.to_owned(),
            entries: t
                .entries
                .iter()
                .map(|e| EntryView {
                    date: e.date,
                    summary: e.text.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Pending,
    Answered,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub topic: String,
    pub left: TimelineView,
    pub right: TimelineView,
    pub status: TaskStatus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Debug, Deserialize)]
pub struct ChoiceRequest {
    pub winner: Side,
    #[serde(default)]
    pub annotator: Option<String>,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct KeywordRequest {
    pub topic: String,
    pub keywords: Vec<String>,
    #[serde(default)]
    pub annotator: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordResponse {
    pub topic: String,
    pub stored: usize,
    pub keywords: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusResponse {
    pub run_id: String,
    pub stage: Stage,
    pub config_hash: String,
    pub topic: String,
    pub candidates: usize,
    pub tasks: usize,
    pub answered: usize,
    pub pending: usize,
    pub pairs: usize,
    pub keywords: Vec<String>,
}

struct Service {
    run: Run,
    topic: String,
    candidates: BTreeMap<String, Timeline>,
    tasks: Vec<TaskSpec>,
    store: Mutex<PreferenceStore>,
}

impl Service {
    fn task_view(&self, spec: &TaskSpec, store: &PreferenceStore) -> AnnotationTask {
        AnnotationTask {
            task_id: spec.task_id.clone(),
            topic: self.topic.clone(),
            left: TimelineView::new(&spec.left, &self.candidates[&spec.left]),
            right: TimelineView::new(&spec.right, &self.candidates[&spec.right]),
            status: if store.choice_for(&spec.task_id).is_some() {
                TaskStatus::Answered
            } else {
                TaskStatus::Pending
            },
        }
    }

    fn mark_collected(&self) -> Result<()> {
        // Reread so that stages recorded by other commands are kept.
        if let Some(mut state) = self.run.load_state()? {
            if !state.completed.contains(&Stage::PreferencesCollected) {
                state.record(Stage::PreferencesCollected);
                self.run.save_state(&state)?;
            }
        }
        Ok(())
    }

    fn choose(&self, task_id: &str, req: ChoiceRequest) -> Result<PreferenceRecord> {
        let spec = self
            .tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| Error::NotFound(format!("task {task_id}")))?;
        let (winner, loser) = match req.winner {
            Side::Left => (&spec.left, &spec.right),
            Side::Right => (&spec.right, &spec.left),
        };
        let mut store = self.store.lock().expect("store lock poisoned");
        if let Some(prev) = store.choice_for(task_id) {
            let replay = req.idempotency_key.is_some() && prev.idempotency_key == req.idempotency_key && &prev.winner == winner;
            if replay {
                return Ok(prev.clone());
            }
            return Err(Error::Conflict(format!("task {task_id} is already answered")));
        }
        let record = PreferenceRecord {
            task_id: task_id.to_owned(),
            winner: winner.clone(),
            loser: loser.clone(),
            annotator: req.annotator.unwrap_or_else(|| "anonymous".into()),
            timestamp: now_timestamp(),
            idempotency_key: req.idempotency_key,
        };
        store.append_preference(record.clone())?;
        self.mark_collected()?;
        Ok(record)
    }

    fn keywords(&self, req: KeywordRequest) -> Result<KeywordResponse> {
        if req.topic != self.topic {
            return Err(Error::validation(format!("unknown topic {:?}; this run is about {:?}", req.topic, self.topic)));
        }
        if req.keywords.is_empty() {
            return Err(Error::validation("keyword list is empty"));
        }
        let mut store = self.store.lock().expect("store lock poisoned");
        let stored = req.keywords.len();
        store.append_keywords(KeywordRecord {
            topic: req.topic.clone(),
            keywords: req.keywords,
            annotator: req.annotator.unwrap_or_else(|| "anonymous".into()),
            timestamp: now_timestamp(),
        })?;
        Ok(KeywordResponse {
            keywords: store.keywords_for(&req.topic),
            topic: req.topic,
            stored,
        })
    }

    fn status(&self) -> Result<StatusResponse> {
        let state = self.run.load_state()?.ok_or_else(|| Error::Stage("run state disappeared".into()))?;
        let store = self.store.lock().expect("store lock poisoned");
        let answered = self.tasks.iter().filter(|t| store.choice_for(&t.task_id).is_some()).count();
        Ok(StatusResponse {
            run_id: state.run_id,
            stage: state.stage,
            config_hash: state.config_hash,
            topic: self.topic.clone(),
            candidates: self.candidates.len(),
            tasks: self.tasks.len(),
            answered,
            pending: self.tasks.len() - answered,
            pairs: store.preferences().len(),
            keywords: store.keywords_for(&self.topic),
        })
    }
}

struct ApiError(Error);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match self.0.root() {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Conflict(_) => StatusCode::CONFLICT,
            Error::Validation(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.0.to_string() }))).into_response()
    }
}

type Shared = Arc<Service>;
type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

async fn next_task(State(s): State<Shared>) -> Response {
    let store = s.store.lock().expect("store lock poisoned");
    match s.tasks.iter().find(|t| store.choice_for(&t.task_id).is_none()) {
        Some(t) => Json(s.task_view(t, &store)).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn get_task(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<AnnotationTask> {
    let store = s.store.lock().expect("store lock poisoned");
    let t = s
        .tasks
        .iter()
        .find(|t| t.task_id == id)
        .ok_or_else(|| ApiError(Error::NotFound(format!("task {id}"))))?;
    Ok(Json(s.task_view(t, &store)))
}

async fn post_choice(State(s): State<Shared>, Path(id): Path<String>, Json(req): Json<ChoiceRequest>) -> ApiResult<PreferenceRecord> {
    s.choose(&id, req).map(Json).map_err(ApiError)
}

async fn post_keywords(State(s): State<Shared>, Json(req): Json<KeywordRequest>) -> ApiResult<KeywordResponse> {
    s.keywords(req).map(Json).map_err(ApiError)
}

async fn get_status(State(s): State<Shared>) -> ApiResult<StatusResponse> {
    s.status().map(Json).map_err(ApiError)
}

/// Builds the router; the run must have candidates.
pub fn annotation_router(run: &Run, static_dir: Option<PathBuf>) -> Result<Router> {
    let mut state = run.require(&[Stage::Candidates])?;
    let topic = load_collection(&state.corpus)?.topic;
    let candidates = load_candidates(run)?;
    let tasks = annotation_tasks(&candidates.iter().map(|(c, _)| c.clone()).collect::<Vec<_>>());
    let store = open_store(run, &mut state)?;
    run.save_state(&state)?;
    let service = Arc::new(Service {
        run: run.clone(),
        topic,
        candidates: candidates.into_iter().map(|(c, t)| (c.id, t)).collect(),
        tasks,
        store: Mutex::new(store),
    });
    let router = Router::new()
        .route("/tasks/next", get(next_task))
        .route("/tasks/{id}", get(get_task))
        .route("/tasks/{id}/choice", post(post_choice))
        .route("/keywords", post(post_keywords))
        .route("/status", get(get_status))
        .with_state(service);
    Ok(match static_dir {
        Some(dir) => router.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => router,
    })
}

/// Serves on `bind` until the process is stopped.
pub fn cmd_serve(run: &Run, bind: Option<&str>, static_dir: Option<PathBuf>) -> Result<()> {
    let router = annotation_router(run, static_dir.or_else(|| run.config.serve.static_dir.clone()))?;
    let bind = bind.unwrap_or(&run.config.serve.bind).to_owned();
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind).await.map_err(|e| Error::io(&bind, e))?;
        log::info!("annotation service for run {} listening on {}", run.id, bind);
        axum::serve(listener, router).await.map_err(|e| Error::io(&bind, e))
    })
}
