//! HTTP correction service.
//!
//! | method | path | body / response |
//! |---|---|---|
//! | GET | `/api/images` | `[{"id", "width", "height", "corrections"}]` |
//! | GET | `/api/image/{id}` | 8-bit grayscale PNG |
//! | GET | `/api/prediction/{id}` | `{"image", "checkpoint", "closed", "points"}` |
//! | GET | `/api/corrections/{id}` | stored corrections file |
//! | POST | `/api/corrections/{id}` | corrections file in, stored file out (201) |
//! | POST | `/api/finetune` | `{"job": id}` (202); 400 without corrections, 409 while a job runs |
//! | GET | `/api/job/{id}` | [`JobStatus`] |
//! | GET | `/api/metrics` | metrics report of the served checkpoint |
//!
//! Errors are `{"error": message}` with status 400, 404, 409 or 500.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use ctn_core::dataio::{CorrectionsFile, Dataset, Segment};
use ctn_core::geometry::Contour;
use ctn_core::model::Checkpoint;
use ctn_core::training::{
    checkpoint_fingerprint, evaluate, finetune_hitl, EpochRecord, MetricsReport, TrainConfig, TrainObserver,
};

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        Self(StatusCode::BAD_REQUEST, msg.into())
    }

    fn not_found(msg: impl Into<String>) -> Self {
        Self(StatusCode::NOT_FOUND, msg.into())
    }

    fn internal(msg: impl std::fmt::Display) -> Self {
        Self(StatusCode::INTERNAL_SERVER_ERROR, msg.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub id: u64,
    pub state: JobState,
    /// Last finished epoch.
    pub epoch: usize,
    pub epochs: usize,
    /// Mean total loss of the last finished epoch.
    pub loss: Option<f64>,
    /// Fingerprint of the resulting checkpoint.
    pub checkpoint: Option<String>,
    pub error: Option<String>,
}

struct Served {
    checkpoint: Arc<Checkpoint>,
    fingerprint: String,
    generation: u64,
}

pub struct AppState {
    root: PathBuf,
    dataset: RwLock<Dataset>,
    served: RwLock<Served>,
    predictions: Mutex<HashMap<String, (u64, Arc<Contour>)>>,
    metrics: Mutex<Option<(u64, Arc<MetricsReport>)>>,
    jobs: RwLock<BTreeMap<u64, JobStatus>>,
    running: AtomicBool,
    next_job: AtomicU64,
    write_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    config: TrainConfig,
    out_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(
        root: PathBuf,
        dataset: Dataset,
        checkpoint: Checkpoint,
        config: TrainConfig,
        out_dir: Option<PathBuf>,
    ) -> ctn_core::Result<Arc<Self>> {
        let fingerprint = checkpoint_fingerprint(&checkpoint)?;
        Ok(Arc::new(Self {
            root,
            dataset: RwLock::new(dataset),
            served: RwLock::new(Served { checkpoint: Arc::new(checkpoint), fingerprint, generation: 0 }),
            predictions: Mutex::new(HashMap::new()),
            metrics: Mutex::new(None),
            jobs: RwLock::new(BTreeMap::new()),
            running: AtomicBool::new(false),
            next_job: AtomicU64::new(1),
            write_locks: Mutex::new(HashMap::new()),
            config,
            out_dir,
        }))
    }

    fn served(&self) -> (Arc<Checkpoint>, String, u64) {
        let s = self.served.read().unwrap();
        (s.checkpoint.clone(), s.fingerprint.clone(), s.generation)
    }

    fn image(&self, id: &str) -> ApiResult<ctn_core::imaging::GrayImage> {
        let ds = self.dataset.read().unwrap();
        ds.sample(id).map(|s| s.image.clone()).ok_or_else(|| ApiError::not_found(format!("unknown image id {id:?}")))
    }

    /// Installs a new checkpoint and drops every cached result.
    fn install(&self, checkpoint: Checkpoint, fingerprint: String) {
        let mut s = self.served.write().unwrap();
        s.generation += 1;
        s.checkpoint = Arc::new(checkpoint);
        s.fingerprint = fingerprint;
        self.predictions.lock().unwrap().clear();
        *self.metrics.lock().unwrap() = None;
    }
}

pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/images", get(list_images))
        .route("/api/image/{id}", get(image_png))
        .route("/api/prediction/{id}", get(prediction))
        .route("/api/corrections/{id}", get(get_corrections).post(post_corrections))
        .route("/api/finetune", post(start_finetune))
        .route("/api/job/{id}", get(job_status))
        .route("/api/metrics", get(metrics))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api.route("/", get(index)),
    }
}

async fn index() -> Json<serde_json::Value> {
    Json(json!({
        "endpoints": [
            "GET /api/images", "GET /api/image/{id}", "GET /api/prediction/{id}",
            "GET /api/corrections/{id}", "POST /api/corrections/{id}", "POST /api/finetune",
            "GET /api/job/{id}", "GET /api/metrics"
        ]
    }))
}

#[derive(Serialize)]
struct ImageInfo {
    id: String,
    width: usize,
    height: usize,
    corrections: usize,
}

async fn list_images(State(st): State<Arc<AppState>>) -> Json<Vec<ImageInfo>> {
    let ds = st.dataset.read().unwrap();
    Json(
        ds.samples()
            .iter()
            .map(|s| ImageInfo {
                id: s.id.clone(),
                width: s.image.width,
                height: s.image.height,
                corrections: s.corrections.len(),
            })
            .collect(),
    )
}

async fn image_png(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let png = st.image(&id)?.to_png8().map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Serialize, Deserialize)]
pub struct PredictionBody {
    pub image: String,
    pub checkpoint: String,
    #[serde(flatten)]
    pub contour: Contour,
}

async fn prediction(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<PredictionBody>> {
    let image = st.image(&id)?;
    let (ck, fingerprint, generation) = st.served();
    let cached = st.predictions.lock().unwrap().get(&id).filter(|(g, _)| *g == generation).map(|(_, c)| c.clone());
    let contour = match cached {
        Some(c) => c,
        None => {
            let c = tokio::task::spawn_blocking(move || ck.predict(&image))
                .await
                .map_err(ApiError::internal)?
                .map_err(ApiError::internal)?;
            let c = Arc::new(c);
            // a checkpoint swap during inference leaves the stale result uncached
            if st.served.read().unwrap().generation == generation {
                st.predictions.lock().unwrap().insert(id.clone(), (generation, c.clone()));
            }
            c
        }
    };
    Ok(Json(PredictionBody { image: id, checkpoint: fingerprint, contour: (*contour).clone() }))
}

fn corrections_path(st: &AppState, id: &str) -> PathBuf {
    st.root.join("corrections").join(format!("{id}.corrections.json"))
}

async fn get_corrections(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<CorrectionsFile>> {
    st.image(&id)?;
    let ds = st.dataset.read().unwrap();
    let s = ds.sample(&id).expect("checked above");
    Ok(Json(CorrectionsFile::from_corrections(&id, &s.corrections)))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorrectionsBody {
    image: Option<String>,
    segments: Vec<Segment>,
}

fn now_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

async fn post_corrections(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<CorrectionsFile>)> {
    st.image(&id)?;
    let parsed: CorrectionsBody =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("body: {e}")))?;
    if parsed.image.as_deref().is_some_and(|i| i != id) {
        return Err(ApiError::bad_request(format!("image: {:?} does not match the path id {id:?}", parsed.image.unwrap())));
    }
    let stamp = now_millis();
    let segments: Vec<Segment> = parsed.segments.into_iter().map(|s| Segment { timestamp: Some(stamp), ..s }).collect();
    let incoming = CorrectionsFile { image: id.clone(), segments };
    incoming.validate().map_err(|e| match e {
        ctn_core::Error::Data(field_message) => ApiError::bad_request(field_message),
        other => ApiError::bad_request(other.to_string()),
    })?;

    let lock = st.write_locks.lock().unwrap().entry(id.clone()).or_default().clone();
    let _guard = lock.lock().await;
    let path = corrections_path(&st, &id);
    let st2 = st.clone();
    let stored = tokio::task::spawn_blocking(move || {
        std::fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| ctn_core::Error::Io { path: path.clone(), source: e })?;
        let stored = CorrectionsFile::append(&path, &incoming.image, incoming.segments.clone())?;
        let image = incoming.image.clone();
        st2.dataset.write().unwrap().add_corrections(&image, incoming.into_corrections())?;
        Ok::<_, ctn_core::Error>(stored)
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(ApiError::internal)?;
    Ok((StatusCode::CREATED, Json(stored)))
}

struct JobObserver {
    state: Arc<AppState>,
    id: u64,
}

impl TrainObserver for JobObserver {
    fn on_epoch(&mut self, r: &EpochRecord) -> ctn_core::Result<()> {
        if let Some(j) = self.state.jobs.write().unwrap().get_mut(&self.id) {
            j.epoch = r.epoch;
            j.loss = Some(r.total);
        }
        Ok(())
    }
}

fn finish_job(st: &AppState, id: u64, result: ctn_core::Result<Checkpoint>) {
    let outcome = result.and_then(|ck| {
        let fp = checkpoint_fingerprint(&ck)?;
        if let Some(dir) = &st.out_dir {
            std::fs::create_dir_all(dir).map_err(|e| ctn_core::Error::Io { path: dir.clone(), source: e })?;
            ck.write(&dir.join(format!("finetune-{id}.ckpt")))?;
        }
        st.install(ck, fp.clone());
        Ok(fp)
    });
    if let Some(j) = st.jobs.write().unwrap().get_mut(&id) {
        match outcome {
            Ok(fp) => {
                j.state = JobState::Completed;
                j.checkpoint = Some(fp);
            }
            Err(e) => {
                j.state = JobState::Failed;
                j.error = Some(e.to_string());
            }
        }
    }
    st.running.store(false, Ordering::SeqCst);
}

async fn start_finetune(State(st): State<Arc<AppState>>) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    if st.dataset.read().unwrap().correction_count() == 0 {
        return Err(ApiError::bad_request("no corrections"));
    }
    if st.running.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).is_err() {
        return Err(ApiError(StatusCode::CONFLICT, "a finetune job is already running".into()));
    }
    let id = st.next_job.fetch_add(1, Ordering::SeqCst);
    st.jobs.write().unwrap().insert(
        id,
        JobStatus {
            id,
            state: JobState::Running,
            epoch: 0,
            epochs: st.config.epochs,
            loss: None,
            checkpoint: None,
            error: None,
        },
    );
    let samples = st.dataset.read().unwrap().samples().to_vec();
    let (ck, _, _) = st.served();
    let worker = st.clone();
    std::thread::spawn(move || {
        let mut obs = JobObserver { state: worker.clone(), id };
        let result = finetune_hitl(&ck, &samples, &worker.config, &mut obs).map(|o| o.checkpoint);
        finish_job(&worker, id, result);
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job": id }))))
}

async fn job_status(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<JobStatus>> {
    let job = id.parse::<u64>().ok().and_then(|n| st.jobs.read().unwrap().get(&n).cloned());
    job.map(Json).ok_or_else(|| ApiError::not_found(format!("unknown job id {id:?}")))
}

async fn metrics(State(st): State<Arc<AppState>>) -> ApiResult<Json<MetricsReport>> {
    let (ck, _, generation) = st.served();
    if let Some((g, r)) = st.metrics.lock().unwrap().as_ref() {
        if *g == generation {
            return Ok(Json((**r).clone()));
        }
    }
    let st2 = st.clone();
    let report = tokio::task::spawn_blocking(move || evaluate(&ck, &st2.dataset.read().unwrap()))
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::internal)?;
    let report = Arc::new(report);
    if st.served.read().unwrap().generation == generation {
        *st.metrics.lock().unwrap() = Some((generation, report.clone()));
    }
    Ok(Json((*report).clone()))
}
