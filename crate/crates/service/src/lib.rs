//! HTTP service over one interactive-learning project: slide tiles and
//! segmentation overlays for the viewer, correction and session intake,
//! iteration control and a persistent training queue.
//!
//! Every JSON payload carries `schema_version`. Writes go through the
//! project's append-only log, so a killed process restarts into exactly the
//! state the log replays to.

mod jobs;

pub use jobs::{JobQueue, JobRecord, JobState, JobTask, JOBS_FILE};

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use dial_core::dial::{verify_project, CorrectionRecord, DialProject, SlideRole, TimeReport};
use dial_core::raster::{self, GrayImage};
use dial_core::segnet::{CheckpointMeta, SegmentationMask, NUM_CLASSES, UNLABELED};
use dial_core::{Error, Result};

pub const API_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub project_root: PathBuf,
    /// Bearer token required on every request when set.
    pub token: Option<String>,
}

struct Inner {
    project: Arc<Mutex<DialProject>>,
    jobs: JobQueue,
    token: Option<String>,
    /// Segmentations already read from disk, by (slide, model tag).
    overlays: Mutex<BTreeMap<(String, String), Arc<SegmentationMask>>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Opens (and if needed repairs) the project, settles the job table and
    /// starts the training worker.
    pub fn start(config: &ServiceConfig) -> Result<Self> {
        let project = DialProject::open(&config.project_root)?;
        let jobs = JobQueue::open(&project)?;
        let project = Arc::new(Mutex::new(project));
        jobs.spawn_worker(project.clone());
        Ok(Self(Arc::new(Inner {
            project,
            jobs,
            token: config.token.clone(),
            overlays: Mutex::new(BTreeMap::new()),
        })))
    }
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            e if e.is_validation() => (StatusCode::BAD_REQUEST, "validation"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let body = json!({
            "schema_version": API_SCHEMA_VERSION,
            "error": kind,
            "message": self.0.to_string(),
        });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(Error::Training(format!("request task panicked: {e}"))))?
        .map_err(ApiError)
}

fn versioned(mut v: Value) -> Json<Value> {
    if let Value::Object(m) = &mut v {
        m.insert("schema_version".into(), API_SCHEMA_VERSION.into());
    }
    Json(v)
}

fn check_schema(v: u32) -> Result<()> {
    if v != API_SCHEMA_VERSION {
        return Err(Error::Validation(format!("schema_version {v} unsupported")));
    }
    Ok(())
}

fn png(bytes: Vec<u8>) -> Response {
    let mut r = Response::new(Body::from(bytes));
    r.headers_mut().insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    r
}

async fn auth(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.0.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v.strip_prefix("Bearer ") == Some(token.as_str()));
        if !ok {
            let body = json!({"schema_version": API_SCHEMA_VERSION, "error": "unauthorized", "message": "missing or wrong token"});
            return (StatusCode::UNAUTHORIZED, Json(body)).into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/projects/:p/slides", get(list_slides))
        .route("/projects/:p/iterations/close", post(close_iteration))
        .route("/projects/:p/complete", post(complete))
        .route("/projects/:p/report", get(report))
        .route("/projects/:p/verify", get(verify))
        .route("/slides/:s/tiles/:z/:r/:c", get(tile))
        .route("/slides/:s/overlays/:m/:z/:r/:c", get(overlay))
        .route("/slides/:s/corrections", post(correct))
        .route("/sessions", post(session))
        .route("/jobs", post(submit_job).get(list_jobs))
        .route("/jobs/:id", get(job_status))
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    let p = state.0.project.lock();
    versioned(json!({"project_id": p.meta().project_id, "head": p.head_hash()}))
}

fn check_project(p: &DialProject, id: &str) -> Result<()> {
    if p.meta().project_id != id {
        return Err(Error::NotFound(format!("project {id}")));
    }
    Ok(())
}

async fn list_slides(State(state): State<AppState>, Path(pid): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let p = state.0.project.lock();
        check_project(&p, &pid)?;
        let status: BTreeMap<String, String> =
            p.slide_status().into_iter().map(|(id, s)| (id, s.to_string())).collect();
        let mut slides = Vec::new();
        for s in &p.meta().slides {
            let meta = p.slide(&s.slide_id)?.meta().clone();
            slides.push(json!({
                "slide_id": s.slide_id,
                "role": s.role,
                "stratum": s.stratum,
                "width": s.width,
                "height": s.height,
                "tile_size": meta.tile_size,
                "levels": meta.levels,
                "status": status.get(&s.slide_id),
            }));
        }
        Ok(versioned(json!({"project_id": pid, "slides": slides})))
    })
    .await
}

async fn tile(State(state): State<AppState>, Path((sid, z, r, c)): Path<(String, u32, u32, u32)>) -> ApiResult<Response> {
    blocking(move || {
        let slide = state.0.project.lock().slide(&sid)?;
        let levels = &slide.meta().levels;
        let lv = levels
            .get(z as usize)
            .ok_or_else(|| Error::NotFound(format!("level {z} of {sid}")))?;
        if r >= lv.rows || c >= lv.cols {
            return Err(Error::NotFound(format!("tile {z}/{r}/{c} of {sid}")));
        }
        let img = slide.tile(z, r, c)?;
        Ok(png(raster::encode_rgb_png(&img)?))
    })
    .await
}

fn model_tag(p: &DialProject, requested: &str) -> Result<String> {
    if requested == "current" {
        return Ok(p.current_model().tag.clone());
    }
    p.models()
        .iter()
        .find(|m| m.tag == requested)
        .map(|m| m.tag.clone())
        .ok_or_else(|| Error::NotFound(format!("model {requested}")))
}

/// Segmentation of `sid` by the model; a conflict until a `segment_slide`
/// job has produced it.
fn segmentation(state: &AppState, sid: &str, requested: &str) -> Result<Arc<SegmentationMask>> {
    let (tag, dir) = {
        let p = state.0.project.lock();
        let tag = model_tag(&p, requested)?;
        let dir = p.segmentation_dir(sid, &tag);
        (tag, dir)
    };
    let key = (sid.to_string(), tag.clone());
    if let Some(m) = state.0.overlays.lock().get(&key) {
        return Ok(m.clone());
    }
    let mask = match SegmentationMask::load(&dir) {
        Ok(m) => Arc::new(m),
        Err(Error::NotFound(_)) => {
            return Err(Error::Conflict(format!(
                "{sid} has no segmentation by {tag}; submit a segment_slide job for it"
            )))
        }
        Err(e) => return Err(e),
    };
    state.0.overlays.lock().insert(key, mask.clone());
    Ok(mask)
}

async fn overlay(
    State(state): State<AppState>,
    Path((sid, model, z, r, c)): Path<(String, String, u32, u32, u32)>,
) -> ApiResult<Response> {
    blocking(move || {
        let slide = state.0.project.lock().slide(&sid)?;
        let lv = slide
            .meta()
            .levels
            .get(z as usize)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("level {z} of {sid}")))?;
        if r >= lv.rows || c >= lv.cols {
            return Err(Error::NotFound(format!("overlay tile {z}/{r}/{c} of {sid}")));
        }
        let mask = segmentation(&state, &sid, &model)?;
        let tile = mask.level_tile(z, r, c, slide.meta().tile_size);
        Ok(png(SegmentationMask::encode_tile(&tile)?))
    })
    .await
}

/// One horizontal run of a label at the request's pyramid level.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRun {
    pub y: u32,
    pub x_start: u32,
    pub length: u32,
    pub label: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionRequest {
    pub schema_version: u32,
    pub session_id: String,
    pub level: u32,
    pub runs: Vec<LabelRun>,
    #[serde(default)]
    pub author: Option<String>,
    #[serde(default)]
    pub duration_minutes: Option<f64>,
    /// Rejected with a conflict unless it is the open iteration.
    #[serde(default)]
    pub iteration: Option<u32>,
}

/// Rasterizes runs given at a level with downsample `f` into a base-pixel
/// delta; later runs overwrite earlier ones. Returns the delta origin.
pub fn runs_to_delta(runs: &[LabelRun], f: u32, level_dims: (u32, u32), base_dims: (u32, u32)) -> Result<(u32, u32, GrayImage)> {
    if runs.is_empty() {
        return Err(Error::Validation("a correction needs at least one run".into()));
    }
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
    for r in runs {
        if r.length == 0 || r.label as usize >= NUM_CLASSES {
            return Err(Error::Validation(format!("bad run {r:?}")));
        }
        let end = r.x_start as u64 + r.length as u64;
        if r.y >= level_dims.1 || end > level_dims.0 as u64 {
            return Err(Error::Validation(format!("run {r:?} leaves the {}x{} level", level_dims.0, level_dims.1)));
        }
        x0 = x0.min(r.x_start * f);
        y0 = y0.min(r.y * f);
        x1 = x1.max((end as u32 * f).min(base_dims.0));
        y1 = y1.max(((r.y + 1) * f).min(base_dims.1));
    }
    let mut delta = GrayImage::filled(x1 - x0, y1 - y0, UNLABELED);
    for r in runs {
        let ys = (r.y * f).min(base_dims.1)..((r.y + 1) * f).min(base_dims.1);
        let xs = (r.x_start * f).min(base_dims.0)..((r.x_start + r.length) * f).min(base_dims.0);
        for y in ys {
            for x in xs.clone() {
                delta.set(x - x0, y - y0, r.label);
            }
        }
    }
    Ok((x0, y0, delta))
}

async fn correct(
    State(state): State<AppState>,
    Path(sid): Path<String>,
    Json(req): Json<CorrectionRequest>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    blocking(move || {
        check_schema(req.schema_version)?;
        let mut p = state.0.project.lock();
        let entry = p
            .meta()
            .slide(&sid)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("slide {sid}")))?;
        if entry.role != SlideRole::Review {
            return Err(Error::Validation(format!("slide {sid} is not open for review")));
        }
        let slide = p.slide(&sid)?;
        let lv = slide
            .meta()
            .levels
            .get(req.level as usize)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("level {} does not exist", req.level)))?;
        let f = (slide.base_magnification() / lv.magnification).round() as u32;
        let (x0, y0, delta) = runs_to_delta(&req.runs, f, (lv.width, lv.height), slide.dims())?;
        let ingested = p.ingest_correction(dial_core::dial::Correction {
            slide_id: sid.clone(),
            x0,
            y0,
            delta,
            author: req.author.unwrap_or_else(|| "annotator".into()),
            duration_minutes: req.duration_minutes.unwrap_or(0.0),
            session_id: Some(req.session_id),
            iteration: req.iteration,
        })?;
        let status = p
            .slide_status()
            .into_iter()
            .find(|(id, _)| *id == sid)
            .map(|(_, s)| s.to_string());
        Ok((StatusCode::CREATED, versioned(json!({
            "correction_id": ingested.correction_id,
            "manifest_version": ingested.manifest_version,
            "labeled": ingested.labeled,
            "changed": ingested.changed,
            "status": status,
        }))))
    })
    .await
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRequest {
    pub schema_version: u32,
    pub session_id: String,
    pub annotator: String,
    pub slide_id: String,
    pub started_at: DateTime<Utc>,
    pub ended_at: DateTime<Utc>,
}

async fn session(State(state): State<AppState>, Json(req): Json<SessionRequest>) -> ApiResult<Json<Value>> {
    blocking(move || {
        check_schema(req.schema_version)?;
        let rec = state.0.project.lock().log_session(
            &req.session_id,
            &req.annotator,
            &req.slide_id,
            req.started_at,
            req.ended_at,
        )?;
        Ok(versioned(json!({ "session": rec })))
    })
    .await
}

async fn close_iteration(State(state): State<AppState>, Path(pid): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let spec = {
            let mut p = state.0.project.lock();
            check_project(&p, &pid)?;
            p.close_iteration()?
        };
        let job = state.0.jobs.submit(JobTask::training(spec.clone()))?;
        Ok(versioned(json!({ "job_spec": spec, "job": job })))
    })
    .await
}

async fn complete(State(state): State<AppState>, Path(pid): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let mut p = state.0.project.lock();
        check_project(&p, &pid)?;
        p.complete()?;
        Ok(versioned(json!({ "phase": p.phase() })))
    })
    .await
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Train,
    Finetune,
    SegmentSlide,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobRequest {
    pub schema_version: u32,
    pub kind: JobKind,
    /// Training kinds: the project whose closed iteration is trained.
    #[serde(default)]
    pub project_id: Option<String>,
    /// Segmentation: the slide and model tag (or `current`).
    #[serde(default)]
    pub slide_id: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
}

fn job_task(p: &DialProject, req: &JobRequest) -> Result<JobTask> {
    match req.kind {
        JobKind::Train | JobKind::Finetune => {
            let pid = req
                .project_id
                .as_deref()
                .ok_or_else(|| Error::Validation("training jobs need project_id".into()))?;
            check_project(p, pid)?;
            let spec = match p.phase() {
                dial_core::dial::Phase::Training { job } => (**job).clone(),
                _ => return Err(Error::Conflict("no closed iteration is waiting for training".into())),
            };
            let task = JobTask::training(spec);
            let matches = matches!(
                (&task, req.kind),
                (JobTask::Train { .. }, JobKind::Train) | (JobTask::Finetune { .. }, JobKind::Finetune)
            );
            if !matches {
                return Err(Error::Validation(format!("the pending job is not a {:?} job", req.kind)));
            }
            Ok(task)
        }
        JobKind::SegmentSlide => {
            let sid = req
                .slide_id
                .as_deref()
                .ok_or_else(|| Error::Validation("segment_slide jobs need slide_id".into()))?;
            if p.meta().slide(sid).is_none() {
                return Err(Error::NotFound(format!("slide {sid}")));
            }
            let tag = model_tag(p, req.model.as_deref().unwrap_or("current"))?;
            Ok(JobTask::SegmentSlide {
                slide_id: sid.to_string(),
                model_tag: tag,
            })
        }
    }
}

/// Queues a job: the pending training of a closed iteration (for instance
/// after an earlier attempt failed) or the segmentation of one slide.
async fn submit_job(State(state): State<AppState>, Json(req): Json<JobRequest>) -> ApiResult<(StatusCode, Json<Value>)> {
    blocking(move || {
        check_schema(req.schema_version)?;
        let task = job_task(&state.0.project.lock(), &req)?;
        let job = state.0.jobs.submit(task)?;
        Ok((StatusCode::ACCEPTED, versioned(json!({ "job": job }))))
    })
    .await
}

async fn list_jobs(State(state): State<AppState>) -> Json<Value> {
    versioned(json!({ "jobs": state.0.jobs.list() }))
}

async fn job_status(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let job = state.0.jobs.get(&id).ok_or_else(|| Error::NotFound(format!("job {id}")))?;
    Ok(versioned(json!({ "job": job })))
}

#[derive(Debug, Serialize)]
struct ModelRow {
    tag: String,
    hash: String,
    parent_hash: Option<String>,
    val_iou: Option<f64>,
    selection_set: Option<String>,
}

async fn report(State(state): State<AppState>, Path(pid): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let p = state.0.project.lock();
        check_project(&p, &pid)?;
        let models: Vec<ModelRow> = p
            .models()
            .iter()
            .map(|m| {
                let meta: Option<CheckpointMeta> = raster::read_json(
                    &dial_core::dial::checkpoint_dir(p.root(), m.iteration).join("meta.json"),
                )
                .ok();
                ModelRow {
                    tag: m.tag.clone(),
                    hash: m.hash.clone(),
                    parent_hash: m.parent_hash.clone(),
                    val_iou: meta.as_ref().and_then(|x| x.val_iou),
                    selection_set: meta.map(|x| x.selection_set),
                }
            })
            .collect();
        let time: TimeReport = p.time_report();
        let corrections: Vec<&CorrectionRecord> = p.corrections().iter().collect();
        let status: Vec<Value> = p
            .slide_status()
            .into_iter()
            .map(|(id, s)| json!({"slide_id": id, "status": s}))
            .collect();
        Ok(versioned(json!({
            "project_id": pid,
            "phase": p.phase(),
            "head_hash": p.head_hash(),
            "manifest_version": p.manifest_version(),
            "models": models,
            "time": time,
            "total_hours": time.total_hours(),
            "corrections": corrections.len(),
            "slides": status,
            "failures": p.state().failures,
        })))
    })
    .await
}

async fn verify(State(state): State<AppState>, Path(pid): Path<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let root = {
            let p = state.0.project.lock();
            check_project(&p, &pid)?;
            p.root().to_path_buf()
        };
        let _guard = state.0.project.lock();
        let report = verify_project(&root)?;
        Ok(versioned(json!({ "ok": report.ok(), "report": report })))
    })
    .await
}

/// Serves until ctrl-c. Prints `listening on <addr>` once bound.
pub async fn serve(config: ServiceConfig, addr: &str) -> anyhow::Result<()> {
    let state = AppState::start(&config)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    println!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
