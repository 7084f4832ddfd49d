//! HTTP job service: submit mixing and sweep jobs, poll them, fetch PNGs.
//!
//! Every endpoint lives under `/v1`. Job ids are content addresses of the
//! request plus the model hash, so resubmitting a request returns the
//! original job and its stored, byte-identical result.

pub mod jobs;
pub mod registry;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

use magicmix_core::io::image::{decode_png, encode_png};
use magicmix_core::io::{sha256_hex, write_atomic};
use magicmix_core::par::Execution;
use magicmix_core::request::{resolve_layout, FieldError, LayoutInput, MixRequest, SweepRequest};

use jobs::{JobSpec, JobState, JobTable, SubmitError};
use registry::Registry;

/// Largest sweep accepted in one job.
pub const MAX_SWEEP_CELLS: usize = 256;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Holds `jobs/` and `uploads/`.
    pub data_dir: PathBuf,
    pub workers: usize,
    pub queue_capacity: usize,
    pub exec: Execution,
}

pub struct AppState {
    pub registry: Arc<Registry>,
    pub jobs: Arc<JobTable>,
    pub config: ServiceConfig,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    fields: Vec<FieldError>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            fields: Vec::new(),
        }
    }

    fn invalid(fields: Vec<FieldError>) -> Self {
        let message = fields
            .iter()
            .map(|f| format!("{}: {}", f.field, f.message))
            .collect::<Vec<_>>()
            .join("; ");
        Self {
            status: StatusCode::BAD_REQUEST,
            message,
            fields,
        }
    }

    fn field(name: &str, message: impl ToString) -> Self {
        Self::invalid(vec![FieldError {
            field: name.to_string(),
            message: message.to_string(),
        }])
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    /// Logs the detail and returns a generic 500.
    fn internal(detail: impl std::fmt::Display) -> Self {
        log::error!("internal error: {detail}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"status": self.status.as_u16(), "message": self.message, "fields": self.fields}});
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Loads the job table, starts the workers and returns the router.
/// Must be called inside a Tokio runtime.
pub fn build(registry: Registry, config: ServiceConfig) -> std::io::Result<(Router, Arc<AppState>)> {
    let jobs = Arc::new(JobTable::open(&config.data_dir, config.queue_capacity)?);
    let registry = Arc::new(registry);
    jobs::spawn_workers(jobs.clone(), registry.clone(), config.workers, config.exec);
    let state = Arc::new(AppState { registry, jobs, config });
    Ok((router(state.clone()), state))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/models", get(models))
        .route("/v1/datasets", get(datasets))
        .route("/v1/datasets/:name/images/:index", get(dataset_image))
        .route("/v1/uploads", post(upload))
        .route("/v1/jobs/mix", post(submit_mix))
        .route("/v1/jobs/sweep", post(submit_sweep))
        .route("/v1/jobs/:id", get(job))
        .route("/v1/jobs/:id/result/:cell", get(job_result))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .with_state(state)
}

async fn health(State(s): State<Arc<AppState>>) -> Json<Value> {
    let (queued, running) = s.jobs.counts();
    Json(json!({
        "status": "ok",
        "name": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "parallel": s.config.exec.is_parallel(),
        "workers": s.config.workers,
        "queue_capacity": s.config.queue_capacity,
        "queued": queued,
        "running": running,
    }))
}

async fn models(State(s): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({"models": s.registry.models().map(|m| m.info()).collect::<Vec<_>>()}))
}

async fn datasets(State(s): State<Arc<AppState>>) -> Json<Value> {
    let list: Vec<Value> = s
        .registry
        .datasets()
        .map(|(name, d)| {
            json!({
                "name": name,
                "count": d.len(),
                "image_size": d.spec.image_size,
                "prompts": d.spec.pairs().iter().map(|(a, b)| format!("{a} {b}")).collect::<Vec<_>>(),
            })
        })
        .collect();
    Json(json!({"datasets": list}))
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn dataset_image(State(s): State<Arc<AppState>>, UrlPath((name, index)): UrlPath<(String, usize)>) -> ApiResult<Response> {
    let d = s.registry.dataset(&name).map_err(|e| ApiError::not_found(e.to_string()))?;
    let img = d
        .images
        .get(index)
        .ok_or_else(|| ApiError::not_found(format!("dataset `{name}` has {} images", d.len())))?;
    Ok(png_response(encode_png(img).map_err(ApiError::internal)?))
}

async fn upload(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let img = decode_png(&body, Path::new("upload")).map_err(|e| ApiError::field("body", e))?;
    let id = sha256_hex(&body);
    write_atomic(&s.registry.uploads_dir().join(format!("{id}.png")), &body).map_err(ApiError::internal)?;
    Ok((StatusCode::CREATED, Json(json!({"id": id, "shape": img.shape()}))))
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::field("body", e))
}

/// Checks everything a job needs before it is queued, so workers only fail on
/// genuinely internal problems.
fn validate(s: &AppState, layout: &LayoutInput, dataset: Option<&str>, model: Option<&str>, mut fields: Vec<FieldError>) -> ApiResult<String> {
    if !s.registry.has_model(model) {
        return Err(ApiError::not_found(format!("unknown model `{}`", model.unwrap_or_default())));
    }
    let m = s.registry.model(model).map_err(|e| ApiError::not_found(e.to_string()))?;
    let ds = match dataset {
        Some(name) => Some(s.registry.dataset(name).map_err(|e| ApiError::not_found(e.to_string()))?),
        None => s.registry.default_dataset(),
    };
    if let LayoutInput::ImagePath(_) = layout {
        fields.push(FieldError {
            field: "layout.image_path".into(),
            message: "the service reads no local paths; upload the PNG or send png_base64".into(),
        });
    }
    if fields.is_empty() {
        match resolve_layout(layout, m.vocabulary(), ds.as_deref(), s.registry.uploads_dir()) {
            Ok(magicmix_core::magicmix::LayoutSource::Image(img)) => {
                if img.shape() != m.denoiser().sample_shape().as_slice() {
                    fields.push(FieldError {
                        field: "layout".into(),
                        message: format!(
                            "image shape {:?} does not match the model's {:?}",
                            img.shape(),
                            m.denoiser().sample_shape()
                        ),
                    });
                }
            }
            Ok(_) => {}
            Err(e) => fields.push(FieldError {
                field: "layout".into(),
                message: e.to_string(),
            }),
        }
    }
    if !fields.is_empty() {
        return Err(ApiError::invalid(fields));
    }
    Ok(m.sha256.clone())
}

fn enqueue(s: &AppState, spec: JobSpec, model_sha256: &str) -> ApiResult<(StatusCode, Json<Value>)> {
    match s.jobs.submit(spec, model_sha256) {
        Ok(sub) => {
            let status = if sub.created { StatusCode::ACCEPTED } else { StatusCode::OK };
            Ok((status, Json(json!({"id": sub.id, "state": sub.state, "created": sub.created}))))
        }
        Err(SubmitError::Capacity { queued, limit }) => Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("queue full ({queued} of {limit} queued); retry later"),
        )),
        Err(SubmitError::Io(e)) => Err(ApiError::internal(e)),
    }
}

async fn submit_mix(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: MixRequest = parse_body(&body)?;
    let vocab_fields = match s.registry.model(req.model.as_deref()) {
        Ok(m) => req.field_errors(m.vocabulary()),
        Err(e) => return Err(ApiError::not_found(e.to_string())),
    };
    let sha = validate(&s, &req.layout, req.dataset.as_deref(), req.model.as_deref(), vocab_fields)?;
    enqueue(&s, JobSpec::Mix(req), &sha)
}

async fn submit_sweep(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: SweepRequest = parse_body(&body)?;
    let mut fields = match s.registry.model(req.model.as_deref()) {
        Ok(m) => req.field_errors(m.vocabulary()),
        Err(e) => return Err(ApiError::not_found(e.to_string())),
    };
    if fields.is_empty() {
        match req.grid.cells(&req.config) {
            Ok(c) if c.len() > MAX_SWEEP_CELLS => fields.push(FieldError {
                field: "grid".into(),
                message: format!("{} cells exceed the limit of {MAX_SWEEP_CELLS}", c.len()),
            }),
            Ok(_) => {}
            Err(e) => fields.push(FieldError {
                field: "grid".into(),
                message: e.to_string(),
            }),
        }
    }
    let sha = validate(&s, &req.layout, req.dataset.as_deref(), req.model.as_deref(), fields)?;
    enqueue(&s, JobSpec::Sweep(req), &sha)
}

async fn job(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let rec = s.jobs.get(&id).ok_or_else(|| ApiError::not_found(format!("unknown job `{id}`")))?;
    Ok(Json(jobs::describe(&rec)))
}

async fn job_result(State(s): State<Arc<AppState>>, UrlPath((id, cell)): UrlPath<(String, String)>) -> ApiResult<Response> {
    let rec = s.jobs.get(&id).ok_or_else(|| ApiError::not_found(format!("unknown job `{id}`")))?;
    if rec.state != JobState::Done {
        return Err(ApiError::not_found(format!("job `{id}` is {:?}, no result yet", rec.state).to_lowercase()));
    }
    let file = if cell == "montage" {
        "montage.png".to_string()
    } else {
        let index: usize = cell
            .parse()
            .map_err(|_| ApiError::not_found(format!("cell `{cell}` is not an index")))?;
        if index >= rec.cells.len() {
            return Err(ApiError::not_found(format!("job has {} cells", rec.cells.len())));
        }
        format!("cell-{index:03}.png")
    };
    let path = s.jobs.job_dir(&id).join(&file);
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok(png_response(bytes)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(ApiError::not_found(format!("no {file} for job `{id}`"))),
        Err(e) => Err(ApiError::internal(e)),
    }
}
