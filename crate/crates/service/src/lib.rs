//! Stateless HTTP API: sampling with optional guidance and clustering,
//! log-density of given samples, and read-only corpus browsing.
//!
//! The model and corpus are loaded once and shared read-only; every request
//! derives its randomness from its own seed, so identical requests return
//! identical bodies.

use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

use trajdiff_core::engine::{Engine, SampleOptions};
use trajdiff_core::guidance::ConstraintSet;
use trajdiff_core::logprob::{DivergenceMode, LogProbResult};
use trajdiff_core::metrics::{cluster_joint, ClusteredPrediction, Joint};
use trajdiff_core::scenes::{Scenario, MAX_AGENTS};

pub const MAX_SAMPLES: usize = 512;
pub const MAX_STEPS: usize = 256;
pub const MAX_PROBES: usize = 4096;

pub struct AppState {
    pub engine: Engine,
    pub corpus: Vec<Scenario>,
    pub model_id: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{message}")]
    BadRequest {
        message: String,
        field_path: Option<String>,
    },
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn field(path: &str, message: impl Into<String>) -> Self {
        ApiError::BadRequest {
            message: message.into(),
            field_path: Some(path.into()),
        }
    }

    /// Engine errors: numeric failures are 422, everything else is the input's fault.
    fn from_core(e: trajdiff_core::Error, field_path: Option<&str>) -> Self {
        if e.is_numeric() {
            ApiError::Numeric(e.to_string())
        } else {
            ApiError::BadRequest {
                message: e.to_string(),
                field_path: field_path.map(str::to_string),
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code, field_path) = match &self {
            ApiError::BadRequest { field_path, .. } => (
                StatusCode::BAD_REQUEST,
                "invalid_request",
                field_path.clone(),
            ),
            ApiError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found", None),
            ApiError::Numeric(_) => (StatusCode::UNPROCESSABLE_ENTITY, "numeric_failure", None),
            ApiError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal", None),
        };
        let mut err = json!({ "code": code, "message": self.to_string() });
        if let Some(p) = field_path {
            err["field_path"] = json!(p);
        }
        (status, Json(json!({ "error": err }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Parses a JSON body, reporting the path of the offending field.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let mut de = serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        ApiError::BadRequest {
            message: e.inner().to_string(),
            field_path: (path != ".").then_some(path),
        }
    })
}

fn default_num_samples() -> usize {
    16
}

fn default_steps() -> usize {
    32
}

fn default_tau() -> f64 {
    0.4
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRequest {
    #[serde(default)]
    pub scene: Option<Scenario>,
    #[serde(default)]
    pub scene_id: Option<String>,
    #[serde(default = "default_num_samples")]
    pub num_samples: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub constraints: Option<ConstraintSet>,
    #[serde(default)]
    pub cluster_k: Option<usize>,
    #[serde(default = "default_tau")]
    pub cluster_tau: f64,
    /// Also return the exact log-density of every sample.
    #[serde(default)]
    pub with_logp: bool,
    /// Wall-clock timings make the body nondeterministic, so they are opt-in.
    #[serde(default)]
    pub include_timings: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SampleResponse {
    pub scenario_id: String,
    pub seed: u64,
    pub model_id: String,
    pub config: serde_json::Value,
    pub samples: Vec<Joint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logp: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clusters: Option<ClusteredPrediction>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings_ms: Option<serde_json::Value>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LogProbRequest {
    #[serde(default)]
    pub scene: Option<Scenario>,
    #[serde(default)]
    pub scene_id: Option<String>,
    pub samples: Vec<Joint>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub hutchinson: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LogProbResponse {
    pub scenario_id: String,
    pub model_id: String,
    pub config: serde_json::Value,
    pub logp: Vec<f64>,
    pub results: Vec<LogProbResult>,
}

fn resolve_scene(
    state: &AppState,
    scene: &Option<Scenario>,
    scene_id: &Option<String>,
) -> ApiResult<Scenario> {
    let s = match (scene, scene_id) {
        (Some(_), Some(_)) => {
            return Err(ApiError::field(
                "scene_id",
                "give either scene or scene_id, not both",
            ))
        }
        (None, None) => return Err(ApiError::field("scene", "a scene or scene_id is required")),
        (Some(s), None) => s.clone(),
        (None, Some(id)) => state
            .corpus
            .iter()
            .find(|s| &s.scenario_id == id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown scene id {id:?}")))?,
    };
    if s.num_agents() > MAX_AGENTS {
        return Err(ApiError::field(
            "scene.agents",
            format!(
                "{} agents exceeds the limit of {MAX_AGENTS}",
                s.num_agents()
            ),
        ));
    }
    s.validate()
        .map_err(|e| ApiError::from_core(e, Some("scene")))?;
    Ok(s)
}

fn check_steps(steps: usize) -> ApiResult<()> {
    if !(2..=MAX_STEPS).contains(&steps) {
        return Err(ApiError::field(
            "steps",
            format!("steps must be in 2..={MAX_STEPS}"),
        ));
    }
    Ok(())
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn sample(state: &AppState, req: &SampleRequest) -> ApiResult<SampleResponse> {
    if req.num_samples == 0 || req.num_samples > MAX_SAMPLES {
        return Err(ApiError::field(
            "num_samples",
            format!("num_samples must be in 1..={MAX_SAMPLES}"),
        ));
    }
    check_steps(req.steps)?;
    if let Some(k) = req.cluster_k {
        if k == 0 || k > req.num_samples {
            return Err(ApiError::field(
                "cluster_k",
                "cluster_k must be in 1..=num_samples",
            ));
        }
        if !(req.cluster_tau > 0.0) {
            return Err(ApiError::field(
                "cluster_tau",
                "cluster_tau must be positive",
            ));
        }
    }
    let scene = resolve_scene(state, &req.scene, &req.scene_id)?;
    if let Some(c) = &req.constraints {
        c.to_config(scene.num_agents(), trajdiff_core::scenes::N_T)
            .map_err(|e| ApiError::from_core(e, Some("constraints")))?;
    }
    let opts = SampleOptions {
        num_samples: req.num_samples,
        steps: req.steps,
        seed: req.seed,
    };
    let t = Instant::now();
    let samples = state
        .engine
        .sample(&scene, &opts, req.constraints.as_ref())
        .map_err(|e| ApiError::from_core(e, None))?;
    let t_sample = elapsed_ms(t);
    let t = Instant::now();
    let clusters = match req.cluster_k {
        Some(k) => Some(
            cluster_joint(&samples, k, req.cluster_tau)
                .map_err(|e| ApiError::from_core(e, Some("cluster_k")))?,
        ),
        None => None,
    };
    let t_cluster = elapsed_ms(t);
    let t = Instant::now();
    let logp = if req.with_logp {
        let res = state
            .engine
            .logprob(&scene, &samples, req.steps, DivergenceMode::Exact, req.seed)
            .map_err(|e| ApiError::from_core(e, None))?;
        Some(res.iter().map(|r| r.logp).collect())
    } else {
        None
    };
    let t_logp = elapsed_ms(t);
    let mut config = serde_json::to_value(req).map_err(|e| ApiError::Internal(e.to_string()))?;
    config.as_object_mut().map(|o| o.remove("scene"));
    Ok(SampleResponse {
        scenario_id: scene.scenario_id.clone(),
        seed: req.seed,
        model_id: state.model_id.clone(),
        config,
        samples,
        logp,
        clusters,
        timings_ms: req
            .include_timings
            .then(|| json!({ "sample": t_sample, "cluster": t_cluster, "logp": t_logp })),
    })
}

pub fn logprob(state: &AppState, req: &LogProbRequest) -> ApiResult<LogProbResponse> {
    if req.samples.is_empty() || req.samples.len() > MAX_SAMPLES {
        return Err(ApiError::field(
            "samples",
            format!("between 1 and {MAX_SAMPLES} samples are required"),
        ));
    }
    check_steps(req.steps)?;
    let mode = match req.hutchinson {
        None => DivergenceMode::Exact,
        Some(k) if (1..=MAX_PROBES).contains(&k) => DivergenceMode::Hutchinson { probes: k },
        Some(_) => {
            return Err(ApiError::field(
                "hutchinson",
                format!("probe count must be in 1..={MAX_PROBES}"),
            ))
        }
    };
    let scene = resolve_scene(state, &req.scene, &req.scene_id)?;
    let results = state
        .engine
        .logprob(&scene, &req.samples, req.steps, mode, req.seed)
        .map_err(|e| ApiError::from_core(e, Some("samples")))?;
    Ok(LogProbResponse {
        scenario_id: scene.scenario_id.clone(),
        model_id: state.model_id.clone(),
        config: json!({ "steps": req.steps, "hutchinson": req.hutchinson, "seed": req.seed }),
        logp: results.iter().map(|r| r.logp).collect(),
        results,
    })
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn post_sample(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<Json<SampleResponse>> {
    let req: SampleRequest = parse_body(&body)?;
    blocking(move || sample(&state, &req)).await.map(Json)
}

async fn post_logprob(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<Json<LogProbResponse>> {
    let req: LogProbRequest = parse_body(&body)?;
    blocking(move || logprob(&state, &req)).await.map(Json)
}

async fn get_scenes(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let scenes: Vec<_> = state
        .corpus
        .iter()
        .map(|s| json!({ "scenario_id": s.scenario_id, "layout": s.layout, "num_agents": s.num_agents() }))
        .collect();
    Json(json!({ "scenes": scenes }))
}

async fn get_scene(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<Scenario>> {
    state
        .corpus
        .iter()
        .find(|s| s.scenario_id == id)
        .map(|s| Json(s.without_intents()))
        .ok_or_else(|| ApiError::NotFound(format!("unknown scene id {id:?}")))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "model_id": state.model_id }))
}

/// The API router. `cors_origin`: `Some("*")` allows any origin.
pub fn router(state: Arc<AppState>, cors_origin: Option<&str>) -> Router {
    let app = Router::new()
        .route("/v1/sample", post(post_sample))
        .route("/v1/logprob", post(post_logprob))
        .route("/v1/scenes", get(get_scenes))
        .route("/v1/scenes/{id}", get(get_scene))
        .route("/v1/health", get(health))
        .with_state(state);
    match cors_origin {
        None => app,
        Some("*") => app.layer(CorsLayer::permissive()),
        Some(origin) => {
            let origin = HeaderValue::from_str(origin).unwrap_or(HeaderValue::from_static("null"));
            app.layer(
                CorsLayer::new()
                    .allow_origin(origin)
                    .allow_methods(tower_http::cors::Any)
                    .allow_headers(tower_http::cors::Any),
            )
        }
    }
}

/// Binds and serves until the process is stopped.
pub async fn serve(
    state: Arc<AppState>,
    addr: std::net::SocketAddr,
    cors_origin: Option<&str>,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, cors_origin)).await
}
