//! HTTP API over trained ensembles.
//!
//! Ensembles are loaded once and shared read-only; every request builds its
//! own computation graph on a blocking worker so health checks stay
//! responsive while predictions run.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context};
use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use etch_core::dataset::sample_recipe;
use etch_core::harness::{uncertainty_trace, UncertaintyTrace};
use etch_core::model::{ModelConfig, Variant};
use etch_core::profile::WeibullStepParams;
use etch_core::recipe::{Equipment, KnobRanges, Recipe, RecipeStep, WaferLocation};
use etch_core::training::Ensemble;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;
use tracing::{error, info};

/// Loaded ensembles, keyed by variant. Immutable after construction.
#[derive(Debug)]
pub struct AppState {
    ensembles: BTreeMap<Variant, Ensemble>,
    default_variant: Variant,
    error_ids: AtomicU64,
}

impl AppState {
    pub fn new(ensembles: Vec<Ensemble>) -> anyhow::Result<Self> {
        let mut map = BTreeMap::new();
        for e in ensembles {
            let v = e.variant();
            if map.insert(v, e).is_some() {
                bail!("two ensembles of variant `{v}` were given");
            }
        }
        // Prefer the physics-constrained variant when several are loaded.
        let default_variant = [Variant::Weibull, Variant::AccumOnly, Variant::Baseline]
            .into_iter()
            .find(|v| map.contains_key(v))
            .context("at least one ensemble must be loaded")?;
        Ok(Self { ensembles: map, default_variant, error_ids: AtomicU64::new(1) })
    }

    /// Loads every ensemble directory in `dirs`. A directory without a
    /// manifest is searched one level deep for ensemble directories.
    pub fn load(dirs: &[PathBuf]) -> anyhow::Result<Self> {
        let mut found = Vec::new();
        for dir in dirs {
            if dir.join("manifest.json").is_file() {
                found.push(dir.clone());
                continue;
            }
            let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
                .with_context(|| format!("reading checkpoint directory {}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join("manifest.json").is_file())
                .collect();
            subdirs.sort();
            if subdirs.is_empty() {
                bail!("no ensemble manifest found in {}", dir.display());
            }
            found.extend(subdirs);
        }
        let ensembles = found
            .iter()
            .map(|d| {
                let e = Ensemble::load(d).with_context(|| format!("loading ensemble {}", d.display()))?;
                info!(dir = %d.display(), variant = %e.variant(), members = e.len(), "loaded ensemble");
                Ok(e)
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        Self::new(ensembles)
    }

    pub fn variants(&self) -> Vec<Variant> {
        self.ensembles.keys().copied().collect()
    }
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    NotFound(String),
    Internal(u64),
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    error_id: Option<String>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, ErrorBody { error: m, error_id: None }),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, ErrorBody { error: m, error_id: None }),
            ApiError::Internal(id) => (
                StatusCode::INTERNAL_SERVER_ERROR,
                ErrorBody { error: "prediction failed".into(), error_id: Some(format!("E{id:06}")) },
            ),
        };
        (status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::BadRequest(r.body_text())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// A recipe in the dataset schema (without profile fields) plus an optional
/// variant selector.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    #[serde(default)]
    pub id: String,
    pub steps: Vec<RecipeStep>,
    pub equipment: Equipment,
    pub wafer_location: WaferLocation,
    #[serde(default)]
    pub variant: Option<String>,
}

impl PredictRequest {
    pub fn recipe(&self) -> Recipe {
        Recipe {
            id: self.id.clone(),
            steps: self.steps.clone(),
            equipment: self.equipment,
            wafer_location: self.wafer_location,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub variant: Variant,
    pub ensemble_size: usize,
    pub member_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub mean_um: Vec<f64>,
    pub variance_um2: Vec<f64>,
    /// Accumulated mean after each step, `T × G`.
    pub per_step_um: Vec<Vec<f64>>,
    /// Member-averaged Weibull parameters (weibull variant only).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub step_params: Vec<WeibullStepParams>,
    /// Member-averaged `G × T` cross-attention (baseline only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub attention: Option<Vec<Vec<f64>>>,
    pub grid_size: usize,
    pub model_meta: ModelMeta,
    /// Knobs outside the training ranges; the prediction is an extrapolation there.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelInfo {
    pub variant: Variant,
    pub ensemble_size: usize,
    pub member_seeds: Vec<u64>,
    pub config: ModelConfig,
    pub default: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRequest {
    /// Omitted: seeded from the clock.
    pub seed: Option<u64>,
    /// Inclusive step-count range; defaults to `[5, 9]`.
    pub steps: Option<[usize; 2]>,
}

fn select<'a>(state: &'a AppState, variant: Option<&str>) -> Result<&'a Ensemble, ApiError> {
    let v = match variant {
        None => state.default_variant,
        Some(name) => name
            .parse::<Variant>()
            .map_err(|_| ApiError::NotFound(format!("unknown variant `{name}`")))?,
    };
    state
        .ensembles
        .get(&v)
        .ok_or_else(|| ApiError::NotFound(format!("variant `{v}` is not loaded")))
}

fn validate(recipe: &Recipe, ranges: &KnobRanges) -> Result<Vec<String>, ApiError> {
    recipe.validate().map_err(|e| ApiError::BadRequest(e.to_string()))?;
    Ok(recipe
        .out_of_range(ranges)
        .into_iter()
        .map(|(i, knob)| format!("steps[{i}].{knob} is outside the training range"))
        .collect())
}

fn internal(state: &AppState, context: &str, err: impl std::fmt::Display) -> ApiError {
    let id = state.error_ids.fetch_add(1, Ordering::Relaxed);
    error!(error_id = id, context, %err, "request failed");
    ApiError::Internal(id)
}

async fn blocking<T: Send + 'static>(
    state: Arc<AppState>,
    f: impl FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let s = state.clone();
    tokio::task::spawn_blocking(move || f(&s))
        .await
        .map_err(|e| internal(&state, "worker", e))?
}

pub fn predict(state: &AppState, req: &PredictRequest) -> Result<PredictResponse, ApiError> {
    let ens = select(state, req.variant.as_deref())?;
    let recipe = req.recipe();
    let warnings = validate(&recipe, &ens.config().knob_ranges)?;
    let pred = ens.predict(&recipe).map_err(|e| internal(state, "predict", e))?;
    let mix = pred.mixture;
    let per_step_um = if ens.variant().accumulates() {
        mix.per_step_mean_um
    } else {
        uncertainty_trace(ens, &recipe)
            .map_err(|e| internal(state, "trace", e))?
            .steps
            .into_iter()
            .map(|s| s.mean_um)
            .collect()
    };
    let all_finite = mix.mean_um.iter().chain(&mix.variance_um2).chain(per_step_um.iter().flatten()).all(|v| v.is_finite());
    if !all_finite {
        return Err(internal(state, "predict", "non-finite prediction"));
    }
    Ok(PredictResponse {
        grid_size: mix.mean_um.len(),
        mean_um: mix.mean_um,
        variance_um2: mix.variance_um2,
        per_step_um,
        step_params: if ens.variant() == Variant::Weibull { mix.step_params } else { Vec::new() },
        attention: mix.attention.cross_attention,
        model_meta: ModelMeta {
            variant: ens.variant(),
            ensemble_size: ens.len(),
            member_seeds: ens.summaries().iter().map(|s| s.seed).collect(),
        },
        warnings,
    })
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn models(State(state): State<Arc<AppState>>) -> Json<Vec<ModelInfo>> {
    Json(
        state
            .ensembles
            .iter()
            .map(|(v, e)| ModelInfo {
                variant: *v,
                ensemble_size: e.len(),
                member_seeds: e.summaries().iter().map(|s| s.seed).collect(),
                config: e.config().clone(),
                default: *v == state.default_variant,
            })
            .collect(),
    )
}

async fn predict_handler(
    State(state): State<Arc<AppState>>,
    body: Result<Json<PredictRequest>, JsonRejection>,
) -> ApiResult<PredictResponse> {
    let Json(req) = body?;
    blocking(state, move |s| predict(s, &req)).await.map(Json)
}

async fn trace_handler(
    State(state): State<Arc<AppState>>,
    body: Result<Json<PredictRequest>, JsonRejection>,
) -> ApiResult<UncertaintyTrace> {
    let Json(req) = body?;
    blocking(state, move |s| {
        let ens = select(s, req.variant.as_deref())?;
        let recipe = req.recipe();
        validate(&recipe, &ens.config().knob_ranges)?;
        uncertainty_trace(ens, &recipe).map_err(|e| internal(s, "trace", e))
    })
    .await
    .map(Json)
}

async fn sample_handler(
    State(state): State<Arc<AppState>>,
    body: Option<Json<SampleRequest>>,
) -> ApiResult<Recipe> {
    let req = body.map(|Json(r)| r).unwrap_or_default();
    let [lo, hi] = req.steps.unwrap_or([5, 9]);
    if lo == 0 || lo > hi || hi > etch_core::recipe::MAX_STEPS {
        return Err(ApiError::BadRequest(format!(
            "steps: range [{lo}, {hi}] must lie within [1, {}]",
            etch_core::recipe::MAX_STEPS
        )));
    }
    let seed = req.seed.unwrap_or_else(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos() as u64)
    });
    let ranges = state.ensembles[&state.default_variant].config().knob_ranges.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Json(sample_recipe(&mut rng, format!("sample-{seed}"), [lo, hi], &ranges)))
}

/// API routes, with the UI bundle served from `static_dir` when given.
pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/models", get(models))
        .route("/api/predict", post(predict_handler))
        .route("/api/trace", post(trace_handler))
        .route("/api/sample-recipe", post(sample_handler))
        .with_state(state);
    let app = match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.layer(cors)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr, static_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let app = router(Arc::new(state), static_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app).await.context("server stopped")
}
