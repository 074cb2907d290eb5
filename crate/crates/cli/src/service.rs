//! HTTP/JSON service over a loaded model bundle.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as JsonValue};

use tabcf_core::baselines::BaselineConfig;
use tabcf_core::checkpoint::{read_header, ModelKind};
use tabcf_core::config::{BaselineDefaults, RunConfig};
use tabcf_core::experiment::{
    Method, ModelBundle, CLASSIFIER_FILE, DIFFUSION_FILE, RECURRENT_FILE, TRANSFORMER_FILE,
    VAE_FILE,
};
use tabcf_core::guidance::GuidanceConfig;
use tabcf_core::metrics::CounterfactualReport;
use tabcf_core::nn::SamplingStrategy;
use tabcf_core::tabular::EncodedRow;
use tabcf_core::Error;

use crate::rows::{
    generation_view, parse_row_object, schema_view, ColumnIssue, GenerationView, RowError,
};

/// Largest counterfactual count a single request may ask for.
pub const MAX_COUNT: usize = 64;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelInfo {
    pub file: String,
    pub kind: ModelKind,
    pub schema_digest: String,
    pub architecture: JsonValue,
    pub metadata: Map<String, JsonValue>,
    pub parameter_blocks: usize,
}

/// Immutable state shared by every request handler.
pub struct ServiceState {
    pub bundle: ModelBundle,
    pub models: Vec<ModelInfo>,
    pub guidance: GuidanceConfig,
    pub baselines: BaselineDefaults,
    base_seed: u64,
    next_request: AtomicU64,
}

impl ServiceState {
    pub fn new(bundle: ModelBundle, models: Vec<ModelInfo>, cfg: &RunConfig) -> Self {
        Self {
            bundle,
            models,
            guidance: cfg.guidance.clone(),
            baselines: cfg.baselines.clone(),
            base_seed: cfg.seed,
            next_request: AtomicU64::new(0),
        }
    }

    /// Loads a bundle directory together with its checkpoint headers.
    pub fn load(dir: &Path, cfg: &RunConfig) -> tabcf_core::Result<Self> {
        let bundle = ModelBundle::load_dir(dir)?;
        let mut models = vec![];
        for file in [DIFFUSION_FILE, CLASSIFIER_FILE, RECURRENT_FILE, TRANSFORMER_FILE, VAE_FILE] {
            let path = dir.join(file);
            if !path.exists() {
                continue;
            }
            let bytes = std::fs::read(&path)?;
            let (header, _) = read_header(&bytes)?;
            models.push(ModelInfo {
                file: file.to_string(),
                kind: header.kind,
                schema_digest: header.schema_digest,
                architecture: header.architecture,
                metadata: header.metadata.into_iter().collect(),
                parameter_blocks: header.blocks.len(),
            });
        }
        Ok(Self::new(bundle, models, cfg))
    }

    /// Seed for a request that did not supply one.
    fn fresh_seed(&self) -> u64 {
        let id = self.next_request.fetch_add(1, Ordering::Relaxed);
        splitmix64(self.base_seed ^ splitmix64(id))
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub type Shared = Arc<ServiceState>;

#[derive(Debug)]
pub enum ApiError {
    Row(RowError),
    Invalid(String),
    Internal(String),
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_)
            | Error::SchemaMismatch { .. }
            | Error::UnknownValue { .. }
            | Error::Parse { .. }
            | Error::IdOutOfRange { .. } => Self::Invalid(e.to_string()),
            other => Self::Internal(other.to_string()),
        }
    }
}

impl From<RowError> for ApiError {
    fn from(e: RowError) -> Self {
        Self::Row(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            Self::Row(e) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({"error": e.to_string(), "issues": e.issues}),
            ),
            Self::Invalid(msg) => (StatusCode::UNPROCESSABLE_ENTITY, json!({"error": msg})),
            Self::Internal(msg) => (StatusCode::INTERNAL_SERVER_ERROR, json!({"error": msg})),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn field_issue(field: &str, message: String) -> ApiError {
    ApiError::Row(RowError {
        issues: vec![ColumnIssue {
            column: field.to_string(),
            message,
        }],
    })
}

fn class_of(state: &ServiceState, label: &str) -> Result<usize, ApiError> {
    state.bundle.class_id(label).map_err(|_| {
        field_issue(
            "desired_label",
            format!(
                "unknown class `{label}`; expected one of {}",
                state.bundle.table.classes.join(", ")
            ),
        )
    })
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/schema", get(schema))
        .route("/api/models", get(models))
        .route("/api/predict", post(predict))
        .route("/api/counterfactuals", post(counterfactuals))
        .route("/api/evaluate", post(evaluate))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(state: Shared, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

async fn schema(State(s): State<Shared>) -> Json<crate::rows::SchemaView> {
    Json(schema_view(&s.bundle.table))
}

#[derive(Serialize, Deserialize)]
pub struct Defaults {
    pub guidance: GuidanceConfig,
    pub baselines: BaselineDefaults,
}

#[derive(Serialize, Deserialize)]
pub struct ModelsView {
    pub schema_digest: String,
    pub diffusion_steps: usize,
    pub max_count: usize,
    pub methods: Vec<Method>,
    pub strategies: Vec<SamplingStrategy>,
    pub defaults: Defaults,
    pub models: Vec<ModelInfo>,
}

async fn models(State(s): State<Shared>) -> Json<ModelsView> {
    let methods = Method::ALL
        .into_iter()
        .filter(|m| *m != Method::DiceVae || s.bundle.vae.is_some())
        .collect();
    Json(ModelsView {
        schema_digest: s.bundle.digest(),
        diffusion_steps: s.bundle.diffusion.schedule.steps(),
        max_count: MAX_COUNT,
        methods,
        strategies: SamplingStrategy::ALL.to_vec(),
        defaults: Defaults {
            guidance: s.guidance.clone(),
            baselines: s.baselines.clone(),
        },
        models: s.models.clone(),
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub row: Map<String, JsonValue>,
}

#[derive(Serialize, Deserialize)]
pub struct ClassProbability {
    pub label: String,
    pub probability: f64,
}

#[derive(Serialize, Deserialize)]
pub struct PredictResponse {
    pub predicted: String,
    pub probabilities: Vec<ClassProbability>,
}

async fn predict(State(s): State<Shared>, Json(req): Json<PredictRequest>) -> ApiResult<PredictResponse> {
    let table = &s.bundle.table;
    let row = parse_row_object(&req.row, table)?;
    let z = s.bundle.diffusion.dict.embed_row(&row)?;
    let p = s.bundle.classifier.probabilities(&z)?;
    let probs = p.row(0);
    let best = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
    Ok(Json(PredictResponse {
        predicted: table.classes[best].clone(),
        probabilities: table
            .classes
            .iter()
            .zip(probs)
            .map(|(c, &p)| ClassProbability {
                label: c.clone(),
                probability: p,
            })
            .collect(),
    }))
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambdas {
    pub validity: Option<f64>,
    pub proximity: Option<f64>,
    pub diversity: Option<f64>,
    pub plausibility: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterfactualRequest {
    pub row: Map<String, JsonValue>,
    pub desired_label: String,
    #[serde(rename = "B")]
    pub count: Option<usize>,
    pub tau: Option<usize>,
    pub eta: Option<f64>,
    #[serde(default)]
    pub lambdas: Lambdas,
    pub strategy: Option<SamplingStrategy>,
    pub add_initial_noise: Option<bool>,
    #[serde(default)]
    pub method: Method,
    pub seed: Option<u64>,
}

/// Guidance and baseline settings for one request, from the service defaults.
fn request_configs(s: &ServiceState, req: &CounterfactualRequest, seed: u64) -> (GuidanceConfig, BaselineConfig) {
    let mut g = s.guidance.clone();
    let mut b = req
        .method
        .baseline()
        .map(|m| s.baselines.get(m).clone())
        .unwrap_or_else(|| s.baselines.dice.clone());
    g.seed = seed;
    b.seed = seed;
    if let Some(c) = req.count {
        g.count = c;
        b.count = c;
    }
    g.tau = req.tau.or(g.tau);
    g.eta = req.eta.unwrap_or(g.eta);
    g.strategy = req.strategy.unwrap_or(g.strategy);
    g.add_initial_noise = req.add_initial_noise.unwrap_or(g.add_initial_noise);
    let l = &req.lambdas;
    if let Some(v) = l.validity {
        g.lambda_validity = v;
        b.lambda_validity = v;
    }
    if let Some(v) = l.proximity {
        g.lambda_proximity = v;
        b.lambda_proximity = v;
    }
    if let Some(v) = l.diversity {
        g.lambda_diversity = v;
        b.lambda_diversity = v;
    }
    if let Some(v) = l.plausibility {
        g.lambda_plausibility = v;
        b.lambda_plausibility = v;
    }
    (g, b)
}

async fn counterfactuals(
    State(s): State<Shared>,
    Json(req): Json<CounterfactualRequest>,
) -> ApiResult<GenerationView> {
    let x = parse_row_object(&req.row, &s.bundle.table)?;
    let y = class_of(&s, &req.desired_label)?;
    if let Some(c) = req.count {
        if c == 0 || c > MAX_COUNT {
            return Err(field_issue("B", format!("must be in 1..={MAX_COUNT}")));
        }
    }
    if req.method == Method::DiceVae && s.bundle.vae.is_none() {
        return Err(field_issue("method", "no VAE checkpoint is loaded".into()));
    }
    let seed = req.seed.unwrap_or_else(|| s.fresh_seed());
    let (g, b) = request_configs(&s, &req, seed);
    let method = req.method;
    let view = blocking(move || {
        let set = s.bundle.generate(method, &x, y, &g, &b)?;
        let report = s.bundle.evaluate(method.name(), &set.encoded, &x, y)?;
        Ok(generation_view(&s.bundle.table, &x, y, &set, report)?)
    })
    .await?;
    Ok(Json(view))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRequest {
    pub rows: Vec<Map<String, JsonValue>>,
    pub original_row: Map<String, JsonValue>,
    pub desired_label: String,
    #[serde(default)]
    pub method: Option<String>,
}

async fn evaluate(
    State(s): State<Shared>,
    Json(req): Json<EvaluateRequest>,
) -> ApiResult<CounterfactualReport> {
    let table = &s.bundle.table;
    let x = parse_row_object(&req.original_row, table).map_err(|mut e| {
        for i in &mut e.issues {
            i.message = format!("original_row: {}", i.message);
        }
        e
    })?;
    let mut rows: Vec<EncodedRow> = vec![];
    let mut issues = vec![];
    for (k, r) in req.rows.iter().enumerate() {
        match parse_row_object(r, table) {
            Ok(e) => rows.push(e),
            Err(e) => issues.extend(e.issues.into_iter().map(|mut i| {
                i.message = format!("rows[{k}]: {}", i.message);
                i
            })),
        }
    }
    if !issues.is_empty() {
        return Err(RowError { issues }.into());
    }
    let y = class_of(&s, &req.desired_label)?;
    let method = req.method.unwrap_or_else(|| "submitted".into());
    let report = blocking(move || Ok(s.bundle.evaluate(&method, &rows, &x, y)?)).await?;
    Ok(Json(report))
}
