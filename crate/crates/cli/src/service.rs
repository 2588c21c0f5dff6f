//! HTTP inference service over frozen parameters.
//!
//! `POST /v1/judge` runs the decision layer on a precomputed embedding and
//! vote vector, `POST /v1/match` runs the full retrieval and judging front end
//! for a text query, and `GET /healthz` reports the loaded model.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use ral2m_core::energy::{content_hash, params_from_bytes};
use ral2m_core::{infer, EnsembleParams, InferenceConfig};
use ral2m_pipeline::{JudgeFailure, Pipeline};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug)]
pub struct LoadedModel {
    pub params: EnsembleParams,
    /// Hex SHA-256 of the parameter file.
    pub hash: String,
}

impl LoadedModel {
    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(LoadedModel {
            params: params_from_bytes(&bytes, path)?,
            hash: content_hash(&bytes),
        })
    }
}

#[derive(Debug)]
pub struct ServiceState {
    pub model: Option<LoadedModel>,
    pub inference: InferenceConfig,
    pub pipeline: Option<Pipeline>,
    started: Instant,
    requests: AtomicU64,
}

impl ServiceState {
    pub fn new(model: Option<LoadedModel>, inference: InferenceConfig, pipeline: Option<Pipeline>) -> Self {
        ServiceState {
            model,
            inference,
            pipeline,
            started: Instant::now(),
            requests: AtomicU64::new(0),
        }
    }

    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }
}

/// Seed for a request without an explicit `seed`: the first eight bytes of
/// the SHA-256 of the raw body, little-endian.
pub fn request_seed(body: &[u8]) -> u64 {
    let digest = Sha256::digest(body);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JudgeResponse {
    pub p_hat: f64,
    pub decision: u8,
    pub model_hash: String,
    pub posterior_mu: Vec<f64>,
}

/// The library call behind `/v1/judge`.
pub fn judge_with_seed(
    model: &LoadedModel,
    inference: &InferenceConfig,
    embedding: &[f64],
    votes: &[u8],
    seed: u64,
) -> ral2m_core::Result<JudgeResponse> {
    let cfg = InferenceConfig { seed, ..*inference };
    let pred = infer(&model.params, embedding, votes, &cfg)?;
    Ok(JudgeResponse {
        p_hat: pred.p_hat,
        decision: pred.decision,
        model_hash: model.hash.clone(),
        posterior_mu: pred.posterior.mu,
    })
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    fn unavailable(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::SERVICE_UNAVAILABLE,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        json_response(self.status, &serde_json::json!({ "error": self.message }))
    }
}

fn json_response(status: StatusCode, body: &impl Serialize) -> Response {
    match serde_json::to_vec(body) {
        Ok(bytes) => (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

fn parse_object(body: &[u8]) -> Result<serde_json::Map<String, Value>, ApiError> {
    match serde_json::from_slice::<Value>(body) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ApiError::bad_request("body: expected a JSON object")),
        Err(e) => Err(ApiError::bad_request(format!("body: {e}"))),
    }
}

fn field_embedding(m: &serde_json::Map<String, Value>, d: usize) -> Result<Vec<f64>, ApiError> {
    let arr = m
        .get("embedding")
        .and_then(Value::as_array)
        .ok_or_else(|| ApiError::bad_request("embedding: missing or not an array"))?;
    let e: Vec<f64> = arr
        .iter()
        .map(|x| x.as_f64().filter(|f| f.is_finite()))
        .collect::<Option<_>>()
        .ok_or_else(|| ApiError::bad_request("embedding: entries must be finite numbers"))?;
    if e.len() != d {
        return Err(ApiError::bad_request(format!(
            "embedding: expected {d} values, got {}",
            e.len()
        )));
    }
    Ok(e)
}

fn field_votes(m: &serde_json::Map<String, Value>, k: usize) -> Result<Vec<u8>, ApiError> {
    let arr = m
        .get("votes")
        .and_then(Value::as_array)
        .ok_or_else(|| ApiError::bad_request("votes: missing or not an array"))?;
    let s: Vec<u8> = arr
        .iter()
        .map(|x| x.as_u64().filter(|v| *v <= 1).map(|v| v as u8))
        .collect::<Option<_>>()
        .ok_or_else(|| ApiError::bad_request("votes: entries must be 0 or 1"))?;
    if s.len() != k {
        return Err(ApiError::bad_request(format!(
            "votes: expected {k} entries, got {}",
            s.len()
        )));
    }
    Ok(s)
}

fn field_seed(m: &serde_json::Map<String, Value>, body: &[u8]) -> Result<u64, ApiError> {
    match m.get("seed") {
        None | Some(Value::Null) => Ok(request_seed(body)),
        Some(v) => v
            .as_u64()
            .ok_or_else(|| ApiError::bad_request("seed: expected a non-negative integer")),
    }
}

fn loaded(state: &ServiceState) -> Result<&LoadedModel, ApiError> {
    state
        .model
        .as_ref()
        .ok_or_else(|| ApiError::unavailable("no model loaded"))
}

async fn judge(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Response, ApiError> {
    state.requests.fetch_add(1, Ordering::Relaxed);
    let model = loaded(&state)?;
    let m = parse_object(&body)?;
    let embedding = field_embedding(&m, model.params.d())?;
    let votes = field_votes(&m, model.params.k())?;
    let seed = field_seed(&m, &body)?;
    let resp = judge_with_seed(model, &state.inference, &embedding, &votes, seed)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(json_response(StatusCode::OK, &resp))
}

#[derive(Debug, Serialize)]
struct Candidate<'a> {
    id: &'a str,
    question: &'a str,
    answer: &'a str,
}

#[derive(Debug, Serialize)]
struct MatchResponse<'a> {
    query: &'a str,
    candidate: Candidate<'a>,
    score: f64,
    threshold_decision: u8,
    votes: &'a [u8],
    failures: &'a [JudgeFailure],
    p_hat: f64,
    decision: u8,
    posterior_mu: &'a [f64],
    /// The verified answer when accepted, otherwise null (safe fallback).
    response: Option<&'a str>,
    model_hash: &'a str,
}

async fn match_query(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Response, ApiError> {
    state.requests.fetch_add(1, Ordering::Relaxed);
    let model = loaded(&state)?;
    let pipeline = state
        .pipeline
        .as_ref()
        .ok_or_else(|| ApiError::unavailable("matching pipeline not configured"))?;
    let m = parse_object(&body)?;
    let query = m
        .get("query")
        .and_then(Value::as_str)
        .filter(|q| !q.trim().is_empty())
        .ok_or_else(|| ApiError::bad_request("query: missing or empty"))?;
    let seed = field_seed(&m, &body)?;
    let outcome = pipeline.run(query).await.map_err(|e| ApiError {
        status: StatusCode::BAD_GATEWAY,
        message: e.to_string(),
    })?;
    let resp = judge_with_seed(model, &state.inference, &outcome.embedding, &outcome.votes, seed)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let body = MatchResponse {
        query,
        candidate: Candidate {
            id: &outcome.entry.id,
            question: &outcome.entry.question,
            answer: &outcome.entry.answer,
        },
        score: outcome.score,
        threshold_decision: outcome.threshold_decision,
        votes: &outcome.votes,
        failures: &outcome.failures,
        p_hat: resp.p_hat,
        decision: resp.decision,
        posterior_mu: &resp.posterior_mu,
        response: (resp.decision == 1).then_some(outcome.entry.answer.as_str()),
        model_hash: &model.hash,
    };
    Ok(json_response(StatusCode::OK, &body))
}

async fn health(State(state): State<Arc<ServiceState>>) -> Response {
    let uptime_s = state.started.elapsed().as_secs_f64();
    match &state.model {
        Some(m) => json_response(
            StatusCode::OK,
            &serde_json::json!({
                "status": "ok",
                "uptime_s": uptime_s,
                "model_hash": m.hash,
                "d": m.params.d(),
                "k": m.params.k(),
                "requests": state.request_count(),
            }),
        ),
        None => json_response(
            StatusCode::SERVICE_UNAVAILABLE,
            &serde_json::json!({ "status": "no model loaded", "uptime_s": uptime_s }),
        ),
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/v1/judge", post(judge))
        .route("/v1/match", post(match_query))
        .route("/healthz", get(health))
        .with_state(state)
}
