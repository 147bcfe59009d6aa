//! HTTP routes.
//!
//! | method | path | success |
//! |---|---|---|
//! | POST | `/sessions` | 201 |
//! | POST | `/sessions/{id}/classes` | 201 |
//! | POST | `/sessions/{id}/annotations` | 200 |
//! | POST | `/sessions/{id}/finetune` | 202 |
//! | GET | `/sessions/{id}/predictions/{version}` | 200 |
//! | GET | `/jobs/{id}` | 200 |
//!
//! Errors are `{"error": "..."}` with 404, 409, 422 or 500.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use incseg::data::{decode_image, default_palette, encode_mask_png};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::rle::{self, LegendEntry, RleMask};
use crate::state::{AppState, PointIn, ServiceError};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body)
        .map_err(|e| ServiceError::Unprocessable(format!("request body: {e}")))
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_body_bytes;
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/classes", post(register_class))
        .route("/sessions/{id}/annotations", post(add_annotations))
        .route("/sessions/{id}/finetune", post(start_finetune))
        .route("/sessions/{id}/predictions/{version}", get(get_prediction))
        .route("/jobs/{id}", get(get_job))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    /// Base64 of a PNG or TIFF file.
    pub image: String,
    /// File name inside the configured checkpoint directory.
    pub checkpoint: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub height: usize,
    pub width: usize,
    pub classes: Vec<LegendEntry>,
    pub prediction_version: usize,
    pub model_hash: String,
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<SessionCreated>)> {
    let req: CreateSessionRequest = parse(&body)?;
    let bytes = B64
        .decode(req.image.trim())
        .map_err(|e| ServiceError::Unprocessable(format!("image is not valid base64: {e}")))?;
    let image =
        decode_image(&bytes).map_err(|e| ServiceError::Unprocessable(format!("image: {e}")))?;
    let st = state.clone();
    let session = tokio::task::spawn_blocking(move || st.create_session(image, &req.checkpoint))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    let s = session
        .lock()
        .unwrap_or_else(std::sync::PoisonError::into_inner);
    let created = SessionCreated {
        session_id: s.id.clone(),
        height: s.image.height(),
        width: s.image.width(),
        classes: rle::legend(s.model.label_space()),
        prediction_version: 0,
        model_hash: s.predictions[0].model_hash.clone(),
    };
    Ok((StatusCode::CREATED, Json(created)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterClassRequest {
    pub name: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassRegistered {
    pub class_id: u8,
    pub name: String,
    pub classes: Vec<LegendEntry>,
    pub memory_hash: String,
}

async fn register_class(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<ClassRegistered>)> {
    let req: RegisterClassRequest = parse(&body)?;
    let (class_id, space, memory_hash) = state.register_class(&id, &req.name)?;
    Ok((
        StatusCode::CREATED,
        Json(ClassRegistered {
            class_id,
            name: space.name(class_id).unwrap_or_default().to_owned(),
            classes: rle::legend(&space),
            memory_hash,
        }),
    ))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationsRequest {
    pub points: Vec<PointIn>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnnotationsAdded {
    pub added: usize,
    pub total: usize,
}

async fn add_annotations(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<AnnotationsAdded>> {
    let req: AnnotationsRequest = parse(&body)?;
    let (added, total) = state.add_annotations(&id, &req.points)?;
    Ok(Json(AnnotationsAdded { added, total }))
}

async fn start_finetune(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let overrides = if body.iter().all(u8::is_ascii_whitespace) {
        json!({})
    } else {
        parse(&body)?
    };
    let status = state.start_finetune(&id, overrides)?;
    Ok((StatusCode::ACCEPTED, Json(status)).into_response())
}

#[derive(Debug, Default, Deserialize)]
pub struct PredictionQuery {
    /// `png` adds a base64 palette raster next to the run-length mask.
    pub format: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionResponse {
    pub session_id: String,
    pub version: usize,
    pub source: String,
    pub model_hash: String,
    pub memory_hash: Option<String>,
    /// Whether the memory weights still hash to `memory_hash`.
    pub memory_verified: Option<bool>,
    pub mask: RleMask,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub png: Option<String>,
}

async fn get_prediction(
    State(state): State<Arc<AppState>>,
    Path((id, version)): Path<(String, usize)>,
    Query(query): Query<PredictionQuery>,
) -> ApiResult<Json<PredictionResponse>> {
    let (pred, memory_hash) = state.prediction(&id, version)?;
    let png = match query.format.as_deref() {
        None | Some("rle") => None,
        Some("png") => {
            let palette = default_palette(pred.label_space.num_classes());
            let bytes = encode_mask_png(&pred.mask, &palette)
                .map_err(|e| ServiceError::Internal(e.to_string()))?;
            Some(B64.encode(bytes))
        }
        Some(other) => {
            return Err(ServiceError::Unprocessable(format!(
                "unknown format {other:?}"
            )))
        }
    };
    let st = state.clone();
    let sid = id.clone();
    let memory_verified = tokio::task::spawn_blocking(move || st.verify_memory(&sid))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(Json(PredictionResponse {
        session_id: id,
        version: pred.version,
        source: pred.source.clone(),
        model_hash: pred.model_hash.clone(),
        memory_hash,
        memory_verified,
        mask: rle::encode(&pred.mask, rle::legend(&pred.label_space)),
        png,
    }))
}

async fn get_job(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    Ok(Json(state.job(&id)?).into_response())
}
