//! HTTP query service: catalog browsing, ranked queries with explanations
//! and a health endpoint. All state is loaded once and shared read-only.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::SystemTime;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use espresso_core::corpus::{load_catalog, CorpusError};
use espresso_core::numerics::{load_model, NumericsError};
use espresso_core::retrieval::{build_index, query_response, RetrievalError, RetrievalIndex};
use espresso_core::text_encoder::{load_embedding_table, EmbeddingError, EncodeError};
use espresso_core::{Catalog, ProjectionModel, WordEmbeddingTable};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tower_http::cors::CorsLayer;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("catalog: {0}")]
    Catalog(#[from] CorpusError),
    #[error("model: {0}")]
    Model(#[from] NumericsError),
    #[error("embeddings: {0}")]
    Embeddings(#[from] EmbeddingError),
    #[error("index: {0}")]
    Index(#[from] RetrievalError),
    #[error("model expects {model}-dimensional embeddings but the table has {table}")]
    DimensionMismatch { model: usize, table: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything a request needs; never mutated after construction.
#[derive(Debug)]
pub struct ServiceState {
    pub catalog: Catalog,
    pub index: RetrievalIndex,
    pub model: ProjectionModel,
    pub table: WordEmbeddingTable,
    pub started_at: SystemTime,
    pub version: String,
}

impl ServiceState {
    pub fn new(catalog: Catalog, model: ProjectionModel, table: WordEmbeddingTable) -> Result<Self, ServiceError> {
        if table.dimension() != model.input_dim() {
            return Err(ServiceError::DimensionMismatch {
                model: model.input_dim(),
                table: table.dimension(),
            });
        }
        let index = build_index(&catalog, &model)?;
        Ok(Self {
            catalog,
            index,
            model,
            table,
            started_at: SystemTime::now(),
            version: VERSION.to_string(),
        })
    }

    pub fn load(catalog: impl AsRef<Path>, model: impl AsRef<Path>, embeddings: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let catalog = load_catalog(catalog)?;
        let model = load_model(model)?;
        let table = load_embedding_table(embeddings, Some(model.input_dim()))?;
        Self::new(catalog, model, table)
    }
}

/// `{code, message, details}` error envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub details: Value,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>, details: Value) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.to_string(),
                message: message.into(),
                details,
            },
        }
    }

    fn unknown_piece(piece_id: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "unknown_piece",
            format!("unknown piece {piece_id:?}"),
            json!({ "piece_id": piece_id }),
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<RetrievalError> for ApiError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::UnknownPiece(id) => Self::unknown_piece(&id),
            RetrievalError::Encode(EncodeError::AllOutOfVocabulary { oov_tokens }) => Self::new(
                StatusCode::BAD_REQUEST,
                "unencodable_query",
                "no word of the query is in the embedding vocabulary",
                json!({ "oov_tokens": oov_tokens }),
            ),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", other.to_string(), Value::Null),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub model_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceSummary {
    pub piece_id: String,
    pub title: String,
    pub performance_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceSummary {
    pub performance_id: String,
    pub artist_label: String,
    pub features: [f64; 8],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub piece_id: String,
    pub text: String,
}

type Shared = Arc<ServiceState>;

async fn health(State(state): State<Shared>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: state.version.clone(),
        model_fingerprint: state.model.config_fingerprint.clone(),
    })
}

async fn pieces(State(state): State<Shared>) -> Json<Vec<PieceSummary>> {
    Json(
        state
            .catalog
            .pieces()
            .iter()
            .map(|p| PieceSummary {
                piece_id: p.piece_id.clone(),
                title: p.title.clone(),
                performance_count: p.performance_ids.len(),
            })
            .collect(),
    )
}

async fn performances(
    State(state): State<Shared>,
    UrlPath(piece_id): UrlPath<String>,
) -> Result<Json<Vec<PerformanceSummary>>, ApiError> {
    if state.catalog.piece(&piece_id).is_none() {
        return Err(ApiError::unknown_piece(&piece_id));
    }
    Ok(Json(
        state
            .catalog
            .performances_of(&piece_id)
            .map(|p| PerformanceSummary {
                performance_id: p.performance_id.clone(),
                artist_label: p.artist_label.clone(),
                features: *p.features.values(),
            })
            .collect(),
    ))
}

async fn query(State(state): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let request: QueryRequest = serde_json::from_slice(&body).map_err(|e| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "malformed_body",
            format!("expected {{\"piece_id\": string, \"text\": string}}: {e}"),
            Value::Null,
        )
    })?;
    let response = query_response(&state.index, &state.model, &state.table, &request.piece_id, &request.text)?;
    Ok(Json(response).into_response())
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint", Value::Null)
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/pieces", get(pieces))
        .route("/pieces/{piece_id}/performances", get(performances))
        .route("/query", post(query))
        .fallback(not_found)
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Binds `0.0.0.0:port` and serves until ctrl-c.
pub async fn serve(state: Arc<ServiceState>, port: u16) -> std::io::Result<()> {
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
