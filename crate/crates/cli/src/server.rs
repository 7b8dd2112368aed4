//! Retrieval service. Holds only the encoder, its tokenizer and the index.

use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use uae_core::pipeline::DenseRetriever;
use uae_core::UaeError;

use crate::{hits, Hit};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveRequest {
    pub question: String,
    pub k: i64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub results: Vec<Hit>,
    pub latency_ms: f64,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

async fn healthz() -> &'static str {
    "ok"
}

async fn retrieve(State(retriever): State<Arc<DenseRetriever>>, body: Result<Json<RetrieveRequest>, JsonRejection>) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(rejection) => return error(StatusCode::BAD_REQUEST, rejection.body_text()),
    };
    if req.k < 1 {
        return error(StatusCode::BAD_REQUEST, format!("k must be at least 1, got {}", req.k));
    }
    let start = Instant::now();
    match retriever.retrieve(&req.question, req.k as usize) {
        Ok(results) => Json(RetrieveResponse {
            results: hits(results),
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        })
        .into_response(),
        Err(e @ UaeError::Encode(_)) => error(StatusCode::BAD_REQUEST, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

pub fn router(retriever: DenseRetriever) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/retrieve", post(retrieve))
        .with_state(Arc::new(retriever))
}

pub async fn serve(retriever: DenseRetriever, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    log::info!("serving on {}", listener.local_addr()?);
    axum::serve(listener, router(retriever))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .context("serving")
}
