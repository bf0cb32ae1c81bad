//! HTTP/JSON routes over [`Annotator`].

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;

use crate::error::{AnnotateError, Result};
use crate::service::{Annotator, CorrectionRequest};

type App = State<Arc<Annotator>>;

async fn blocking<T, F>(f: F) -> Result<T>
where
    F: FnOnce() -> Result<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| AnnotateError::Internal(e.to_string()))?
}

#[derive(Debug, Deserialize)]
struct EnqueueBody {
    manifest_path: String,
    #[serde(default)]
    checkpoint_run: Option<String>,
}

async fn enqueue(State(app): App, Json(body): Json<EnqueueBody>) -> Result<Json<serde_json::Value>> {
    let id = blocking(move || app.enqueue_batch(std::path::Path::new(&body.manifest_path), body.checkpoint_run.as_deref()))
        .await?;
    Ok(Json(json!({ "batch_id": id })))
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    annotator: String,
}

async fn next_task(State(app): App, Query(q): Query<NextQuery>) -> Result<Response> {
    match blocking(move || app.next_task(&q.annotator)).await? {
        Some(t) => Ok(Json(t).into_response()),
        None => Ok(StatusCode::NO_CONTENT.into_response()),
    }
}

async fn get_task(State(app): App, Path(id): Path<i64>) -> Result<Response> {
    Ok(Json(blocking(move || app.task(id)).await?).into_response())
}

async fn submit(State(app): App, Path(id): Path<i64>, Json(body): Json<CorrectionRequest>) -> Result<Response> {
    Ok(Json(blocking(move || app.submit(id, &body)).await?).into_response())
}

async fn corrections(State(app): App, Path(id): Path<i64>) -> Result<Response> {
    Ok(Json(blocking(move || app.corrections(id)).await?).into_response())
}

async fn image(State(app): App, Path(id): Path<i64>) -> Result<Response> {
    let (bytes, ty) = blocking(move || app.image(id)).await?;
    Ok(([(header::CONTENT_TYPE, ty)], bytes).into_response())
}

async fn metrics(State(app): App, Path(id): Path<i64>) -> Result<Response> {
    Ok(Json(blocking(move || app.batch_metrics(id)).await?).into_response())
}

#[derive(Debug, Deserialize)]
struct ReductionQuery {
    from: i64,
    to: i64,
}

async fn reduction(State(app): App, Query(q): Query<ReductionQuery>) -> Result<Response> {
    Ok(Json(blocking(move || app.reduction(q.from, q.to)).await?).into_response())
}

#[derive(Debug, Deserialize)]
struct PoolQuery {
    batches: String,
}

fn parse_ids(list: &str) -> Result<Vec<i64>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| AnnotateError::BadRequest(format!("bad batch id {s:?}")))
        })
        .collect()
}

async fn pool(State(app): App, Query(q): Query<PoolQuery>) -> Result<Response> {
    let ids = parse_ids(&q.batches)?;
    Ok(Json(blocking(move || app.pool(&ids)).await?).into_response())
}

#[derive(Debug, Deserialize)]
struct RetrainBody {
    pool: Vec<i64>,
}

async fn retrain(State(app): App, Json(body): Json<RetrainBody>) -> Result<Json<serde_json::Value>> {
    let id = blocking(move || app.retrain(&body.pool)).await?;
    Ok(Json(json!({ "run_id": id })))
}

async fn run(State(app): App, Path(id): Path<i64>) -> Result<Response> {
    Ok(Json(blocking(move || app.run(id)).await?).into_response())
}

pub fn router(app: Arc<Annotator>) -> Router {
    Router::new()
        .route("/batches", post(enqueue))
        .route("/batches/{id}/metrics", get(metrics))
        .route("/tasks/next", get(next_task))
        .route("/tasks/{id}", get(get_task))
        .route("/tasks/{id}/correction", post(submit))
        .route("/tasks/{id}/corrections", get(corrections))
        .route("/images/{id}", get(image))
        .route("/pool", get(pool))
        .route("/retrain", post(retrain))
        .route("/runs/{id}", get(run))
        .route("/metrics/reduction", get(reduction))
        .with_state(app)
}

/// Serves on an already bound listener until the task is dropped.
pub async fn serve_on(listener: TcpListener, app: Arc<Annotator>) -> std::io::Result<()> {
    axum::serve(listener, router(app)).await
}

pub async fn serve(addr: SocketAddr, app: Arc<Annotator>) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    log::info!("annotation service listening on http://{}", listener.local_addr()?);
    serve_on(listener, app).await
}
