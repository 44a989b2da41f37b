//! HTTP routes and the background server.

use std::net::SocketAddr;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{Path, Query as UrlQuery, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use fsprl_core::preference::Label;

use crate::hub::{AnswerError, FeedbackHub};

/// Body of `POST /api/queries/{id}/answer`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Answer {
    pub choice: Label,
    pub timestamp: Option<f64>,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": msg.into() }))).into_response()
}

async fn session(State(hub): State<FeedbackHub>) -> Response {
    match hub.status() {
        Some(s) => Json(s).into_response(),
        None => error(StatusCode::NOT_FOUND, "no active run"),
    }
}

async fn next_query(State(hub): State<FeedbackHub>) -> Response {
    Json(hub.next_pending()).into_response()
}

async fn get_query(State(hub): State<FeedbackHub>, Path(id): Path<u64>) -> Response {
    match hub.query(id) {
        Some(q) => Json(q).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("query {id} was never issued")),
    }
}

async fn answer(State(hub): State<FeedbackHub>, Path(id): Path<u64>, body: Bytes) -> Response {
    let a: Answer = match serde_json::from_slice(&body) {
        Ok(a) => a,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed answer: {e}")),
    };
    match hub.answer(id, a.choice, a.timestamp) {
        Ok(ack) => Json(ack).into_response(),
        Err(e @ AnswerError::NotFound(_)) => error(StatusCode::NOT_FOUND, e.to_string()),
        Err(e @ AnswerError::Conflict(_)) => error(StatusCode::CONFLICT, e.to_string()),
        Err(e @ AnswerError::BadChoice(_)) => error(StatusCode::BAD_REQUEST, e.to_string()),
    }
}

#[derive(Debug, Deserialize)]
struct Since {
    #[serde(default)]
    since: usize,
}

/// Line-delimited metrics records; `?since=n` skips the first `n`.
async fn metrics(State(hub): State<FeedbackHub>, UrlQuery(q): UrlQuery<Since>) -> Response {
    let mut body = String::new();
    for r in hub.metrics_since(q.since) {
        body.push_str(&r.to_line());
        body.push('\n');
    }
    ([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response()
}

async fn answers(State(hub): State<FeedbackHub>) -> Response {
    Json(hub.answer_log()).into_response()
}

pub fn router(hub: FeedbackHub) -> Router {
    Router::new()
        .route("/api/session", get(session))
        .route("/api/queries/next", get(next_query))
        .route("/api/queries/{id}", get(get_query))
        .route("/api/queries/{id}/answer", post(answer))
        .route("/api/metrics", get(metrics))
        .route("/api/answers", get(answers))
        .with_state(hub)
}

/// A server running on its own thread; stopped on drop.
pub struct Server {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl Server {
    /// Binds `addr` before returning, so a busy port is reported here.
    pub fn spawn(hub: FeedbackHub, addr: SocketAddr) -> std::io::Result<Server> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(1)
            .enable_io()
            .build()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        log::error!("listener: {e}");
                        return;
                    }
                };
                let serve = axum::serve(listener, router(hub)).with_graceful_shutdown(async {
                    let _ = rx.await;
                });
                if let Err(e) = serve.await {
                    log::error!("feedback service stopped: {e}");
                }
            })
        });
        log::info!("feedback service listening on http://{addr}");
        Ok(Server {
            addr,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}
