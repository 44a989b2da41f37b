//! HTTP feedback service: exposes the open feedback session of a running
//! orchestrator to human labelers and feeds their answers back.
//!
//! Endpoints (JSON, snake_case):
//!
//! - `GET /api/session`: run status snapshot, 404 when no run is attached
//! - `GET /api/queries/next`: lowest-index unanswered query, or `null`
//! - `GET /api/queries/{id}`: re-fetch any issued query
//! - `POST /api/queries/{id}/answer`: `{"choice": "prefer_1" | "prefer_2" | "skip"}`
//! - `GET /api/metrics?since=n`: line-delimited metrics records
//! - `GET /api/answers`: the answer log in arrival order

mod api;
mod hub;

pub use api::{router, Answer, Server};
pub use hub::{
    AnswerAck, AnswerError, AnswerRecord, FeedbackHub, HubObserver, HumanLabeler, PendingQuery, RunState, SegmentView,
    SessionStatus,
};
