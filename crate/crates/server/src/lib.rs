//! HTTP front end for an [`AnnotationStore`].
//!
//! Routes:
//!
//! - `GET /api/batch?task=plausibility&n=10&worker=w1` returns question cards
//! - `POST /api/vote` takes `{assertion_id, worker_id, task, value}`
//! - `GET /api/progress` reports per-task vote counts
//! - `GET /api/labels` exports the labels derived so far
//!
//! Rejected votes answer with a non-2xx status and `{"accepted": false,
//! "reason": "<code>"}` where the code is one of `unknown_assertion`,
//! `illegal_value`, `duplicate`, `not_served` or `unqualified`.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use intentkg::annotation::{AnnotationStore, LabelRecord, Progress, QuestionCard, Rejection, Task};
use serde::{Deserialize, Serialize};

/// Upper bound on cards per batch request.
pub const MAX_BATCH: usize = 100;

pub type SharedStore = Arc<Mutex<AnnotationStore>>;

#[derive(Debug, Deserialize)]
pub struct BatchQuery {
    pub task: Task,
    #[serde(default = "default_batch")]
    pub n: usize,
    pub worker: String,
}

fn default_batch() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteSubmission {
    pub assertion_id: String,
    pub worker_id: String,
    pub task: Task,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteAck {
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<Rejection>,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

fn rejection_status(r: Rejection) -> StatusCode {
    match r {
        Rejection::Duplicate | Rejection::NotServed => StatusCode::CONFLICT,
        Rejection::UnknownAssertion => StatusCode::NOT_FOUND,
        Rejection::IllegalValue => StatusCode::UNPROCESSABLE_ENTITY,
        Rejection::Unqualified => StatusCode::FORBIDDEN,
    }
}

fn lock(store: &SharedStore) -> MutexGuard<'_, AnnotationStore> {
    // a panic while holding the lock cannot leave a half-applied vote: the
    // log append happens before any in-memory mutation
    store.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

async fn batch(
    State(store): State<SharedStore>,
    Query(q): Query<BatchQuery>,
) -> Result<Json<Vec<QuestionCard>>, Response> {
    let n = q.n.min(MAX_BATCH);
    let cards = lock(&store).batch(q.task, n, &q.worker);
    match cards {
        Ok(cards) => {
            log::debug!("served {} {:?} cards to {}", cards.len(), q.task, q.worker);
            Ok(Json(cards))
        }
        Err(why) => Err((
            rejection_status(why),
            Json(VoteAck {
                accepted: false,
                reason: Some(why),
            }),
        )
            .into_response()),
    }
}

async fn vote(State(store): State<SharedStore>, Json(v): Json<VoteSubmission>) -> Response {
    let outcome = lock(&store).vote(&v.assertion_id, &v.worker_id, v.task, v.value);
    match outcome {
        Ok(Ok(())) => (
            StatusCode::OK,
            Json(VoteAck {
                accepted: true,
                reason: None,
            }),
        )
            .into_response(),
        Ok(Err(why)) => {
            log::info!("rejected vote {}/{}: {why}", v.assertion_id, v.worker_id);
            (
                rejection_status(why),
                Json(VoteAck {
                    accepted: false,
                    reason: Some(why),
                }),
            )
                .into_response()
        }
        Err(err) => {
            log::error!("failed to record vote: {err}");
            (
                StatusCode::INTERNAL_SERVER_ERROR,
                Json(ErrorBody {
                    error: err.to_string(),
                }),
            )
                .into_response()
        }
    }
}

async fn progress(State(store): State<SharedStore>) -> Json<Progress> {
    Json(lock(&store).progress())
}

async fn labels(State(store): State<SharedStore>) -> Json<Vec<LabelRecord>> {
    Json(lock(&store).labels())
}

pub fn router(store: SharedStore) -> Router {
    Router::new()
        .route("/api/batch", get(batch))
        .route("/api/vote", post(vote))
        .route("/api/progress", get(progress))
        .route("/api/labels", get(labels))
        .with_state(store)
}

/// Serves until `shutdown` resolves. Returns once in-flight requests finish.
pub async fn serve(
    store: SharedStore,
    addr: SocketAddr,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store))
        .with_graceful_shutdown(shutdown)
        .await
}
