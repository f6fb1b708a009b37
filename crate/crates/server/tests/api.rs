use std::collections::HashSet;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use intentkg::annotation::{AnnotationStore, CardSource, ItemView, QuestionCard, Task, VoteRecord};
use intentkg::generation::Relation;
use intentkg::jsonl;
use intentkg_server::{router, serve, SharedStore, VoteAck, VoteSubmission};
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tower::ServiceExt;

fn card(id: &str) -> CardSource {
    let view = |t: &str| ItemView {
        title: t.into(),
        category: "Clothing".into(),
        url: format!("https://shop.example/{t}"),
        image_urls: vec![],
    };
    CardSource {
        assertion_id: id.into(),
        relation: Relation::UsedFor,
        sentence: format!("A user bought coat and scarf because they are both used for {id}."),
        item1: view("coat"),
        item2: view("scarf"),
    }
}

fn store(n: usize) -> AnnotationStore {
    let ids: Vec<String> = (0..n).map(|i| format!("a{i:03}")).collect();
    let cards = ids.iter().map(|i| card(i)).collect();
    AnnotationStore::new(cards, ids.clone(), ids).unwrap()
}

fn shared(s: AnnotationStore) -> SharedStore {
    Arc::new(Mutex::new(s))
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let body = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Value::Null)
    };
    (status, body)
}

async fn batch(app: &Router, task: &str, n: usize, worker: &str) -> Vec<QuestionCard> {
    let uri = format!("/api/batch?task={task}&n={n}&worker={worker}");
    let (status, body) = call(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_value(body).unwrap()
}

async fn vote(app: &Router, id: &str, worker: &str, task: &str, value: f64) -> (StatusCode, VoteAck) {
    let body = json!({"assertion_id": id, "worker_id": worker, "task": task, "value": value});
    let req = Request::post("/api/vote")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (status, body) = call(app, req).await;
    (status, serde_json::from_value(body).unwrap())
}

#[tokio::test]
async fn fresh_corpus_serves_requested_cards() {
    let app = router(shared(store(5)));
    let cards = batch(&app, "plausibility", 2, "w1").await;
    assert_eq!(cards.len(), 2);
    assert_eq!(cards[0].legal_values, [1.0, 0.0]);
    assert_eq!(cards[0].item1.title, "coat");
    assert!(cards[0].sentence.starts_with("A user bought"));
    let cards = batch(&app, "typicality", 3, "w1").await;
    assert_eq!(cards[0].legal_values, [1.0, 0.5, 0.0, -1.0]);
}

#[tokio::test]
async fn exhausted_worker_gets_empty_batch() {
    let app = router(shared(store(3)));
    for c in batch(&app, "plausibility", 10, "w1").await {
        let (status, ack) = vote(&app, &c.assertion_id, "w1", "plausibility", 1.0).await;
        assert_eq!(status, StatusCode::OK);
        assert!(ack.accepted);
    }
    assert!(batch(&app, "plausibility", 10, "w1").await.is_empty());
}

#[tokio::test]
async fn interleaved_workers_never_see_a_card_twice() {
    let app = router(shared(store(12)));
    let mut seen: [HashSet<String>; 2] = Default::default();
    for round in 0..8 {
        for (w, worker) in ["w1", "w2"].iter().enumerate() {
            let cards = batch(&app, "plausibility", 2, worker).await;
            for c in cards {
                assert!(seen[w].insert(c.assertion_id.clone()), "{worker} got {} twice", c.assertion_id);
                // answer only every other round so unanswered cards stay outstanding
                if round % 2 == 0 {
                    vote(&app, &c.assertion_id, worker, "plausibility", 0.0).await;
                }
            }
        }
    }
    assert_eq!(seen[0].len(), 12);
    assert_eq!(seen[1].len(), 12);
}

#[tokio::test]
async fn rejections_carry_reason_codes() {
    let app = router(shared(store(2)));
    let cards = batch(&app, "plausibility", 1, "w1").await;
    let id = cards[0].assertion_id.clone();

    let (status, ack) = vote(&app, &id, "w1", "plausibility", 1.0).await;
    assert_eq!((status, ack.accepted), (StatusCode::OK, true));

    let (status, body) = {
        let body = json!({"assertion_id": id, "worker_id": "w1", "task": "plausibility", "value": 0.0});
        let req = Request::post("/api/vote")
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap();
        call(&app, req).await
    };
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["reason"], "duplicate");

    batch(&app, "typicality", 1, "w1").await;
    let (status, ack) = vote(&app, &id, "w1", "typicality", 0.7).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(serde_json::to_value(ack.reason).unwrap(), "illegal_value");

    let (status, ack) = vote(&app, "nope", "w1", "plausibility", 1.0).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(serde_json::to_value(ack.reason).unwrap(), "unknown_assertion");

    // a card that was never handed out to this worker
    let (status, ack) = vote(&app, "a001", "w2", "plausibility", 1.0).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(serde_json::to_value(ack.reason).unwrap(), "not_served");

    let (status, _) = call(
        &app,
        Request::get("/api/batch?task=novelty&n=1&worker=w1").body(Body::empty()).unwrap(),
    )
    .await;
    assert!(status.is_client_error());
}

#[tokio::test]
async fn unqualified_worker_is_refused() {
    let app = router(shared(store(2).with_workers(["w1".to_string()])));
    let uri = "/api/batch?task=plausibility&n=1&worker=intruder";
    let (status, body) = call(&app, Request::get(uri).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert_eq!(body["reason"], "unqualified");
}

#[tokio::test]
async fn progress_and_labels_follow_votes() {
    let app = router(shared(store(2)));
    for (w, value) in [("w1", 1.0), ("w2", 1.0), ("w3", 0.0)] {
        for c in batch(&app, "plausibility", 2, w).await {
            vote(&app, &c.assertion_id, w, "plausibility", value).await;
        }
    }
    let (_, progress) = call(&app, Request::get("/api/progress").body(Body::empty()).unwrap()).await;
    assert_eq!(progress["plausibility"]["votes"], 6);
    assert_eq!(progress["plausibility"]["complete"], 2);
    assert_eq!(progress["typicality"]["votes"], 0);
    let (_, labels) = call(&app, Request::get("/api/labels").body(Body::empty()).unwrap()).await;
    assert_eq!(labels.as_array().unwrap().len(), 2);
    assert_eq!(labels[0]["plausibility_label"], "plausible");
}

async fn raw_http(addr: SocketAddr, method: &str, path: &str, body: &str) -> (u16, String) {
    let mut stream = TcpStream::connect(addr).await.unwrap();
    let req = format!(
        "{method} {path} HTTP/1.1\r\nhost: localhost\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(req.as_bytes()).await.unwrap();
    let mut out = String::new();
    stream.read_to_string(&mut out).await.unwrap();
    let status = out[9..12].parse().unwrap();
    let body = out.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    (status, body)
}

/// Simulated client session over real sockets: 50 answers, one connection
/// cut halfway through the body and one cut right after sending, each
/// followed by a retry.
#[tokio::test]
async fn fifty_answer_session_keeps_vote_log_exact() {
    let dir = tempfile::tempdir().unwrap();
    let log_path = dir.path().join("votes.jsonl");
    let store = shared(store(30).with_log(&log_path).unwrap());
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let server = tokio::spawn(serve(store.clone(), addr, async {
        rx.await.ok();
    }));
    // wait for the listener
    for _ in 0..100 {
        if TcpStream::connect(addr).await.is_ok() {
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(10)).await;
    }

    let mut answered = 0;
    let mut submissions = Vec::new();
    'outer: for worker in ["w1", "w2"] {
        loop {
            let (status, body) =
                raw_http(addr, "GET", &format!("/api/batch?task=plausibility&n=5&worker={worker}"), "").await;
            assert_eq!(status, 200);
            let cards: Vec<QuestionCard> = serde_json::from_str(&body).unwrap();
            if cards.is_empty() {
                break;
            }
            for c in cards {
                let sub = VoteSubmission {
                    assertion_id: c.assertion_id.clone(),
                    worker_id: worker.into(),
                    task: Task::Plausibility,
                    value: if answered % 3 == 0 { 0.0 } else { 1.0 },
                };
                let payload = serde_json::to_string(&sub).unwrap();
                if answered == 17 {
                    // connection drops with half the body sent
                    let mut s = TcpStream::connect(addr).await.unwrap();
                    let head = format!(
                        "POST /api/vote HTTP/1.1\r\nhost: localhost\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n",
                        payload.len()
                    );
                    s.write_all(head.as_bytes()).await.unwrap();
                    s.write_all(&payload.as_bytes()[..payload.len() / 2]).await.unwrap();
                    drop(s);
                }
                if answered == 31 {
                    // full request sent, client gone before reading the ack
                    let mut s = TcpStream::connect(addr).await.unwrap();
                    let req = format!(
                        "POST /api/vote HTTP/1.1\r\nhost: localhost\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{payload}",
                        payload.len()
                    );
                    s.write_all(req.as_bytes()).await.unwrap();
                    s.shutdown().await.unwrap();
                    let mut sink = Vec::new();
                    let _ = s.read_to_end(&mut sink).await;
                }
                let (status, body) = raw_http(addr, "POST", "/api/vote", &payload).await;
                let ack: VoteAck = serde_json::from_str(&body).unwrap();
                // the retry after a delivered-but-unacknowledged submit is a duplicate
                assert!(status == 200 || (answered == 31 && status == 409), "{status} {body}");
                assert!(ack.accepted || answered == 31);
                submissions.push(sub);
                answered += 1;
                if answered == 50 {
                    break 'outer;
                }
            }
        }
    }
    assert_eq!(answered, 50);
    tx.send(()).unwrap();
    server.await.unwrap().unwrap();

    let logged: Vec<VoteRecord> = jsonl::read_strict(&log_path).unwrap();
    assert_eq!(logged.len(), 50);
    let keys: HashSet<(String, String)> =
        logged.iter().map(|v| (v.assertion_id.clone(), v.worker_id.clone())).collect();
    assert_eq!(keys.len(), 50);
    for sub in &submissions {
        let rec = logged
            .iter()
            .find(|v| v.assertion_id == sub.assertion_id && v.worker_id == sub.worker_id)
            .unwrap();
        assert_eq!(rec.value, sub.value);
    }
    // the log alone reconstructs the same state
    let cards = (0..30).map(|i| card(&format!("a{i:03}"))).collect();
    let ids: Vec<String> = (0..30).map(|i| format!("a{i:03}")).collect();
    let replayed = AnnotationStore::new(cards, ids.clone(), ids).unwrap().with_log(&log_path).unwrap();
    assert_eq!(replayed.labels(), store.lock().unwrap().labels());
}
