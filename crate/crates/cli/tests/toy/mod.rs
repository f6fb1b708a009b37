//! Toy-corpus harness: deterministic mock generator and scorer services,
//! config writer, and a driver for the annotation service.

#![allow(dead_code)]

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::post;
use axum::{Json, Router};
use intentkg::annotation::QuestionCard;
use intentkg::generation::{GenerateRequest, GenerateResponse};
use intentkg::population::{ScoreRequest, ScoreResponse};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/toy")
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn theme(title: &str) -> usize {
    const TEA: [&str; 3] = ["Mug", "Kettle", "Tea"];
    const CAMP: [&str; 3] = ["Tent", "Lantern", "Sleeping"];
    if TEA.iter().any(|w| title.contains(w)) {
        1
    } else if CAMP.iter().any(|w| title.contains(w)) {
        2
    } else {
        0
    }
}

const USED_FOR: [[&str; 2]; 3] = [
    ["keeping warm in winter.", "walking in cold weather."],
    ["making hot tea.", "serving hot drinks."],
    ["camping in the woods.", "lighting a dark campsite."],
];
const CAUSE: [[&str; 2]; 3] = [
    ["stay warm outside.", "walk in the snow."],
    ["drink hot tea.", "relax with a warm drink."],
    ["go camping with friends.", "sleep under the stars."],
];
const HAS_A: [[&str; 2]; 3] = [
    ["a soft wool lining.", "a waterproof layer."],
    ["a ceramic handle.", "a large capacity."],
    ["a sturdy frame.", "a bright light."],
];

/// Three continuations per prompt: one with trailing chatter, one from the
/// other item's theme, and either a prompt echo or a fragment.
pub fn mock_generate(prompt: &str, n: usize) -> Vec<String> {
    let table = if prompt.ends_with("used for") {
        &USED_FOR
    } else if prompt.ends_with("wants to") {
        &CAUSE
    } else {
        &HAS_A
    };
    let body = prompt.trim_start_matches("A user bought ");
    let titles = body.split(" because ").next().unwrap_or("");
    let (t1, t2) = titles.split_once(" and ").unwrap_or((titles, titles));
    let h = fnv(prompt) as usize;
    let first = table[theme(t1)];
    let second = table[theme(t2)];
    let third = if h.is_multiple_of(4) {
        "ok".to_string()
    } else {
        format!("{prompt} {} They were on sale", first[(h + 1) % 2])
    };
    let texts = vec![
        format!("{} It was a good deal and", first[h % 2]),
        second[(h / 2) % 2].to_string(),
        third,
    ];
    texts.into_iter().cycle().take(n).collect()
}

/// Deterministic (plausibility, typicality) for a sentence.
pub fn mock_score(text: &str) -> (f64, f64) {
    let h = fnv(text);
    let a = (h % 1000) as f64 / 1000.0;
    let b = ((h / 1000) % 1000) as f64 / 1000.0;
    (0.35 + 0.6 * a, -0.2 + 1.1 * b)
}

#[derive(Clone, Default)]
struct Counters {
    generate: Arc<AtomicUsize>,
    score: Arc<AtomicUsize>,
}

async fn generate(State(c): State<Counters>, Json(req): Json<GenerateRequest>) -> impl IntoResponse {
    // the very first call fails so the client's retry path is exercised
    if c.generate.fetch_add(1, Ordering::SeqCst) == 0 {
        return (StatusCode::SERVICE_UNAVAILABLE, "warming up").into_response();
    }
    Json(GenerateResponse {
        texts: mock_generate(&req.prompt, req.n as usize),
    })
    .into_response()
}

async fn score(State(c): State<Counters>, Json(req): Json<ScoreRequest>) -> Json<ScoreResponse> {
    c.score.fetch_add(1, Ordering::SeqCst);
    let (p, t): (Vec<f64>, Vec<f64>) = req.texts.iter().map(|t| mock_score(t)).unzip();
    Json(ScoreResponse {
        plausibility: p,
        typicality: t,
    })
}

/// Mock generator and scorer on one local port, served from a background
/// thread for the life of the test process.
pub struct MockServices {
    pub base: String,
    counters: Counters,
}

impl MockServices {
    pub fn start() -> Self {
        let counters = Counters::default();
        let app = Router::new()
            .route("/v1/generate", post(generate))
            .route("/v1/score", post(score))
            .with_state(counters.clone());
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        listener.set_nonblocking(true).unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).unwrap();
                axum::serve(listener, app).await.unwrap();
            });
        });
        MockServices {
            base: format!("http://{addr}"),
            counters,
        }
    }

    pub fn generate_calls(&self) -> usize {
        self.counters.generate.load(Ordering::SeqCst)
    }

    pub fn score_calls(&self) -> usize {
        self.counters.score.load(Ordering::SeqCst)
    }
}

pub fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

pub struct ToyConfig {
    pub generation: String,
    pub population: String,
    pub annotate_port: u16,
}

impl ToyConfig {
    pub fn live(services: &MockServices) -> Self {
        ToyConfig {
            generation: format!("endpoint = \"{}\"\nretry_base_ms = 10\n", services.base),
            population: format!("scorer_endpoint = \"{}\"\n", services.base),
            annotate_port: free_port(),
        }
    }

    /// Offline variant: recorded transcript and score file.
    pub fn recorded(transcript: &Path, scores: &Path) -> Self {
        ToyConfig {
            generation: format!("replay = \"{}\"\n", transcript.display()),
            population: format!("scores = \"{}\"\n", scores.display()),
            annotate_port: free_port(),
        }
    }
}

/// Writes a config for the toy corpus into `dir` (work dir `dir/work`).
pub fn write_config(dir: &Path, toy: &ToyConfig) -> PathBuf {
    let f = fixture_dir().canonicalize().unwrap();
    let text = format!(
        r#"work_dir = "work"
seed = 7

[ingest]
items = "{items}"
cobuy = "{cobuy}"
n_pairs = 20
min_degree = 5

[generation]
relations = ["UsedFor", "Cause", "HasA"]
max_in_flight = 4
{generation}
[annotation]
bind = "127.0.0.1:{port}"
plausibility_sample = 30

[population]
plausibility_threshold = 0.5
acceptance_thresholds = [0.5, 0.6, 0.7, 0.8, 0.9]
{population}
[mining]
parses = ["{parses}"]

[conceptualize]
concepts = "{concepts}"

[embed]
dim = 16
epochs = 50

[receval]
interactions = "{interactions}"
runs = 5
thresholds = [0.6, 0.8]
"#,
        items = f.join("items.jsonl").display(),
        cobuy = f.join("cobuy.tsv").display(),
        parses = f.join("parses.conllu").display(),
        concepts = f.join("concepts.tsv").display(),
        interactions = f.join("interactions.tsv").display(),
        generation = toy.generation,
        population = toy.population,
        port = toy.annotate_port,
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn forge(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forge"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

pub fn forge_ok(config: &Path, args: &[&str]) -> Output {
    let out = forge(config, args);
    assert!(
        out.status.success(),
        "forge {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A running `forge annotate-serve`; stopped with SIGTERM on drop.
pub struct AnnotationService {
    child: Child,
    pub base: String,
}

impl AnnotationService {
    pub fn start(config: &Path, port: u16) -> Self {
        let child = Command::new(env!("CARGO_BIN_EXE_forge"))
            .args(["annotate-serve", "--config"])
            .arg(config)
            .env("RUST_LOG", "warn")
            .stdout(Stdio::null())
            .spawn()
            .unwrap();
        let addr = SocketAddr::from(([127, 0, 0, 1], port));
        let deadline = Instant::now() + Duration::from_secs(20);
        while TcpStream::connect(addr).is_err() {
            assert!(Instant::now() < deadline, "annotation service did not come up");
            std::thread::sleep(Duration::from_millis(20));
        }
        AnnotationService {
            child,
            base: format!("http://{addr}"),
        }
    }

    pub fn batch(&self, task: &str, n: usize, worker: &str) -> Vec<QuestionCard> {
        let url = format!("{}/api/batch?task={task}&n={n}&worker={worker}", self.base);
        ureq::get(&url).call().unwrap().body_mut().read_json().unwrap()
    }

    pub fn vote(&self, card: &QuestionCard, worker: &str, value: f64) {
        let body = serde_json::json!({
            "assertion_id": card.assertion_id,
            "worker_id": worker,
            "task": card.task,
            "value": value,
        });
        ureq::post(&format!("{}/api/vote", self.base)).send_json(&body).unwrap();
    }

    /// Sends SIGTERM and waits for a clean exit.
    pub fn stop(mut self) {
        self.terminate();
    }

    fn terminate(&mut self) {
        if let Ok(Some(_)) = self.child.try_wait() {
            return;
        }
        let pid = self.child.id().to_string();
        let sent = Command::new("kill").args(["-TERM", &pid]).status();
        if !sent.is_ok_and(|s| s.success()) {
            let _ = self.child.kill();
        }
        let status = self.child.wait().unwrap();
        assert!(status.success(), "annotation service exited with {status}");
    }
}

impl Drop for AnnotationService {
    fn drop(&mut self) {
        if !std::thread::panicking() {
            self.terminate();
        } else {
            let _ = self.child.kill();
        }
    }
}

/// Two-step annotation: three plausibility votes per sampled assertion, then
/// (after a restart) five typicality ratings per plausible one. Raters mostly
/// follow the mock scorer, with one contrarian per task.
pub fn annotate(config: &Path, port: u16) {
    let svc = AnnotationService::start(config, port);
    for (w, worker) in ["w1", "w2", "w3"].iter().enumerate() {
        for card in svc.batch("plausibility", 100, worker) {
            let (p, _) = mock_score(&card.sentence);
            let mut yes = p > 0.5;
            if w == 2 && fnv(&card.assertion_id).is_multiple_of(3) {
                yes = !yes;
            }
            svc.vote(&card, worker, if yes { 1.0 } else { 0.0 });
        }
    }
    svc.stop();

    let svc = AnnotationService::start(config, port);
    for (w, worker) in ["w1", "w2", "w3", "w4", "w5"].iter().enumerate() {
        for card in svc.batch("typicality", 100, worker) {
            let (_, t) = mock_score(&card.sentence);
            let t = if w == 4 { -t } else { t };
            let value = if t > 0.6 {
                1.0
            } else if t > 0.3 {
                0.5
            } else if t > 0.0 {
                0.0
            } else {
                -1.0
            };
            svc.vote(&card, worker, value);
        }
    }
    svc.stop();
}

pub const PIPELINE_AFTER_ANNOTATION: [&str; 7] = [
    "populate",
    "mine",
    "conceptualize",
    "assemble",
    "embed",
    "receval",
    "report",
];
