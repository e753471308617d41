//! Command-center HTTP API and event stream.
//!
//! Every request body and response is JSON. Operator commands are applied
//! by the engine at the current simulated time; their effects show up on
//! `/api/events` like any other trace record.

use std::collections::BTreeSet;
use std::convert::Infallible;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use citymesh::engine::{Engine, EngineSnapshot};
use citymesh::model::{GuidanceState, NodeId, SimTime};
use citymesh::scenario::Action;
use citymesh::sensing::AlertCause;

/// How often the pacing loop advances the engine.
pub const TICK: Duration = Duration::from_millis(100);
const EVENT_BUFFER: usize = 4096;

struct Shared {
    engine: Engine,
    sent: usize,
}

#[derive(Clone)]
pub struct AppState {
    shared: Arc<Mutex<Shared>>,
    events: broadcast::Sender<StreamItem>,
}

#[derive(Debug, Clone)]
struct StreamItem {
    kind: String,
    data: String,
}

impl AppState {
    pub fn new(engine: Engine) -> Self {
        let (events, _) = broadcast::channel(EVENT_BUFFER);
        Self {
            shared: Arc::new(Mutex::new(Shared { engine, sent: 0 })),
            events,
        }
    }

    fn lock(&self) -> MutexGuard<'_, Shared> {
        self.shared.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Advances the simulation to `until` and publishes new trace records.
    pub fn advance_to(&self, until: SimTime) {
        let mut shared = self.lock();
        shared.engine.run_until(until);
        self.publish(&mut shared);
    }

    pub fn now(&self) -> SimTime {
        self.lock().engine.now()
    }

    pub fn snapshot(&self) -> EngineSnapshot {
        self.lock().engine.snapshot()
    }

    pub fn apply(&self, action: Action) -> Result<SimTime, String> {
        let mut shared = self.lock();
        let result = shared.engine.command(action).map_err(|e| e.to_string());
        self.publish(&mut shared);
        result.map(|()| shared.engine.now())
    }

    fn publish(&self, shared: &mut Shared) {
        for r in &shared.engine.trace()[shared.sent..] {
            let value = serde_json::to_value(r).expect("trace records serialize");
            let kind = value["type"].as_str().unwrap_or("record").to_string();
            // no subscribers is fine
            let _ = self.events.send(StreamItem {
                kind,
                data: value.to_string(),
            });
        }
        shared.sent = shared.engine.trace().len();
    }

    fn subscribe(&self) -> broadcast::Receiver<StreamItem> {
        self.events.subscribe()
    }
}

#[derive(Debug, Serialize)]
struct Ack {
    ok: bool,
    time: SimTime,
}

#[derive(Debug, Serialize)]
struct Rejection {
    ok: bool,
    error: String,
}

fn reply(result: Result<SimTime, String>) -> Response {
    match result {
        Ok(time) => Json(Ack { ok: true, time }).into_response(),
        Err(error) => (
            StatusCode::BAD_REQUEST,
            Json(Rejection { ok: false, error }),
        )
            .into_response(),
    }
}

/// A node list given as a JSON array or one string of ids separated by
/// spaces or commas.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum Nodes {
    List(Vec<NodeId>),
    Text(String),
}

impl Nodes {
    fn resolve(&self) -> Result<Vec<NodeId>, String> {
        match self {
            Nodes::List(v) => Ok(v.clone()),
            Nodes::Text(s) => s
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<NodeId>().map_err(|e| e.to_string()))
                .collect(),
        }
    }

    fn set(&self) -> Result<BTreeSet<NodeId>, String> {
        Ok(self.resolve()?.into_iter().collect())
    }
}

#[derive(Debug, Deserialize)]
pub struct AlarmRequest {
    pub region: Nodes,
    #[serde(default)]
    pub cause: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct RevokeRequest {
    pub region: Nodes,
}

#[derive(Debug, Deserialize)]
pub struct GuidanceRequest {
    pub light: NodeId,
    pub state: String,
}

#[derive(Debug, Deserialize)]
pub struct FailureRequest {
    pub kind: String,
    #[serde(default)]
    pub target: Option<Nodes>,
}

#[derive(Debug, Deserialize)]
pub struct PairRequest {
    pub a: NodeId,
    pub b: NodeId,
    pub token_a: String,
    pub token_b: String,
}

impl AlarmRequest {
    fn action(&self) -> Result<Action, String> {
        let cause = match &self.cause {
            None => AlertCause::OperatorAlarm,
            Some(c) => AlertCause::from_name(c).ok_or_else(|| format!("unknown cause `{c}`"))?,
        };
        Ok(Action::IssueAlarm {
            region: self.region.set()?,
            cause,
        })
    }
}

impl FailureRequest {
    pub fn action(&self) -> Result<Action, String> {
        let nodes = match &self.target {
            Some(t) => t.resolve()?,
            None => Vec::new(),
        };
        let pair = || match nodes.as_slice() {
            [a, b] => Ok((*a, *b)),
            _ => Err(format!("`{}` needs exactly two target nodes", self.kind)),
        };
        let side = || {
            if nodes.is_empty() {
                Err(format!("`{}` needs at least one target node", self.kind))
            } else {
                Ok(nodes.iter().copied().collect::<BTreeSet<_>>())
            }
        };
        Ok(match self.kind.as_str() {
            "server-down" => Action::ServerDown,
            "server-up" => Action::ServerUp,
            "cut" | "link-cut" => {
                let (a, b) = pair()?;
                Action::LinkCut { a, b }
            }
            "restore" | "link-restore" => {
                let (a, b) = pair()?;
                Action::LinkRestore { a, b }
            }
            "partition" => Action::Partition { side: side()? },
            "heal" => Action::Heal { side: side()? },
            other => return Err(format!("unknown failure kind `{other}`")),
        })
    }
}

async fn snapshot(State(app): State<AppState>) -> Json<EngineSnapshot> {
    Json(app.snapshot())
}

async fn alarm(State(app): State<AppState>, Json(req): Json<AlarmRequest>) -> Response {
    reply(req.action().and_then(|a| app.apply(a)))
}

async fn revoke(State(app): State<AppState>, Json(req): Json<RevokeRequest>) -> Response {
    reply(
        req.region
            .set()
            .and_then(|region| app.apply(Action::RevokeAlarm { region })),
    )
}

async fn guidance(State(app): State<AppState>, Json(req): Json<GuidanceRequest>) -> Response {
    reply(
        GuidanceState::from_name(&req.state)
            .ok_or_else(|| format!("unknown guidance state `{}`", req.state))
            .and_then(|state| {
                app.apply(Action::SetGuidance {
                    light: req.light,
                    state,
                })
            }),
    )
}

async fn failure(State(app): State<AppState>, Json(req): Json<FailureRequest>) -> Response {
    reply(req.action().and_then(|a| app.apply(a)))
}

async fn pair(State(app): State<AppState>, Json(req): Json<PairRequest>) -> Response {
    reply(app.apply(Action::PairDevices {
        a: req.a,
        b: req.b,
        token_a: req.token_a,
        token_b: req.token_b,
    }))
}

async fn events(State(app): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = app.subscribe();
    let stream = stream::unfold(rx, |mut rx| async move {
        let event = match rx.recv().await {
            Ok(item) => Event::default().event(item.kind).data(item.data),
            Err(broadcast::error::RecvError::Lagged(n)) => Event::default()
                .event("lagged")
                .data(format!("{{\"type\":\"lagged\",\"skipped\":{n}}}")),
            Err(broadcast::error::RecvError::Closed) => return None,
        };
        Some((Ok(event), rx))
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

pub fn router(app: AppState) -> Router {
    Router::new()
        .route("/api/snapshot", get(snapshot))
        .route("/api/alarm", post(alarm))
        .route("/api/revoke", post(revoke))
        .route("/api/guidance", post(guidance))
        .route("/api/failure", post(failure))
        .route("/api/pair", post(pair))
        .route("/api/events", get(events))
        .with_state(app)
}

/// Maps wall-clock time to simulated time at `speed` and keeps the engine
/// caught up.
pub async fn pace(app: AppState, speed: f64) {
    let start = Instant::now();
    let base = app.now();
    let mut ticker = tokio::time::interval(TICK);
    loop {
        ticker.tick().await;
        let elapsed_ms = start.elapsed().as_secs_f64() * 1000.0 * speed;
        app.advance_to(base.plus_millis(elapsed_ms as u64));
    }
}

pub async fn serve(engine: Engine, port: u16, speed: f64) -> std::io::Result<()> {
    let name = engine.scenario().name.clone();
    let app = AppState::new(engine);
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    println!(
        "serving {name} on http://{} at {speed}x",
        listener.local_addr()?
    );
    tokio::spawn(pace(app.clone(), speed));
    axum::serve(listener, router(app)).await
}
