//! Deterministic mock chat-completions endpoint.
//!
//! Requests are matched by the SHA-256 of their body. Each match key owns an
//! ordered list of steps; every request consumes one step and the last step
//! repeats once the list is used up.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::client::{completion_body, ExchangeRecord, HttpReply, Transport};
use crate::digest::sha256_hex;
use crate::exec::Exec;
use crate::ledger::{read_ledger, LedgerError, RecordKind};

#[derive(Debug, thiserror::Error)]
pub enum SimulatorError {
    #[error("cannot bind {addr}: {message}")]
    Bind { addr: String, message: String },
    #[error("failed to read script {path}: {message}")]
    Script { path: String, message: String },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

fn default_status() -> u16 {
    200
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn is_zero(n: &u64) -> bool {
    *n == 0
}

/// One scripted reaction. `content` is wrapped in a completion envelope;
/// `body` is sent as is. A `drop` step never answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    #[serde(default = "default_status")]
    pub status: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<String>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub delay_ms: u64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub drop: bool,
}

impl Step {
    pub fn content(text: &str) -> Self {
        Step { status: 200, content: Some(text.to_owned()), body: None, delay_ms: 0, drop: false }
    }

    pub fn status(status: u16) -> Self {
        Step { status, content: None, body: None, delay_ms: 0, drop: false }
    }

    pub fn body(status: u16, body: &str) -> Self {
        Step { status, content: None, body: Some(body.to_owned()), delay_ms: 0, drop: false }
    }

    pub fn dropped() -> Self {
        Step { drop: true, ..Step::status(0) }
    }

    pub fn delayed(mut self, ms: u64) -> Self {
        self.delay_ms = ms;
        self
    }

    fn response_body(&self) -> String {
        match (&self.body, &self.content) {
            (Some(b), _) => b.clone(),
            (None, Some(c)) => completion_body(c),
            (None, None) => String::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseScript {
    /// Request body digest to steps.
    #[serde(default)]
    pub entries: BTreeMap<String, Vec<Step>>,
    /// Steps for requests matching no entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub any: Option<Vec<Step>>,
}

impl ResponseScript {
    /// Answers every request with the same content.
    pub fn always(content: &str) -> Self {
        ResponseScript { entries: BTreeMap::new(), any: Some(vec![Step::content(content)]) }
    }

    pub fn with_entry(mut self, request_body: &str, steps: Vec<Step>) -> Self {
        self.entries.insert(sha256_hex(request_body.as_bytes()), steps);
        self
    }

    /// Loads a JSON script, or a ledger whose exchanges become the script.
    pub fn load(path: &Path) -> Result<Self, SimulatorError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimulatorError::Script {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if text.starts_with(r#"{"format":"fairproof-ledger""#) {
            return script_from_ledger(path);
        }
        serde_json::from_str(&text).map_err(|e| SimulatorError::Script {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Rebuilds the responses a ledger recorded: every attempt of every
/// exchange becomes one step. Exchanges sharing a request digest are
/// concatenated in sequence order.
pub fn script_from_ledger(path: &Path) -> Result<ResponseScript, SimulatorError> {
    let records = read_ledger(path, Exec::default())?;
    let mut script = ResponseScript::default();
    for record in records.iter().filter(|r| r.kind == RecordKind::Exchange) {
        let exchange: ExchangeRecord = record.payload_as()?;
        let steps = script.entries.entry(exchange.request_body_digest.clone()).or_default();
        let last = exchange.attempt_statuses.len().saturating_sub(1);
        for (i, &status) in exchange.attempt_statuses.iter().enumerate() {
            let step = match status {
                0 => Step::dropped(),
                s if i == last => Step::body(s, exchange.response_body.as_deref().unwrap_or("")),
                s => Step::status(s),
            };
            steps.push(step);
        }
    }
    Ok(script)
}

/// What the script says to do with one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reaction {
    Reply { status: u16, body: String, delay: Duration },
    Drop { delay: Duration },
    NotFound { body: String },
}

/// Script plus synchronized step cursors and concurrency instrumentation.
#[derive(Debug, Default)]
pub struct ScriptState {
    script: ResponseScript,
    cursors: Mutex<BTreeMap<String, usize>>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    served: AtomicUsize,
}

impl ScriptState {
    pub fn new(script: ResponseScript) -> Self {
        ScriptState { script, ..Default::default() }
    }

    pub fn react(&self, body: &[u8]) -> Reaction {
        self.served.fetch_add(1, Ordering::SeqCst);
        let digest = sha256_hex(body);
        let (key, steps) = match self.script.entries.get(&digest) {
            Some(steps) => (digest.clone(), steps),
            None => match &self.script.any {
                Some(steps) => ("*".to_owned(), steps),
                None => {
                    return Reaction::NotFound { body: format!("no scripted response for request digest {digest}\n") };
                }
            },
        };
        if steps.is_empty() {
            return Reaction::NotFound { body: format!("script entry {key} has no steps\n") };
        }
        let index = {
            let mut cursors = self.cursors.lock().expect("cursor lock");
            let c = cursors.entry(key).or_insert(0);
            let i = (*c).min(steps.len() - 1);
            *c += 1;
            i
        };
        let step = &steps[index];
        let delay = Duration::from_millis(step.delay_ms);
        if step.drop {
            Reaction::Drop { delay }
        } else {
            Reaction::Reply { status: step.status, body: step.response_body(), delay }
        }
    }

    fn enter(&self) {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    fn leave(&self) {
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
    }

    /// Highest number of requests handled at once since the last reset.
    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn requests_served(&self) -> usize {
        self.served.load(Ordering::SeqCst)
    }

    /// Rewinds every cursor and clears the counters.
    pub fn reset(&self) {
        self.cursors.lock().expect("cursor lock").clear();
        self.peak.store(0, Ordering::SeqCst);
        self.served.store(0, Ordering::SeqCst);
    }
}

/// Serves a script without a socket. Dropped steps surface as transport
/// errors after their delay.
pub struct ScriptTransport {
    state: Arc<ScriptState>,
}

impl ScriptTransport {
    pub fn new(script: ResponseScript) -> Self {
        ScriptTransport { state: Arc::new(ScriptState::new(script)) }
    }

    pub fn state(&self) -> &ScriptState {
        &self.state
    }
}

impl Transport for ScriptTransport {
    fn post(&self, _url: &str, body: &str, _api_key: Option<&str>) -> Result<HttpReply, String> {
        self.state.enter();
        let reaction = self.state.react(body.as_bytes());
        let out = match reaction {
            Reaction::Reply { status, body, delay } => {
                std::thread::sleep(delay);
                Ok(HttpReply { status, body })
            }
            Reaction::Drop { delay } => {
                std::thread::sleep(delay);
                Err("no response".to_owned())
            }
            Reaction::NotFound { body } => Ok(HttpReply { status: 404, body }),
        };
        self.state.leave();
        out
    }
}

struct Shutdown {
    flag: AtomicBool,
    lock: Mutex<()>,
    signal: Condvar,
}

impl Shutdown {
    fn wait(&self, d: Duration) {
        let guard = self.lock.lock().expect("shutdown lock");
        let _ = self
            .signal
            .wait_timeout_while(guard, d, |_| !self.flag.load(Ordering::SeqCst))
            .expect("shutdown lock");
    }
}

/// A running mock endpoint. Dropping the handle shuts it down.
pub struct SimulatorHandle {
    addr: SocketAddr,
    state: Arc<ScriptState>,
    server: Arc<tiny_http::Server>,
    shutdown: Arc<Shutdown>,
    acceptor: Mutex<Option<JoinHandle<()>>>,
}

/// Starts serving `script` on `bind` (use port 0 for an ephemeral port).
pub fn serve(script: ResponseScript, bind: &str) -> Result<SimulatorHandle, SimulatorError> {
    let server = tiny_http::Server::http(bind).map_err(|e| SimulatorError::Bind {
        addr: bind.to_owned(),
        message: e.to_string(),
    })?;
    let addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| SimulatorError::Bind { addr: bind.to_owned(), message: "not an IP listener".into() })?;
    let server = Arc::new(server);
    let state = Arc::new(ScriptState::new(script));
    let shutdown = Arc::new(Shutdown { flag: AtomicBool::new(false), lock: Mutex::new(()), signal: Condvar::new() });

    let acceptor = {
        let (server, state, shutdown) = (server.clone(), state.clone(), shutdown.clone());
        std::thread::spawn(move || {
            let mut workers = Vec::new();
            while !shutdown.flag.load(Ordering::SeqCst) {
                match server.recv_timeout(Duration::from_millis(20)) {
                    Ok(Some(request)) => {
                        let (state, shutdown) = (state.clone(), shutdown.clone());
                        workers.push(std::thread::spawn(move || handle(request, &state, &shutdown)));
                        workers.retain(|w: &JoinHandle<()>| !w.is_finished());
                    }
                    Ok(None) => {}
                    Err(_) => break,
                }
            }
            for w in workers {
                let _ = w.join();
            }
        })
    };
    Ok(SimulatorHandle { addr, state, server, shutdown, acceptor: Mutex::new(Some(acceptor)) })
}

fn handle(mut request: tiny_http::Request, state: &ScriptState, shutdown: &Shutdown) {
    state.enter();
    let mut body = Vec::new();
    let readable = request.as_reader().read_to_end(&mut body).is_ok();
    let is_completion = *request.method() == tiny_http::Method::Post && request.url().ends_with("/chat/completions");
    let reaction = if !readable {
        Reaction::Reply { status: 400, body: "unreadable request body\n".into(), delay: Duration::ZERO }
    } else if !is_completion {
        Reaction::NotFound { body: format!("no route for {} {}\n", request.method(), request.url()) }
    } else {
        state.react(&body)
    };
    let (status, text) = match reaction {
        Reaction::Reply { status, body, delay } => {
            shutdown.wait(delay);
            (status, body)
        }
        Reaction::NotFound { body } => (404, body),
        Reaction::Drop { .. } => {
            // Held without an answer until the server stops.
            state.leave();
            while !shutdown.flag.load(Ordering::SeqCst) {
                shutdown.wait(Duration::from_secs(3600));
            }
            drop(request);
            return;
        }
    };
    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
    let response = tiny_http::Response::from_string(text).with_status_code(status).with_header(header);
    let _ = request.respond(response);
    state.leave();
}

impl SimulatorHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Base URL to put in an endpoint config.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn state(&self) -> &ScriptState {
        &self.state
    }

    pub fn reset(&self) {
        self.state.reset()
    }

    /// Stops accepting requests and waits for in-progress ones. Safe to call
    /// more than once.
    pub fn shutdown(&self) {
        let Some(acceptor) = self.acceptor.lock().expect("acceptor lock").take() else {
            return;
        };
        {
            let _guard = self.shutdown.lock.lock().expect("shutdown lock");
            self.shutdown.flag.store(true, Ordering::SeqCst);
            self.shutdown.signal.notify_all();
        }
        self.server.unblock();
        let _ = acceptor.join();
    }
}

impl Drop for SimulatorHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_are_consumed_in_order_and_the_last_repeats() {
        let script = ResponseScript::default().with_entry("p", vec![Step::status(429), Step::status(429), Step::content("L")]);
        let state = ScriptState::new(script);
        let statuses: Vec<u16> = (0..5)
            .map(|_| match state.react(b"p") {
                Reaction::Reply { status, .. } => status,
                other => panic!("{other:?}"),
            })
            .collect();
        assert_eq!(statuses, vec![429, 429, 200, 200, 200]);
        state.reset();
        assert!(matches!(state.react(b"p"), Reaction::Reply { status: 429, .. }));
    }

    #[test]
    fn unmatched_requests_are_not_found() {
        let state = ScriptState::new(ResponseScript::default());
        assert!(matches!(state.react(b"x"), Reaction::NotFound { body } if body.contains(&sha256_hex(b"x"))));
        let state = ScriptState::new(ResponseScript::always("H"));
        assert!(matches!(state.react(b"x"), Reaction::Reply { status: 200, body, .. } if body == completion_body("H")));
    }

    #[test]
    fn script_json_round_trips() {
        let script = ResponseScript::default()
            .with_entry("a", vec![Step::dropped().delayed(5), Step::body(500, "oops"), Step::content("H")]);
        let text = serde_json::to_string(&script).unwrap();
        assert_eq!(serde_json::from_str::<ResponseScript>(&text).unwrap(), script);
        let minimal: ResponseScript = serde_json::from_str(r#"{"any":[{"content":"H"}]}"#).unwrap();
        assert_eq!(minimal, ResponseScript::always("H"));
    }

    #[test]
    fn shutdown_is_idempotent() {
        let handle = serve(ResponseScript::always("H"), "127.0.0.1:0").unwrap();
        handle.shutdown();
        handle.shutdown();
    }
}
