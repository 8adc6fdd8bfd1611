//! Offline judge server speaking the judge wire protocol.

use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::http::{JudgeRequest, JudgeResponse, JUDGE_PATH};
use super::judge::mock_reward;
use crate::text::content_words;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum StubMode {
    /// Reward per candidate derived from a hash of the request and index.
    Hashed,
    /// Mock-judge rewards computed from the rendered summary.
    Mock,
    /// The same rewards for every request, whatever the candidate count.
    Canned(Vec<f64>),
    /// One reward too many.
    WrongCount,
    /// First reward 1.5, the rest hashed.
    OutOfRange,
}

impl FromStr for StubMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hashed" => Ok(StubMode::Hashed),
            "mock" => Ok(StubMode::Mock),
            "wrong-count" => Ok(StubMode::WrongCount),
            "out-of-range" => Ok(StubMode::OutOfRange),
            _ => {
                let list = s
                    .strip_prefix("canned:")
                    .ok_or_else(|| Error::Argument(format!("unknown stub mode {s:?}")))?;
                list.split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Argument(format!("canned reward {v:?}: {e}"))))
                    .collect::<Result<Vec<_>>>()
                    .map(StubMode::Canned)
            }
        }
    }
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

fn hashed_reward(req: &JudgeRequest, index: usize) -> f64 {
    let mut key = Vec::new();
    key.extend_from_slice(req.summary.as_bytes());
    key.push(0);
    key.extend_from_slice(req.candidates[index].as_bytes());
    key.push(0);
    key.extend_from_slice(req.rubric_id.as_bytes());
    (fnv1a(&key) >> 11) as f64 / (1u64 << 53) as f64
}

/// Rewards the stub answers `req` with.
pub fn stub_rewards(mode: &StubMode, req: &JudgeRequest) -> Vec<f64> {
    let n = req.candidates.len();
    match mode {
        StubMode::Hashed => (0..n).map(|i| hashed_reward(req, i)).collect(),
        StubMode::Mock => {
            let words = req.summary.split(',').flat_map(content_words).collect();
            req.candidates.iter().map(|c| mock_reward(&words, c)).collect()
        }
        StubMode::Canned(r) => r.clone(),
        StubMode::WrongCount => (0..=n).map(|i| if i < n { hashed_reward(req, i) } else { 0.5 }).collect(),
        StubMode::OutOfRange => (0..n).map(|i| if i == 0 { 1.5 } else { hashed_reward(req, i) }).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StubConfig {
    pub mode: StubMode,
    /// Sleep before answering each request.
    pub delay_ms: u64,
}

/// A running stub. Dropping it stops the server.
pub struct JudgeStub {
    server: Arc<tiny_http::Server>,
    port: u16,
    bodies: Arc<Mutex<Vec<String>>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl JudgeStub {
    /// Binds `127.0.0.1:port` (0 picks a free port) and serves in the
    /// background. Each request is answered on its own thread.
    pub fn spawn(config: StubConfig, port: u16) -> Result<Self> {
        let server = tiny_http::Server::http(("127.0.0.1", port))
            .map_err(|e| Error::Judge(format!("binding stub on port {port}: {e}")))?;
        let port = server.server_addr().to_ip().map(|a| a.port()).unwrap_or(port);
        let server = Arc::new(server);
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));
        let handle = {
            let (server, bodies, stop) = (server.clone(), bodies.clone(), stop.clone());
            std::thread::spawn(move || serve(&server, &config, &bodies, &stop))
        };
        Ok(Self { server, port, bodies, stop, handle: Some(handle) })
    }

    pub fn endpoint(&self) -> String {
        format!("http://127.0.0.1:{}", self.port)
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    /// Raw request bodies received so far, in arrival order.
    pub fn received(&self) -> Vec<String> {
        self.bodies.lock().unwrap().clone()
    }

    /// Serves until the process exits.
    pub fn wait(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for JudgeStub {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(server: &tiny_http::Server, config: &StubConfig, bodies: &Arc<Mutex<Vec<String>>>, stop: &AtomicBool) {
    while !stop.load(Ordering::SeqCst) {
        let Ok(mut request) = server.recv() else { break };
        let mut body = String::new();
        let read = request.as_reader().read_to_string(&mut body);
        bodies.lock().unwrap().push(body.clone());
        let config = config.clone();
        std::thread::spawn(move || {
            if config.delay_ms > 0 {
                std::thread::sleep(Duration::from_millis(config.delay_ms));
            }
            let (status, text) = if read.is_err() {
                (400, "unreadable body".to_string())
            } else if request.url() != JUDGE_PATH || *request.method() != tiny_http::Method::Post {
                (404, format!("no route {} {}", request.method(), request.url()))
            } else {
                match serde_json::from_str::<JudgeRequest>(&body) {
                    Ok(req) => {
                        let resp = JudgeResponse { rewards: stub_rewards(&config.mode, &req) };
                        (200, serde_json::to_string(&resp).expect("rewards serialize"))
                    }
                    Err(e) => (400, format!("bad request: {e}")),
                }
            };
            let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
            // The client may have timed out and gone away.
            let _ = request.respond(tiny_http::Response::from_string(text).with_status_code(status).with_header(header));
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(cands: &[&str]) -> JudgeRequest {
        JudgeRequest {
            summary: "red chair, blue table".into(),
            candidates: cands.iter().map(|s| s.to_string()).collect(),
            rubric_id: super::super::http::RUBRIC_ID.into(),
        }
    }

    #[test]
    fn modes() {
        let r = req(&["a red chair", "a blue bed"]);
        let h = stub_rewards(&StubMode::Hashed, &r);
        assert_eq!(h, stub_rewards(&StubMode::Hashed, &r));
        assert!(h.iter().all(|v| (0.0..1.0).contains(v)));
        assert_eq!(stub_rewards(&StubMode::Mock, &r), vec![0.5, 0.25]);
        assert_eq!(stub_rewards(&StubMode::WrongCount, &r).len(), 3);
        assert_eq!(stub_rewards(&StubMode::OutOfRange, &r)[0], 1.5);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("canned:0.2, 0.9".parse::<StubMode>().unwrap(), StubMode::Canned(vec![0.2, 0.9]));
        assert_eq!("hashed".parse::<StubMode>().unwrap(), StubMode::Hashed);
        assert!("canned:x".parse::<StubMode>().is_err());
        assert!("loud".parse::<StubMode>().is_err());
    }
}
