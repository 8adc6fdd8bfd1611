use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::bank::SceneSummary;
use super::judge::{Judge, JudgeVerdict};
use crate::{Error, Result};

/// Identifies the fixed scoring rubric the judge applies. Never varies by
/// dataset or request.
pub const RUBRIC_ID: &str = "scene-caption-faithfulness-v1";
pub const JUDGE_PATH: &str = "/judge";
const EXCERPT_CHARS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub summary: String,
    pub candidates: Vec<String>,
    pub rubric_id: String,
}

impl JudgeRequest {
    pub fn new(summary: &SceneSummary, candidates: &[String]) -> Self {
        Self {
            summary: summary.rendered.clone(),
            candidates: candidates.to_vec(),
            rubric_id: RUBRIC_ID.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpJudgeConfig {
    /// Base URL; requests go to `{endpoint}/judge`.
    pub endpoint: String,
    pub timeout_ms: u64,
    pub retries: u32,
    /// First retry delay; doubles on each further attempt.
    pub backoff_ms: u64,
    /// One request per candidate instead of one per scene.
    pub per_candidate: bool,
    pub max_in_flight: usize,
}

impl HttpJudgeConfig {
    pub const DEFAULT_TIMEOUT_MS: u64 = 10_000;
    pub const DEFAULT_RETRIES: u32 = 2;

    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout_ms: Self::DEFAULT_TIMEOUT_MS,
            retries: Self::DEFAULT_RETRIES,
            backoff_ms: 100,
            per_candidate: false,
            max_in_flight: 4,
        }
    }

    pub fn url(&self) -> String {
        format!("{}{}", self.endpoint.trim_end_matches('/'), JUDGE_PATH)
    }
}

pub(crate) fn excerpt(body: &str) -> String {
    let mut s: String = body.chars().take(EXCERPT_CHARS).collect();
    if body.chars().count() > EXCERPT_CHARS {
        s.push_str("...");
    }
    s
}

enum Attempt {
    Body(String),
    /// Worth retrying: timeouts, refused connections, 5xx.
    Transient(String),
}

pub struct HttpJudge {
    config: HttpJudgeConfig,
    agent: ureq::Agent,
}

impl HttpJudge {
    pub fn new(config: HttpJudgeConfig) -> Result<Self> {
        if config.endpoint.is_empty() {
            return Err(Error::Config("judge endpoint is empty".into()));
        }
        if config.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        let agent_cfg = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build();
        Ok(Self { agent: ureq::Agent::new_with_config(agent_cfg), config })
    }

    pub fn config(&self) -> &HttpJudgeConfig {
        &self.config
    }

    fn attempt(&self, req: &JudgeRequest) -> Result<Attempt> {
        match self.agent.post(self.config.url()).send_json(req) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let body = match resp.body_mut().read_to_string() {
                    Ok(b) => b,
                    Err(e) => return Ok(Attempt::Transient(format!("reading response: {e}"))),
                };
                match status {
                    200..=299 => Ok(Attempt::Body(body)),
                    500..=599 => Ok(Attempt::Transient(format!("status {status}"))),
                    _ => Err(Error::Protocol(format!("status {status}: {}", excerpt(&body)))),
                }
            }
            Err(e) => Ok(Attempt::Transient(e.to_string())),
        }
    }

    /// Sends `req` with retries. `Ok(Err(msg))` means the judge stayed
    /// unreachable; `Err` is a protocol violation.
    fn send(&self, req: &JudgeRequest) -> Result<std::result::Result<String, String>> {
        let mut delay = self.config.backoff_ms;
        let mut last = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(delay));
                delay = delay.saturating_mul(2);
            }
            match self.attempt(req)? {
                Attempt::Body(b) => return Ok(Ok(b)),
                Attempt::Transient(msg) => last = msg,
            }
        }
        Ok(Err(format!("{} attempts failed, last: {last}", self.config.retries + 1)))
    }

    /// Parses a response body into rewards, checking the count.
    pub fn parse_rewards(body: &str, expected: usize) -> Result<Vec<f64>> {
        let resp: JudgeResponse = serde_json::from_str(body)
            .map_err(|e| Error::Protocol(format!("malformed response ({e}): {}", excerpt(body))))?;
        if resp.rewards.len() != expected {
            return Err(Error::Protocol(format!(
                "expected {expected} rewards, got {}: {}",
                resp.rewards.len(),
                excerpt(body)
            )));
        }
        Ok(resp.rewards)
    }

    fn score_batch(&self, summary: &SceneSummary, candidates: &[String], first_index: usize) -> Result<Vec<JudgeVerdict>> {
        let req = JudgeRequest::new(summary, candidates);
        let t = Instant::now();
        let sent = self.send(&req)?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        match sent {
            Ok(body) => {
                let rewards = Self::parse_rewards(&body, candidates.len())?;
                Ok(rewards
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| JudgeVerdict::checked(first_index + i, r, ms, body.clone()))
                    .collect())
            }
            Err(msg) => Ok((0..candidates.len()).map(|i| JudgeVerdict::failed(first_index + i, ms, msg.clone())).collect()),
        }
    }
}

impl Judge for HttpJudge {
    fn name(&self) -> &str {
        "http"
    }

    fn score(&self, summary: &SceneSummary, candidates: &[String]) -> Result<Vec<JudgeVerdict>> {
        if !self.config.per_candidate {
            return self.score_batch(summary, candidates, 0);
        }
        let mut out = Vec::with_capacity(candidates.len());
        for (chunk_no, chunk) in candidates.chunks(self.config.max_in_flight).enumerate() {
            let base = chunk_no * self.config.max_in_flight;
            let results: Vec<Result<Vec<JudgeVerdict>>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .enumerate()
                    .map(|(j, c)| s.spawn(move || self.score_batch(summary, std::slice::from_ref(c), base + j)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("judge worker panicked")).collect()
            });
            for r in results {
                out.extend(r?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_shape() {
        let s = SceneSummary { descriptors: vec!["a".into()], similarities: vec![1.0], rendered: "a".into() };
        let v = serde_json::to_value(JudgeRequest::new(&s, &["x".into()])).unwrap();
        assert_eq!(v, serde_json::json!({"summary": "a", "candidates": ["x"], "rubric_id": RUBRIC_ID}));
    }

    #[test]
    fn reward_parsing() {
        assert_eq!(HttpJudge::parse_rewards(r#"{"rewards":[0.2,0.9]}"#, 2).unwrap(), vec![0.2, 0.9]);
        let e = HttpJudge::parse_rewards(r#"{"rewards":[0.2,0.9,0.1]}"#, 2).unwrap_err();
        assert!(matches!(&e, Error::Protocol(m) if m.contains("expected 2") && m.contains("0.9")));
        assert!(matches!(HttpJudge::parse_rewards("oops", 1), Err(Error::Protocol(m)) if m.contains("oops")));
    }

    #[test]
    fn url_joins() {
        assert_eq!(HttpJudgeConfig::new("http://h:1/").url(), "http://h:1/judge");
        assert!(HttpJudge::new(HttpJudgeConfig::new("")).is_err());
    }
}
