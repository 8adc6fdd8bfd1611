use std::collections::BTreeSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::bank::SceneSummary;
use crate::text::content_words;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Ok,
    /// The judge answered with an unusable reward.
    Rejected,
    /// No answer: timeout, transport failure or retries exhausted.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JudgeVerdict {
    pub index: usize,
    /// Present only for `Ok` verdicts, always in `[0, 1]`.
    pub reward: Option<f64>,
    pub latency_ms: f64,
    pub raw: String,
    pub status: VerdictStatus,
    pub error: Option<String>,
}

impl JudgeVerdict {
    pub fn ok(index: usize, reward: f64, latency_ms: f64, raw: String) -> Self {
        Self { index, reward: Some(reward), latency_ms, raw, status: VerdictStatus::Ok, error: None }
    }

    pub fn failed(index: usize, latency_ms: f64, error: String) -> Self {
        Self { index, reward: None, latency_ms, raw: String::new(), status: VerdictStatus::Failed, error: Some(error) }
    }

    /// Out-of-range or non-finite reward: kept as raw text, never clamped.
    pub fn checked(index: usize, reward: f64, latency_ms: f64, raw: String) -> Self {
        if reward.is_finite() && (0.0..=1.0).contains(&reward) {
            Self::ok(index, reward, latency_ms, raw)
        } else {
            Self {
                index,
                reward: None,
                latency_ms,
                raw,
                status: VerdictStatus::Rejected,
                error: Some(format!("reward {reward} outside [0, 1]")),
            }
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == VerdictStatus::Ok
    }
}

/// Scores captions against a scene summary. Implementations return one
/// verdict per candidate, in candidate order.
pub trait Judge: Sync {
    fn name(&self) -> &str;
    fn score(&self, summary: &SceneSummary, candidates: &[String]) -> Result<Vec<JudgeVerdict>>;
}

/// Words the mock judge looks for: content words of every descriptor.
pub fn summary_words(summary: &SceneSummary) -> BTreeSet<String> {
    summary.descriptors.iter().flat_map(|d| content_words(d)).collect()
}

/// Fraction of summary words that the candidate mentions.
pub fn mock_reward(summary_words: &BTreeSet<String>, candidate: &str) -> f64 {
    let cand: BTreeSet<String> = content_words(candidate).into_iter().collect();
    let hits = cand.intersection(summary_words).count();
    hits as f64 / summary_words.len().max(1) as f64
}

/// Deterministic offline judge built on [`mock_reward`].
#[derive(Debug, Clone, Copy, Default)]
pub struct MockJudge;

impl Judge for MockJudge {
    fn name(&self) -> &str {
        "mock"
    }

    fn score(&self, summary: &SceneSummary, candidates: &[String]) -> Result<Vec<JudgeVerdict>> {
        let words = summary_words(summary);
        Ok(candidates
            .par_iter()
            .enumerate()
            .map(|(i, c)| {
                let t = Instant::now();
                let r = mock_reward(&words, c);
                JudgeVerdict::ok(i, r, t.elapsed().as_secs_f64() * 1e3, format!("{r}"))
            })
            .collect())
    }
}
