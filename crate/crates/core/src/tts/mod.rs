//! Inference-time best-of-N search: sample captions, score each against a
//! retrieved scene summary with a judge, keep the best.

mod bank;
mod http;
mod judge;
mod stub;
mod vote;

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

pub use bank::{parse_bank, retrieve_summary, DescriptorBank, SceneSummary, DEFAULT_BANK};
pub use http::{HttpJudge, HttpJudgeConfig, JudgeRequest, JudgeResponse, JUDGE_PATH, RUBRIC_ID};
pub use judge::{mock_reward, summary_words, Judge, JudgeVerdict, MockJudge, VerdictStatus};
pub use stub::{stub_rewards, JudgeStub, StubConfig, StubMode};
pub use vote::{four_gram_overlap, top_k_vote};

use crate::decoder::{decode, DecodeStrategy};
use crate::model::Model;
use crate::pointcloud::PointCloud;
use crate::{Error, Result};

pub const DEFAULT_N: usize = 8;
pub const DEFAULT_K_S: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct TtsConfig {
    pub n: usize,
    pub k_s: usize,
    pub seed: u64,
    pub temperature: f64,
    pub top_k: usize,
    /// Keep the `vote_k` best candidates and pick by consensus instead of
    /// plain argmax.
    pub vote_k: Option<usize>,
    /// Adds the greedy caption as an extra candidate after the `n` samples.
    pub include_greedy: bool,
    /// When every candidate fails, return the greedy caption flagged as a
    /// fallback. Without it the search errors out.
    pub fallback_greedy: bool,
    /// Total latency of the plain greedy pipeline, for the overhead ratio.
    pub baseline_total_ms: Option<f64>,
}

impl Default for TtsConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_N,
            k_s: DEFAULT_K_S,
            seed: 0,
            temperature: DecodeStrategy::DEFAULT_TEMPERATURE,
            top_k: DecodeStrategy::DEFAULT_TOP_K,
            vote_k: None,
            include_greedy: false,
            fallback_greedy: true,
            baseline_total_ms: None,
        }
    }
}

impl TtsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if self.k_s == 0 {
            return Err(Error::Config("k_s must be at least 1".into()));
        }
        if self.vote_k == Some(0) {
            return Err(Error::Config("vote_k must be at least 1".into()));
        }
        self.strategy().validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn strategy(&self) -> DecodeStrategy {
        DecodeStrategy::Stochastic { temperature: self.temperature, top_k: self.top_k, seed: self.seed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    pub encode_ms: f64,
    pub decode_judge_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateReport {
    pub text: String,
    #[serde(skip)]
    pub ids: Vec<usize>,
    pub reward: Option<f64>,
    pub latency_ms: f64,
    pub status: VerdictStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResult {
    pub selected: String,
    /// Candidate index of the selection; `None` for a greedy fallback.
    pub selected_index: Option<usize>,
    pub fallback: bool,
    pub candidates: Vec<CandidateReport>,
    pub summary: SceneSummary,
    pub timing: Timing,
    pub overhead_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge_error: Option<String>,
}

impl SearchResult {
    pub fn selected_reward(&self) -> Option<f64> {
        self.selected_index.and_then(|i| self.candidates[i].reward)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("search result serializes")
    }
}

/// `total / baseline` rounded to two decimals.
pub fn overhead_ratio(total_ms: f64, baseline_ms: f64) -> Result<f64> {
    if !(baseline_ms > 0.0 && baseline_ms.is_finite()) {
        return Err(Error::Argument(format!("baseline total must be positive, got {baseline_ms}")));
    }
    Ok((total_ms / baseline_ms * 100.0).round() / 100.0)
}

/// Highest-reward successful verdict, lower index first on ties.
pub fn select_best(verdicts: &[JudgeVerdict]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for v in verdicts {
        if let (true, Some(r)) = (v.is_ok(), v.reward) {
            if best.is_none_or(|(_, b)| r > b) {
                best = Some((v.index, r));
            }
        }
    }
    best.map(|(i, _)| i)
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// One frozen encode, summary retrieval, `n` sampled candidates keyed by
/// `(seed, i)`, one judge pass, then argmax or voting.
///
/// Takes the model by shared reference: the search never writes to it.
pub fn run_tts(model: &Model, cloud: &PointCloud, bank: &DescriptorBank, judge: &dyn Judge, cfg: &TtsConfig) -> Result<SearchResult> {
    cfg.validate()?;
    let t_total = Instant::now();

    let t_enc = Instant::now();
    let (grid, scene_unit) = model.embed_scene(cloud)?;
    let summary = retrieve_summary(&scene_unit, bank, cfg.k_s)?;
    let encode_ms = ms_since(t_enc);

    let t_dj = Instant::now();
    let dec_cfg = model.decoder_config();
    let strategy = cfg.strategy();
    let mut gens = (0..cfg.n as u64)
        .into_par_iter()
        .map(|i| decode(&model.store, &dec_cfg, &grid, strategy, i))
        .collect::<Result<Vec<_>>>()?;
    if cfg.include_greedy {
        gens.push(decode(&model.store, &dec_cfg, &grid, DecodeStrategy::Greedy, 0)?);
    }
    let texts: Vec<String> = gens.iter().map(|g| model.vocab.render(&g.ids)).collect();
    let (verdicts, judge_error) = match judge.score(&summary, &texts) {
        Ok(v) if v.len() == texts.len() => (v, None),
        Ok(v) => {
            let msg = format!("judge {} returned {} verdicts for {} candidates", judge.name(), v.len(), texts.len());
            (Vec::new(), Some(Error::Protocol(msg)))
        }
        Err(e) => (Vec::new(), Some(e)),
    };
    let verdicts: Vec<JudgeVerdict> = if judge_error.is_some() {
        let msg = judge_error.as_ref().unwrap().to_string();
        (0..texts.len()).map(|i| JudgeVerdict::failed(i, 0.0, msg.clone())).collect()
    } else {
        verdicts
    };

    let choice = match cfg.vote_k {
        Some(k) if verdicts.iter().any(JudgeVerdict::is_ok) => {
            let ids: Vec<&[usize]> = gens.iter().map(|g| g.ids.as_slice()).collect();
            Some(top_k_vote(&verdicts, &ids, k)?)
        }
        _ => select_best(&verdicts),
    };
    let decode_judge_ms = ms_since(t_dj);

    let candidates: Vec<CandidateReport> = gens
        .iter()
        .zip(&texts)
        .zip(&verdicts)
        .map(|((g, t), v)| CandidateReport {
            text: t.clone(),
            ids: g.ids.clone(),
            reward: v.reward,
            latency_ms: v.latency_ms,
            status: v.status.clone(),
            error: v.error.clone(),
        })
        .collect();
    let (selected, selected_index, fallback) = match choice {
        Some(i) => (texts[i].clone(), Some(i), false),
        None if cfg.fallback_greedy => {
            let g = decode(&model.store, &dec_cfg, &grid, DecodeStrategy::Greedy, 0)?;
            (model.vocab.render(&g.ids), None, true)
        }
        None => {
            return Err(judge_error.unwrap_or_else(|| Error::Judge("every candidate failed to score".into())));
        }
    };
    let total_ms = ms_since(t_total);
    let overhead_ratio = cfg.baseline_total_ms.map(|b| overhead_ratio(total_ms, b)).transpose()?;
    Ok(SearchResult {
        selected,
        selected_index,
        fallback,
        candidates,
        summary,
        timing: Timing { encode_ms, decode_judge_ms, total_ms },
        overhead_ratio,
        judge_error: judge_error.map(|e| e.to_string()),
    })
}

/// Greedy caption with the same encode/extra timing split as [`run_tts`],
/// used as the latency baseline.
pub fn run_greedy(model: &Model, cloud: &PointCloud) -> Result<(String, Timing)> {
    let t_total = Instant::now();
    let t_enc = Instant::now();
    let (grid, _) = model.embed_scene(cloud)?;
    let encode_ms = ms_since(t_enc);
    let t_dec = Instant::now();
    let g = decode(&model.store, &model.decoder_config(), &grid, DecodeStrategy::Greedy, 0)?;
    let text = model.vocab.render(&g.ids);
    let decode_judge_ms = ms_since(t_dec);
    Ok((text, Timing { encode_ms, decode_judge_ms, total_ms: ms_since(t_total) }))
}
