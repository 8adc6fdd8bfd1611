//! Per-scene latency of the best-of-N search against plain greedy
//! captioning, split into the encode stage and the decode+judge stage.

use serde::{Deserialize, Serialize};

use crate::model::Model;
use crate::pointcloud::PointCloud;
use crate::tts::{overhead_ratio, run_greedy, run_tts, DescriptorBank, Judge, TtsConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub encode_ms: f64,
    pub extra_ms: f64,
    pub total_ms: f64,
    pub overhead: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    /// Mean total latency of greedy captioning without search.
    pub baseline_total_ms: f64,
    pub rows: Vec<BenchRow>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureRow {
    n: usize,
    encode_ms: f64,
    extra_ms: f64,
    total_ms: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Fixture {
    baseline_total_ms: f64,
    rows: Vec<FixtureRow>,
}

impl BenchTable {
    fn from_means(baseline_total_ms: f64, rows: impl IntoIterator<Item = (usize, f64, f64, f64)>) -> Result<Self> {
        let rows = rows
            .into_iter()
            .map(|(n, encode_ms, extra_ms, total_ms)| {
                Ok(BenchRow { n, encode_ms, extra_ms, total_ms, overhead: overhead_ratio(total_ms, baseline_total_ms)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { baseline_total_ms, rows })
    }

    /// Table from recorded timings instead of a live run:
    /// `{"baseline_total_ms": .., "rows": [{"n", "encode_ms", "extra_ms", "total_ms"?}]}`.
    /// A missing `total_ms` is taken as `encode_ms + extra_ms`.
    pub fn from_fixture(json: &str) -> Result<Self> {
        let f: Fixture = serde_json::from_str(json).map_err(|e| Error::Data(format!("bench fixture: {e}")))?;
        if f.rows.is_empty() {
            return Err(Error::Data("bench fixture has no rows".into()));
        }
        Self::from_means(
            f.baseline_total_ms,
            f.rows.into_iter().map(|r| (r.n, r.encode_ms, r.extra_ms, r.total_ms.unwrap_or(r.encode_ms + r.extra_ms))),
        )
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("bench table serializes")
    }

    /// Seconds with two decimals, one line per N.
    pub fn to_text(&self) -> String {
        let mut s = format!("baseline (greedy) total: {:.2} s\n", self.baseline_total_ms / 1e3);
        s.push_str("N\tEncode (s)\tExtra dec+judge (s)\tTotal (s)\tOverhead\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}x\n",
                r.n,
                r.encode_ms / 1e3,
                r.extra_ms / 1e3,
                r.total_ms / 1e3,
                r.overhead
            ));
        }
        s
    }
}

/// Runs greedy once per scene for the baseline, then the search at each N.
/// Reported latencies are means over scenes.
pub fn run_bench(
    model: &Model,
    scenes: &[PointCloud],
    ns: &[usize],
    bank: &DescriptorBank,
    judge: &dyn Judge,
    base: &TtsConfig,
) -> Result<BenchTable> {
    if scenes.is_empty() {
        return Err(Error::Data("bench needs at least one scene".into()));
    }
    if ns.is_empty() {
        return Err(Error::Argument("bench needs at least one N".into()));
    }
    let count = scenes.len() as f64;
    let mut baseline = 0.0;
    for s in scenes {
        baseline += run_greedy(model, s)?.1.total_ms;
    }
    baseline /= count;
    let mut means = Vec::with_capacity(ns.len());
    for &n in ns {
        let cfg = TtsConfig { n, baseline_total_ms: None, ..base.clone() };
        let (mut enc, mut extra, mut total) = (0.0, 0.0, 0.0);
        for s in scenes {
            let r = run_tts(model, s, bank, judge, &cfg)?;
            enc += r.timing.encode_ms;
            extra += r.timing.decode_judge_ms;
            total += r.timing.total_ms;
        }
        means.push((n, enc / count, extra / count, total / count));
    }
    BenchTable::from_means(baseline, means)
}
