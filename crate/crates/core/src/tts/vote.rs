use std::collections::BTreeSet;

use super::judge::JudgeVerdict;
use crate::{Error, Result};

fn four_grams(ids: &[usize]) -> BTreeSet<&[usize]> {
    ids.windows(4).collect()
}

/// Jaccard similarity of the 4-gram sets. Sequences too short to have a
/// 4-gram overlap fully when identical and not at all otherwise.
pub fn four_gram_overlap(a: &[usize], b: &[usize]) -> f64 {
    let (ga, gb) = (four_grams(a), four_grams(b));
    if ga.is_empty() || gb.is_empty() {
        return if a == b { 1.0 } else { 0.0 };
    }
    let inter = ga.intersection(&gb).count();
    let union = ga.union(&gb).count();
    inter as f64 / union as f64
}

/// Keeps the `k` best-scored candidates and returns the index of the one
/// agreeing most with the others (mean 4-gram overlap). Ties go to the
/// higher reward, then the lower index.
pub fn top_k_vote(verdicts: &[JudgeVerdict], ids: &[&[usize]], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let mut kept: Vec<(usize, f64)> = verdicts
        .iter()
        .filter(|v| v.is_ok())
        .filter_map(|v| v.reward.map(|r| (v.index, r)))
        .collect();
    if kept.is_empty() {
        return Err(Error::Judge("no successful verdicts to vote over".into()));
    }
    kept.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    kept.truncate(k);
    if kept.len() == 1 {
        return Ok(kept[0].0);
    }
    let consensus = |i: usize| {
        let others = kept.iter().filter(|&&(j, _)| j != i);
        others.map(|&(j, _)| four_gram_overlap(ids[i], ids[j])).sum::<f64>() / (kept.len() - 1) as f64
    };
    let mut best = (kept[0].0, kept[0].1, consensus(kept[0].0));
    // `kept` is in (reward desc, index asc) order, so only a strictly
    // higher consensus may replace the incumbent.
    for &(i, r) in &kept[1..] {
        let c = consensus(i);
        if c > best.2 {
            best = (i, r, c);
        }
    }
    Ok(best.0)
}
