//! Synonym-free METEOR: unigram alignment by exact match, then by stem,
//! recall-weighted harmonic mean and a fragmentation penalty.

use crate::text::stem;

pub const ALPHA: f64 = 0.9;
pub const GAMMA: f64 = 0.5;
pub const BETA: f64 = 3.0;

/// Greedy left-to-right alignment: each candidate word takes the first
/// unused reference position with an equal word; a second pass does the
/// same on stems. Returns `(candidate_pos, reference_pos)` sorted by
/// candidate position.
pub fn align(candidate: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut used_c = vec![false; candidate.len()];
    let mut used_r = vec![false; reference.len()];
    let mut pairs = Vec::new();
    let cs: Vec<String> = candidate.iter().map(|w| stem(w)).collect();
    let rs: Vec<String> = reference.iter().map(|w| stem(w)).collect();
    for stage in 0..2 {
        for i in 0..candidate.len() {
            if used_c[i] {
                continue;
            }
            let hit = (0..reference.len()).find(|&j| {
                !used_r[j] && if stage == 0 { candidate[i] == reference[j] } else { cs[i] == rs[j] }
            });
            if let Some(j) = hit {
                used_c[i] = true;
                used_r[j] = true;
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

pub fn chunks(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

fn score_one(candidate: &[String], reference: &[String]) -> f64 {
    let pairs = align(candidate, reference);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = p * r / (ALPHA * p + (1.0 - ALPHA) * r);
    let penalty = GAMMA * (chunks(&pairs) as f64 / m as f64).powf(BETA);
    f_mean * (1.0 - penalty)
}

pub fn meteor_lite(candidate: &[String], references: &[Vec<String>]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    references.iter().map(|r| score_one(candidate, r)).fold(0.0, f64::max)
}
