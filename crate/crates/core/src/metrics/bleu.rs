use super::ngrams::ngram_counts;

/// Substitute for a zero modified precision.
pub const SMOOTHING_EPS: f64 = 1e-9;

/// Sentence BLEU-4 on word tokens: geometric mean of clipped n-gram
/// precisions (n = 1..4, zeros replaced by [`SMOOTHING_EPS`]) times the
/// brevity penalty against the closest reference length (shorter wins ties).
pub fn bleu4(candidate: &[String], references: &[Vec<String>]) -> f64 {
    let c = candidate.len();
    if c == 0 || references.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let ref_counts: Vec<_> = references.iter().map(|r| ngram_counts(r, n)).collect();
        let clipped: usize = cand
            .iter()
            .map(|(g, &k)| {
                let max_ref = ref_counts.iter().map(|r| r.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                k.min(max_ref)
            })
            .sum();
        let total = c.saturating_sub(n - 1);
        let p = if clipped == 0 || total == 0 {
            SMOOTHING_EPS
        } else {
            clipped as f64 / total as f64
        };
        log_sum += p.ln() / 4.0;
    }
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_sum.exp()
}
