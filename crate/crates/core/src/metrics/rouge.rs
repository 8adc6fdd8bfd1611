pub const BETA: f64 = 1.2;

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with recall weighted by `BETA`, max over references.
pub fn rouge_l(candidate: &[String], references: &[Vec<String>]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    references
        .iter()
        .map(|r| {
            let l = lcs_len(candidate, r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / candidate.len() as f64;
            let rec = l as f64 / r.len() as f64;
            (1.0 + BETA * BETA) * p * rec / (rec + BETA * BETA * p)
        })
        .fold(0.0, f64::max)
}
