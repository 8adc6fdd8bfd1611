use std::collections::HashMap;

/// Counts of the `n`-grams of `words`, keyed by the space-joined gram.
pub fn ngram_counts(words: &[String], n: usize) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    if n == 0 || words.len() < n {
        return out;
    }
    for w in words.windows(n) {
        *out.entry(w.join(" ")).or_insert(0) += 1;
    }
    out
}
