use std::collections::BTreeSet;

use crate::text::{is_function_word, stem, words};

/// Content words of `caption` (stop and relational words removed) whose
/// stem is not among the stems of `scene_vocab`.
pub fn unsupported_words(caption: &str, scene_vocab: &BTreeSet<String>) -> Vec<String> {
    let allowed: BTreeSet<String> = scene_vocab.iter().map(|w| stem(&w.to_lowercase())).collect();
    words(caption)
        .into_iter()
        .filter(|w| !is_function_word(w) && !allowed.contains(&stem(w)))
        .collect()
}

pub fn is_hallucinating(caption: &str, scene_vocab: &BTreeSet<String>) -> bool {
    !unsupported_words(caption, scene_vocab).is_empty()
}

/// Fraction of captions with at least one unsupported content word.
pub fn hallucination_rate(captions: &[&str], vocabs: &[&BTreeSet<String>]) -> f64 {
    if captions.is_empty() {
        return 0.0;
    }
    let bad = captions.iter().zip(vocabs).filter(|(c, v)| is_hallucinating(c, v)).count();
    bad as f64 / captions.len() as f64
}
