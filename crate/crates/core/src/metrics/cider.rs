//! CIDEr: per-n TF-IDF cosine between candidate and each reference, averaged
//! over references and n = 1..4, times 10. IDF is `ln(|I| / df)` where `df`
//! counts items whose reference set contains the gram.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ngrams::ngram_counts;
use crate::text::stem;
use crate::{Error, Result};

pub const MAX_N: usize = 4;
pub const SCALE: f64 = 10.0;

/// Document frequencies over a set of reference groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocFreq {
    pub n_docs: usize,
    pub df: BTreeMap<String, usize>,
}

fn stem_all(words: &[String]) -> Vec<String> {
    words.iter().map(|w| stem(w)).collect()
}

fn gram_key(n: usize, gram: &str) -> String {
    format!("{n}:{gram}")
}

impl DocFreq {
    pub fn from_references(groups: &[Vec<Vec<String>>]) -> Self {
        let mut df = BTreeMap::new();
        for refs in groups {
            let mut seen = HashSet::new();
            for r in refs {
                let s = stem_all(r);
                for n in 1..=MAX_N {
                    for g in ngram_counts(&s, n).into_keys() {
                        seen.insert(gram_key(n, &g));
                    }
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        Self { n_docs: groups.len(), df }
    }

    fn idf(&self, key: &str) -> f64 {
        let df = self.df.get(key).copied().unwrap_or(0).max(1);
        (self.n_docs as f64 / df as f64).ln()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self).expect("serialisable")).map_err(|e| Error::io(path, e))
    }
}

/// Ordered so every sum below runs in the same order on every run.
fn tfidf(words: &[String], n: usize, df: &DocFreq) -> BTreeMap<String, f64> {
    ngram_counts(words, n)
        .into_iter()
        .map(|(g, c)| {
            let w = c as f64 * df.idf(&gram_key(n, &g));
            (g, w)
        })
        .collect()
}

fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().filter_map(|(k, x)| b.get(k).map(|y| x * y)).sum::<f64>() / (na * nb)
}

/// Score of one candidate against its references under `df`.
pub fn cider_item(candidate: &[String], references: &[Vec<String>], df: &DocFreq) -> f64 {
    if references.is_empty() {
        return 0.0;
    }
    let c = stem_all(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| stem_all(r)).collect();
    let mut total = 0.0;
    for n in 1..=MAX_N {
        let cv = tfidf(&c, n, df);
        let sim: f64 = refs.iter().map(|r| cosine(&cv, &tfidf(r, n, df))).sum();
        total += sim / refs.len() as f64;
    }
    SCALE * total / MAX_N as f64
}

/// Per-item scores with corpus-relative IDF.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Vec<f64> {
    let df = DocFreq::from_references(references);
    candidates.iter().zip(references).map(|(c, r)| cider_item(c, r, &df)).collect()
}
