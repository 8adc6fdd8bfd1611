//! Captioning metrics, box IoU, the IoU-gated corpus protocol and the
//! hallucination check. All text goes through [`crate::text`]: punctuation
//! is dropped, BLEU and ROUGE compare surface words, CIDEr and the
//! hallucination check compare stems, METEOR matches surface then stem.

mod bleu;
mod cider;
mod hallucination;
mod iou;
mod meteor;
mod ngrams;
mod rouge;

pub use bleu::{bleu4, SMOOTHING_EPS};
pub use cider::{cider, cider_item, DocFreq};
pub use hallucination::{hallucination_rate, is_hallucinating, unsupported_words};
pub use iou::aabb_iou;
pub use meteor::meteor_lite;
pub use ngrams::ngram_counts;
pub use rouge::{lcs_len, rouge_l};

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::pointcloud::Aabb;
use crate::text::words;
use crate::{Error, Result};

pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.25, 0.5];

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub candidate: String,
    pub references: Vec<String>,
    pub pred_box: Option<Aabb>,
    pub gt_box: Option<Aabb>,
    pub scene_vocab: Option<BTreeSet<String>>,
}

#[derive(Deserialize, Serialize)]
struct CorpusLine {
    candidate: String,
    references: Vec<String>,
    #[serde(default)]
    pred_box: Option<[f64; 6]>,
    #[serde(default)]
    gt_box: Option<[f64; 6]>,
    #[serde(default)]
    scene_vocab: Option<Vec<String>>,
}

pub fn parse_corpus(text: &str) -> Result<Vec<CorpusItem>> {
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: String| Error::Data(format!("corpus line {}: {m}", n + 1));
        let l: CorpusLine = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if l.references.is_empty() {
            return Err(err("references must be non-empty".into()));
        }
        let conv = |b: Option<[f64; 6]>| -> Result<Option<Aabb>> {
            b.map(|b| Aabb::from_array(b).map_err(|e| err(e.to_string()))).transpose()
        };
        items.push(CorpusItem {
            candidate: l.candidate,
            references: l.references,
            pred_box: conv(l.pred_box)?,
            gt_box: conv(l.gt_box)?,
            scene_vocab: l.scene_vocab.map(|v| v.into_iter().map(|w| w.to_lowercase()).collect()),
        });
    }
    if items.is_empty() {
        return Err(Error::Data("corpus is empty".into()));
    }
    Ok(items)
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusItem>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_corpus(&text)
}

pub fn render_corpus(items: &[CorpusItem]) -> String {
    let mut s = String::new();
    for it in items {
        let line = CorpusLine {
            candidate: it.candidate.clone(),
            references: it.references.clone(),
            pred_box: it.pred_box.map(Aabb::to_array),
            gt_box: it.gt_box.map(Aabb::to_array),
            scene_vocab: it.scene_vocab.as_ref().map(|v| v.iter().cloned().collect()),
        };
        s.push_str(&serde_json::to_string(&line).expect("serialisable"));
        s.push('\n');
    }
    s
}

/// Ungated scores of one item.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemScores {
    pub candidate: String,
    pub cider: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge: f64,
    /// `None` in oracle mode, where the gate is always open.
    pub iou: Option<f64>,
    pub hallucinating: Option<bool>,
    pub empty_candidate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Cider,
    Bleu4,
    Meteor,
    Rouge,
}

impl ItemScores {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Cider => self.cider,
            Metric::Bleu4 => self.bleu4,
            Metric::Meteor => self.meteor,
            Metric::Rouge => self.rouge,
        }
    }
}

/// Scores every item; CIDEr IDF comes from `idf` or else the corpus itself.
pub fn score_items(items: &[CorpusItem], idf: Option<&DocFreq>) -> Vec<ItemScores> {
    let cands: Vec<Vec<String>> = items.iter().map(|i| words(&i.candidate)).collect();
    let refs: Vec<Vec<Vec<String>>> = items.iter().map(|i| i.references.iter().map(|r| words(r)).collect()).collect();
    let own;
    let df = match idf {
        Some(d) => d,
        None => {
            own = DocFreq::from_references(&refs);
            &own
        }
    };
    (0..items.len())
        .into_par_iter()
        .map(|i| {
            let (c, r) = (&cands[i], &refs[i]);
            ItemScores {
                candidate: items[i].candidate.clone(),
                cider: cider_item(c, r, df),
                bleu4: bleu4(c, r),
                meteor: meteor_lite(c, r),
                rouge: rouge_l(c, r),
                iou: None,
                hallucinating: items[i].scene_vocab.as_ref().map(|v| is_hallucinating(&items[i].candidate, v)),
                empty_candidate: c.is_empty(),
            }
        })
        .collect()
}

/// Per-item IoU gate values; all 1 in oracle mode.
pub fn item_ious(items: &[CorpusItem], oracle: bool) -> Result<Vec<f64>> {
    items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            if oracle {
                return Ok(1.0);
            }
            match (&it.pred_box, &it.gt_box) {
                (Some(p), Some(g)) => aabb_iou(p, g),
                _ => Err(Error::Argument(format!("item {i} lacks boxes and oracle mode is off"))),
            }
        })
        .collect()
}

/// `(1/N) Σ m_i · 1{IoU_i ≥ k}`.
pub fn m_at_k_iou(scores: &[f64], ious: &[f64], k: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let gated: f64 = scores.iter().zip(ious).map(|(s, &u)| if u >= k { *s } else { 0.0 }).sum();
    gated / scores.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdMetrics {
    pub k: f64,
    pub cider: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub thresholds: Vec<ThresholdMetrics>,
    pub ungated: ThresholdMetrics,
    pub hallucination_rate: Option<f64>,
    pub oracle_boxes: bool,
    pub items: Vec<ItemScores>,
}

pub fn evaluate(items: &[CorpusItem], thresholds: &[f64], oracle: bool) -> Result<MetricReport> {
    evaluate_with_idf(items, thresholds, oracle, None)
}

pub fn evaluate_with_idf(items: &[CorpusItem], thresholds: &[f64], oracle: bool, idf: Option<&DocFreq>) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::Data("corpus is empty".into()));
    }
    let ious = item_ious(items, oracle)?;
    let mut scores = score_items(items, idf);
    if !oracle {
        for (s, u) in scores.iter_mut().zip(&ious) {
            s.iou = Some(*u);
        }
    }
    let at = |k: f64| {
        let col = |m: Metric| m_at_k_iou(&scores.iter().map(|s| s.get(m)).collect::<Vec<_>>(), &ious, k);
        ThresholdMetrics {
            k,
            cider: col(Metric::Cider),
            bleu4: col(Metric::Bleu4),
            meteor: col(Metric::Meteor),
            rouge: col(Metric::Rouge),
        }
    };
    let ungated = at(f64::NEG_INFINITY);
    let thresholds = thresholds.iter().map(|&k| at(k)).collect();
    let hallucination_rate = if items.iter().all(|i| i.scene_vocab.is_some()) {
        let n_bad = scores.iter().filter(|s| s.hallucinating == Some(true)).count();
        Some(n_bad as f64 / items.len() as f64)
    } else {
        None
    };
    Ok(MetricReport {
        thresholds,
        ungated: ThresholdMetrics { k: 0.0, ..ungated },
        hallucination_rate,
        oracle_boxes: oracle,
        items: scores,
    })
}

impl MetricReport {
    pub fn to_json(&self) -> Value {
        let mut metrics = serde_json::Map::new();
        for t in &self.thresholds {
            metrics.insert(format!("C@{}", t.k), json!(t.cider));
            metrics.insert(format!("B4@{}", t.k), json!(t.bleu4));
            metrics.insert(format!("M@{}", t.k), json!(t.meteor));
            metrics.insert(format!("R@{}", t.k), json!(t.rouge));
        }
        json!({
            "metrics": metrics,
            "ungated": {"C": self.ungated.cider, "B4": self.ungated.bleu4, "M": self.ungated.meteor, "R": self.ungated.rouge},
            "hallucination_rate": self.hallucination_rate,
            "oracle_boxes": self.oracle_boxes,
            "meteor_variant": "M (lite)",
            "items": self.items,
        })
    }

    /// Table mirror, scores ×100 except hallucination rate in percent.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut header = Vec::new();
        for t in &self.thresholds {
            for m in ["C", "B-4", "M (lite)", "R"] {
                header.push(format!("{m}@{}", t.k));
            }
        }
        header.push("Hall".into());
        s.push_str(&header.join(" | "));
        s.push('\n');
        let mut row = Vec::new();
        for t in &self.thresholds {
            for v in [t.cider, t.bleu4, t.meteor, t.rouge] {
                row.push(format!("{:.2}", v * 100.0));
            }
        }
        row.push(self.hallucination_rate.map_or("-".into(), |h| format!("{:.1}", h * 100.0)));
        let _ = writeln!(s, "{}", row.join(" | "));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(c: &str, r: &str, pred: Option<f64>) -> CorpusItem {
        let cube = |x: f64| Aabb { center: [x, 0.0, 0.0], size: [2.0; 3] };
        CorpusItem {
            candidate: c.into(),
            references: vec![r.into()],
            pred_box: pred.map(cube),
            gt_box: Some(cube(0.0)),
            scene_vocab: Some(words(r).into_iter().collect()),
        }
    }

    #[test]
    fn oracle_mode_average() {
        assert_eq!(m_at_k_iou(&[0.4, 0.6], &[1.0, 1.0], 0.5), 0.5);
    }

    #[test]
    fn gated_item_drops_out() {
        let items = vec![item("a red chair here", "a red chair here", Some(1.0)), item("a b c d", "a b c d", Some(0.0))];
        let r = evaluate(&items, &[0.25, 0.5], false).unwrap();
        assert!((r.thresholds[0].rouge - 1.0).abs() < 1e-12);
        assert!((r.thresholds[1].rouge - 0.5).abs() < 1e-12);
        assert!((r.ungated.rouge - 1.0).abs() < 1e-12);
        let k0 = evaluate(&items, &[0.0], false).unwrap();
        assert_eq!(k0.thresholds[0].rouge, k0.ungated.rouge);
    }

    #[test]
    fn missing_boxes_need_oracle() {
        let items = vec![item("a", "a", None)];
        assert!(matches!(evaluate(&items, &[0.25], false), Err(Error::Argument(_))));
        assert!(evaluate(&items, &[0.25], true).is_ok());
    }

    #[test]
    fn corpus_round_trip_and_errors() {
        let items = vec![item("a red chair", "a red chair", Some(1.0))];
        assert_eq!(parse_corpus(&render_corpus(&items)).unwrap(), items);
        assert!(matches!(parse_corpus(""), Err(Error::Data(_))));
        assert!(parse_corpus(r#"{"candidate": "x", "references": []}"#).is_err());
        assert!(parse_corpus(r#"{"candidate": "x", "references": ["y"], "gt_box": [0,0,0,1,0,1]}"#).is_err());
    }

    #[test]
    fn report_json_keys() {
        let items = vec![item("a red chair", "a red chair", None), item("a blue lamp", "a green lamp", None)];
        let j = evaluate(&items, &DEFAULT_THRESHOLDS, true).unwrap().to_json();
        for k in ["C@0.25", "B4@0.25", "M@0.25", "R@0.25", "C@0.5", "B4@0.5", "M@0.5", "R@0.5"] {
            assert!(j["metrics"][k].is_number(), "{k}");
        }
        assert_eq!(j["hallucination_rate"], json!(0.5));
        assert_eq!(j["items"].as_array().unwrap().len(), 2);
    }
}
