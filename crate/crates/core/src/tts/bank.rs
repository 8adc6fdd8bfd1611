use serde::Serialize;

use crate::alignment::similarity;
use crate::model::Model;
use crate::{Error, Result};

pub const DEFAULT_BANK: &str = include_str!("default_bank.txt");
const UNIT_TOL: f64 = 1e-9;

/// Descriptor lines of a bank file: blank lines and `#` comments skipped.
pub fn parse_bank(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

/// Short text descriptors with their unit embeddings in the shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorBank {
    descriptors: Vec<String>,
    embeddings: Vec<Vec<f64>>,
}

impl DescriptorBank {
    pub fn new(descriptors: Vec<String>, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        if descriptors.is_empty() {
            return Err(Error::Config("descriptor bank is empty".into()));
        }
        if descriptors.len() != embeddings.len() {
            return Err(Error::Config(format!(
                "{} descriptors but {} embeddings",
                descriptors.len(),
                embeddings.len()
            )));
        }
        for (i, e) in embeddings.iter().enumerate() {
            let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::Degenerate(format!("bank embedding {i} has norm {n}")));
            }
        }
        Ok(Self { descriptors, embeddings })
    }

    /// Embeds each descriptor with the text tower and text head.
    pub fn from_model(model: &Model, descriptors: Vec<String>) -> Result<Self> {
        let embeddings = descriptors.iter().map(|d| model.embed_text(d)).collect::<Result<Vec<_>>>()?;
        Self::new(descriptors, embeddings)
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn descriptors(&self) -> &[String] {
        &self.descriptors
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneSummary {
    pub descriptors: Vec<String>,
    pub similarities: Vec<f64>,
    pub rendered: String,
}

/// Top `k_s` descriptors by cosine similarity, lower bank index first on
/// ties, joined with `", "` in descending order.
pub fn retrieve_summary(scene_unit: &[f64], bank: &DescriptorBank, k_s: usize) -> Result<SceneSummary> {
    if bank.is_empty() {
        return Err(Error::Config("descriptor bank is empty".into()));
    }
    if k_s == 0 {
        return Err(Error::Config("k_s must be at least 1".into()));
    }
    let sims: Vec<f64> = bank.embeddings.iter().map(|e| similarity(scene_unit, e)).collect();
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order.truncate(k_s);
    let descriptors: Vec<String> = order.iter().map(|&i| bank.descriptors[i].clone()).collect();
    Ok(SceneSummary {
        rendered: descriptors.join(", "),
        similarities: order.iter().map(|&i| sims[i]).collect(),
        descriptors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank() -> DescriptorBank {
        DescriptorBank::new(
            vec!["east".into(), "north".into(), "west".into()],
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]],
        )
        .unwrap()
    }

    #[test]
    fn two_nearest() {
        let s = retrieve_summary(&[1.0, 0.0], &bank(), 2).unwrap();
        assert_eq!(s.descriptors, vec!["east", "north"]);
        assert_eq!(s.similarities, vec![1.0, 0.0]);
        assert_eq!(s.rendered, "east, north");
    }

    #[test]
    fn exhaustion_and_errors() {
        let s = retrieve_summary(&[0.0, -1.0], &bank(), 10).unwrap();
        assert_eq!(s.descriptors, vec!["east", "west", "north"]);
        assert!(retrieve_summary(&[1.0, 0.0], &bank(), 0).is_err());
        assert!(DescriptorBank::new(vec![], vec![]).is_err());
        assert!(DescriptorBank::new(vec!["x".into()], vec![vec![2.0]]).is_err());
    }

    #[test]
    fn default_bank_has_64_entries() {
        assert_eq!(parse_bank(DEFAULT_BANK).len(), 64);
        assert_eq!(parse_bank("# c\n\n a b \nc # d\n"), vec!["a b", "c"]);
    }
}
