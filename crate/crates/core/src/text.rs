//! Reasoning-output evaluation: category accuracy, ROUGE-L and an
//! exact-match METEOR variant.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DistortionCategory;

/// Structured judgment for one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub region_id: String,
    pub category: DistortionCategory,
    pub description: String,
    pub severity: f64,
}

/// Reference label a prediction is scored against, keyed by region id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceLabel {
    pub region_id: String,
    pub category: DistortionCategory,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReasoningReport {
    pub accuracy: f64,
    pub rouge_l: f64,
    pub meteor_lite: f64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TextMetricError {
    #[error("{0} has no alphanumeric tokens")]
    EmptyTokens(&'static str),
    #[error("prediction for region {0:?} has no reference")]
    UnmatchedRegion(String),
    #[error("duplicate region id {0:?}")]
    DuplicateRegion(String),
    #[error("no matched prediction/reference pairs")]
    NoPairs,
}

/// Hook for embedding-similarity columns; no implementation ships here.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f32>, String>;
}

/// Lowercase, split on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

fn tokens_pair(
    candidate: &str,
    reference: &str,
) -> Result<(Vec<String>, Vec<String>), TextMetricError> {
    let c = tokenize(candidate);
    if c.is_empty() {
        return Err(TextMetricError::EmptyTokens("candidate"));
    }
    let r = tokenize(reference);
    if r.is_empty() {
        return Err(TextMetricError::EmptyTokens("reference"));
    }
    Ok((c, r))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &str, reference: &str) -> Result<f64, TextMetricError> {
    let (c, r) = tokens_pair(candidate, reference)?;
    let lcs = lcs_len(&c, &r) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let p = lcs / c.len() as f64;
    let rec = lcs / r.len() as f64;
    Ok(2.0 * p * rec / (p + rec))
}

/// METEOR with exact unigram matching only: greedy left-to-right alignment,
/// `F = 10PR / (R + 9P)`, fragmentation penalty `0.5 · (chunks/matches)³`.
pub fn meteor_lite(candidate: &str, reference: &str) -> Result<f64, TextMetricError> {
    let (c, r) = tokens_pair(candidate, reference)?;
    let mut used = vec![false; r.len()];
    let mut alignment = Vec::new();
    for tok in &c {
        if let Some(j) = (0..r.len()).find(|&j| !used[j] && &r[j] == tok) {
            used[j] = true;
            alignment.push(Some(j));
        } else {
            alignment.push(None);
        }
    }
    let matches = alignment.iter().flatten().count();
    if matches == 0 {
        return Ok(0.0);
    }
    // a chunk continues while consecutive candidate tokens map to consecutive reference tokens
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for slot in &alignment {
        match (prev, slot) {
            (Some(p), Some(j)) if *j == p + 1 => {}
            (_, Some(_)) => chunks += 1,
            _ => {}
        }
        prev = *slot;
    }
    let p = matches as f64 / c.len() as f64;
    let rec = matches as f64 / r.len() as f64;
    let f = 10.0 * p * rec / (rec + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
    Ok(f * (1.0 - penalty))
}

fn index_references(truth: &[ReferenceLabel]) -> Result<HashMap<&str, &ReferenceLabel>, TextMetricError> {
    let mut by_id = HashMap::with_capacity(truth.len());
    for t in truth {
        if by_id.insert(t.region_id.as_str(), t).is_some() {
            return Err(TextMetricError::DuplicateRegion(t.region_id.clone()));
        }
    }
    Ok(by_id)
}

fn matched_pairs<'a>(
    preds: &'a [Diagnosis],
    truth: &'a [ReferenceLabel],
) -> Result<Vec<(&'a Diagnosis, &'a ReferenceLabel)>, TextMetricError> {
    let by_id = index_references(truth)?;
    let mut pairs = Vec::with_capacity(preds.len());
    let mut seen = std::collections::HashSet::new();
    for p in preds {
        if !seen.insert(p.region_id.as_str()) {
            return Err(TextMetricError::DuplicateRegion(p.region_id.clone()));
        }
        let t = by_id
            .get(p.region_id.as_str())
            .ok_or_else(|| TextMetricError::UnmatchedRegion(p.region_id.clone()))?;
        pairs.push((p, *t));
    }
    if pairs.is_empty() {
        return Err(TextMetricError::NoPairs);
    }
    Ok(pairs)
}

/// Fraction of predictions whose category equals the referenced one.
pub fn category_accuracy(preds: &[Diagnosis], truth: &[ReferenceLabel]) -> Result<f64, TextMetricError> {
    let pairs = matched_pairs(preds, truth)?;
    let correct = pairs.iter().filter(|(p, t)| p.category == t.category).count();
    Ok(correct as f64 / pairs.len() as f64)
}

pub fn evaluate_reasoning(
    preds: &[Diagnosis],
    truth: &[ReferenceLabel],
) -> Result<ReasoningReport, TextMetricError> {
    let pairs = matched_pairs(preds, truth)?;
    let n = pairs.len() as f64;
    let (mut correct, mut rouge, mut meteor) = (0usize, 0.0, 0.0);
    for (p, t) in &pairs {
        correct += usize::from(p.category == t.category);
        rouge += rouge_l(&p.description, &t.description)?;
        meteor += meteor_lite(&p.description, &t.description)?;
    }
    Ok(ReasoningReport {
        accuracy: correct as f64 / n,
        rouge_l: rouge / n,
        meteor_lite: meteor / n,
    })
}
