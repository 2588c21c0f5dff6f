//! Verified question/answer knowledge base and dense top-1 retrieval.
//!
//! The JSON Lines format is one entry per line:
//! `{"id":..,"question":..,"answer":..,"embedding":[..],"document":..}` with
//! `document` optional.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

/// Retrieval-score threshold of the similarity-only baseline.
pub const DEFAULT_TAU: f64 = 0.85;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbEntry {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub document: Option<String>,
}

#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    entries: Vec<KbEntry>,
    /// Unit-normalized copies of the entry embeddings, row-major.
    unit: Vec<f64>,
    dim: usize,
}

impl KnowledgeBase {
    /// Validates and indexes `entries`. An empty list is allowed; retrieval on it fails.
    pub fn new(entries: Vec<KbEntry>) -> Result<Self> {
        let dim = entries.first().map_or(0, |e| e.embedding.len());
        let mut seen = HashSet::new();
        let mut unit = Vec::with_capacity(entries.len() * dim);
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(PipelineError::KnowledgeBase(format!("duplicate id {:?}", e.id)));
            }
            if e.embedding.len() != dim {
                return Err(PipelineError::KnowledgeBase(format!(
                    "entry {:?}: embedding has {} dimensions, expected {dim}",
                    e.id,
                    e.embedding.len()
                )));
            }
            let norm = l2(&e.embedding);
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(PipelineError::KnowledgeBase(format!(
                    "entry {:?}: embedding must be finite and non-zero",
                    e.id
                )));
            }
            unit.extend(e.embedding.iter().map(|x| x / norm));
        }
        Ok(KnowledgeBase { entries, unit, dim })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| PipelineError::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| PipelineError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: KbEntry = serde_json::from_str(&line).map_err(|e| {
                PipelineError::KnowledgeBase(format!("{}:{}: {e}", path.display(), n + 1))
            })?;
            entries.push(entry);
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[KbEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Embedding dimension (0 for an empty base).
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Entry with the highest cosine similarity to `query`, and that similarity.
    /// Equal scores go to the lexicographically smallest id.
    pub fn retrieve_top1(&self, query: &[f64]) -> Result<(&KbEntry, f64)> {
        if self.entries.is_empty() {
            return Err(PipelineError::EmptyKnowledgeBase);
        }
        if query.len() != self.dim {
            return Err(PipelineError::KnowledgeBase(format!(
                "query has {} dimensions, expected {}",
                query.len(),
                self.dim
            )));
        }
        let qn = l2(query);
        if !(qn > 0.0 && qn.is_finite()) {
            return Err(PipelineError::KnowledgeBase(
                "query embedding must be finite and non-zero".into(),
            ));
        }
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, row) in self.unit.chunks_exact(self.dim).enumerate() {
            let score = dot(row, query) / qn;
            if score > best_score
                || (score == best_score && self.entries[i].id < self.entries[best].id)
            {
                best = i;
                best_score = score;
            }
        }
        Ok((&self.entries[best], best_score.clamp(-1.0, 1.0)))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity of two non-zero vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (l2(a) * l2(b))
}

/// Similarity-only baseline: accept iff `score >= tau`.
pub fn threshold_judge(score: f64, tau: f64) -> u8 {
    u8::from(score >= tau)
}
