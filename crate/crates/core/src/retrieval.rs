//! Exemplar store and top-K retrieval.
//!
//! Two similarity modes: Tanimoto over question fingerprints (the molecular
//! stand-in) and cosine between the query question and each candidate's
//! question⊕answer embedding. Scans are linear and results follow a total
//! order — score descending, id ascending — so retrieval is deterministic
//! regardless of insertion order.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Exemplar;
use crate::embedding::{join_texts, DenseEmbedding, EmbedSpec, EmbeddingError, Fingerprint};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("store is empty after exclusions; nothing to retrieve")]
    EmptyAfterExclusion,
    #[error("duplicate exemplar id {0:?} in store")]
    DuplicateId(String),
    #[error("{0}")]
    Embedding(#[from] EmbeddingError),
    #[error("store io: {0}")]
    Io(#[from] std::io::Error),
    #[error("store file is corrupt: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, RetrievalError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    /// Bit-set overlap on the question text only.
    Tanimoto,
    /// Dense cosine: query question vs candidate question⊕answer.
    Cosine,
}

/// Tanimoto similarity |A∩B| / |A∪B|; two empty sets score 0 by convention.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> std::result::Result<f64, EmbeddingError> {
    let union = a.union_count(b)?;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(a.intersection_count(b)? as f64 / union as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StoredExemplar {
    exemplar: Exemplar,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fingerprint: Option<Fingerprint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dense: Option<DenseEmbedding>,
}

/// Retrieval index over a training split. Keys are precomputed at build time;
/// queries only embed/fingerprint the incoming question.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExemplarStore {
    mode: RetrievalMode,
    embed_spec: EmbedSpec,
    entries: Vec<StoredExemplar>,
}

/// Result of one top-K query. `truncated` reports that fewer than the
/// requested K candidates existed after exclusion.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub truncated: bool,
}

impl ExemplarStore {
    pub fn build(
        exemplars: &[Exemplar],
        mode: RetrievalMode,
        embed_spec: EmbedSpec,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut entries = Vec::with_capacity(exemplars.len());
        for ex in exemplars {
            if !seen.insert(ex.id.clone()) {
                return Err(RetrievalError::DuplicateId(ex.id.clone()));
            }
            let (fingerprint, dense) = match mode {
                RetrievalMode::Tanimoto => (Some(embed_spec.fingerprint(&ex.question)?), None),
                RetrievalMode::Cosine => {
                    let key = join_texts(&[ex.question.as_str(), ex.answer.as_str()]);
                    (None, Some(embed_spec.embed(&key)?))
                }
            };
            entries.push(StoredExemplar {
                exemplar: ex.clone(),
                fingerprint,
                dense,
            });
        }
        Ok(ExemplarStore {
            mode,
            embed_spec,
            entries,
        })
    }

    pub fn mode(&self) -> RetrievalMode {
        self.mode
    }

    pub fn embed_spec(&self) -> EmbedSpec {
        self.embed_spec
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Exemplar> {
        self.entries
            .iter()
            .find(|e| e.exemplar.id == id)
            .map(|e| &e.exemplar)
    }

    pub fn exemplars(&self) -> impl Iterator<Item = &Exemplar> {
        self.entries.iter().map(|e| &e.exemplar)
    }

    /// Scores every candidate against `question`. Used by top_k and by the
    /// generators' oracles.
    pub fn score_all(&self, question: &str) -> Result<Vec<(String, f64)>> {
        match self.mode {
            RetrievalMode::Tanimoto => {
                let q = self.embed_spec.fingerprint(question)?;
                self.entries
                    .iter()
                    .map(|e| {
                        let fp = e.fingerprint.as_ref().ok_or_else(|| {
                            RetrievalError::Corrupt("tanimoto store entry missing fingerprint".into())
                        })?;
                        Ok((e.exemplar.id.clone(), tanimoto(&q, fp)?))
                    })
                    .collect()
            }
            RetrievalMode::Cosine => {
                let q = self.embed_spec.embed(question)?;
                self.entries
                    .iter()
                    .map(|e| {
                        let d = e.dense.as_ref().ok_or_else(|| {
                            RetrievalError::Corrupt("cosine store entry missing embedding".into())
                        })?;
                        Ok((e.exemplar.id.clone(), q.cosine(d)?))
                    })
                    .collect()
            }
        }
    }

    /// Top-K most similar exemplars to `question`, optionally excluding one
    /// id (leave-one-out during training). K larger than the candidate pool
    /// clamps and sets `truncated`; an empty pool is an error.
    pub fn top_k(&self, question: &str, k: usize, exclude: Option<&str>) -> Result<RetrievalResult> {
        let mut scored: Vec<(String, f64)> = self
            .score_all(question)?
            .into_iter()
            .filter(|(id, _)| Some(id.as_str()) != exclude)
            .collect();
        if scored.is_empty() {
            return Err(RetrievalError::EmptyAfterExclusion);
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let truncated = k > scored.len();
        scored.truncate(k);
        let (ids, scores) = scored.into_iter().unzip();
        Ok(RetrievalResult {
            ids,
            scores,
            truncated,
        })
    }

    /// Resolves retrieved ids back to exemplars, in retrieval order.
    pub fn resolve(&self, ids: &[String]) -> Result<Vec<Exemplar>> {
        ids.iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| RetrievalError::Corrupt(format!("unknown id {id:?}")))
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string(self)
            .map_err(|e| RetrievalError::Corrupt(e.to_string()))?;
        fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)?;
        let store: ExemplarStore =
            serde_json::from_str(&raw).map_err(|e| RetrievalError::Corrupt(e.to_string()))?;
        Ok(store)
    }
}
