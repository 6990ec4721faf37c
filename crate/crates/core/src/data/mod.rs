//! Dataset types, JSONL ingestion, and synthetic benchmark generators.
//!
//! The generators are engineered so retrieval genuinely helps: a clustered
//! string-classification task whose nearest neighbors share the label, a
//! doc-grounded QA task whose answers are decidable only from retrieved
//! records, and a small conflicting-evidence probe for the order-variance
//! protocol. Each generated dataset ships a manifest recording the seed and
//! the measured oracle numbers so downstream thresholds are pre-registered,
//! not tuned.

pub mod generators;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: duplicate id {id:?} on lines {first} and {second}")]
    DuplicateId {
        path: String,
        id: String,
        first: usize,
        second: usize,
    },
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset serialization: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("generator gave up after {retries} retries: {what} reached {got:.2}, needs {need:.2}")]
    OracleTooWeak {
        what: String,
        retries: u32,
        got: f64,
        need: f64,
    },
    #[error("generator config: {0}")]
    BadConfig(String),
    #[error("{0}")]
    Embedding(#[from] crate::embedding::EmbeddingError),
    #[error("{0}")]
    Retrieval(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One supervised example: a question, its answer, and optionally the
/// grounding document the answer was drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc: Option<String>,
}

/// Which task family a dataset belongs to; drives the retrieval mode and
/// which oracle its manifest records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    ClusterClassification,
    DocQa,
    OrderProbe,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DatasetKind::ClusterClassification => "cluster_classification",
            DatasetKind::DocQa => "doc_qa",
            DatasetKind::OrderProbe => "order_probe",
        };
        f.write_str(s)
    }
}

/// Manifest written next to every generated dataset. Oracle numbers are
/// measured at generation time; acceptance thresholds reference these rather
/// than anything tuned after the fact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub kind: DatasetKind,
    pub seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    /// Percentage of "Yes" answers in train, to one decimal.
    pub label_balance_pct: f64,
    /// k-nearest-neighbor oracle accuracy on test (cluster task).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knn_oracle_acc: Option<f64>,
    /// Top-1 retrieval hit rate on test (QA task).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_top1_hit_rate: Option<f64>,
    /// Gold-doc string-matching oracle accuracy (QA task).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matching_oracle_acc: Option<f64>,
    /// Best accuracy achievable without any context (QA task: 50%).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_shot_bayes_pct: Option<f64>,
    /// Conflict strength the order probe settled on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_strength: Option<u32>,
    /// How many regeneration attempts the certified oracle needed.
    pub retries_used: u32,
    /// Embedding settings the oracle numbers were certified under; stores
    /// built over this dataset should use the same settings.
    #[serde(default)]
    pub embed_spec: crate::embedding::EmbedSpec,
}

pub const MANIFEST_FORMAT: u32 = 1;

/// A generated dataset with its splits and manifest, before hitting disk.
#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub train: Vec<Exemplar>,
    pub dev: Vec<Exemplar>,
    pub test: Vec<Exemplar>,
    pub manifest: Manifest,
}

impl GeneratedDataset {
    /// Writes train/dev/test JSONL plus `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_jsonl(&dir.join("train.jsonl"), &self.train)?;
        save_jsonl(&dir.join("dev.jsonl"), &self.dev)?;
        save_jsonl(&dir.join("test.jsonl"), &self.test)?;
        let manifest = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(dir.join("manifest.json"), manifest + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<GeneratedDataset> {
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        Ok(GeneratedDataset {
            train: load_jsonl(&dir.join("train.jsonl"))?,
            dev: load_jsonl(&dir.join("dev.jsonl"))?,
            test: load_jsonl(&dir.join("test.jsonl"))?,
            manifest,
        })
    }
}

/// Reads exemplars from JSONL. Malformed lines and duplicate ids are errors
/// naming the line; an empty file is allowed and returns an empty vec.
pub fn load_jsonl(path: &Path) -> Result<Vec<Exemplar>> {
    let display = path.display().to_string();
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Exemplar = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            path: display.clone(),
            line: lineno,
            msg: e.to_string(),
        })?;
        if ex.id.is_empty() || ex.question.is_empty() || ex.answer.is_empty() {
            return Err(DataError::Malformed {
                path: display.clone(),
                line: lineno,
                msg: "id, question, and answer must be non-empty".into(),
            });
        }
        if let Some(&first) = seen.get(&ex.id) {
            return Err(DataError::DuplicateId {
                path: display,
                id: ex.id,
                first,
                second: lineno,
            });
        }
        seen.insert(ex.id.clone(), lineno);
        out.push(ex);
    }
    Ok(out)
}

pub fn save_jsonl(path: &Path, exemplars: &[Exemplar]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for ex in exemplars {
        let line = serde_json::to_string(ex)?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: &str) -> Exemplar {
        Exemplar {
            id: id.into(),
            question: format!("q-{id}"),
            answer: "Yes".into(),
            doc: None,
        }
    }

    #[test]
    fn jsonl_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let data = vec![ex("a"), ex("b")];
        save_jsonl(&path, &data).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), data);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(&path, "{\"id\":\"a\",\"question\":\"q\",\"answer\":\"Yes\"}\nnot json\n").unwrap();
        let err = load_jsonl(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "got: {err}");
    }

    #[test]
    fn duplicate_ids_report_both_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let line = "{\"id\":\"a\",\"question\":\"q\",\"answer\":\"Yes\"}";
        fs::write(&path, format!("{line}\n{line}\n")).unwrap();
        let err = load_jsonl(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lines 1 and 2"), "got: {msg}");
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_jsonl(&path).unwrap().is_empty());
    }

    #[test]
    fn missing_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(&path, "{\"id\":\"a\",\"question\":\"q\"}\n").unwrap();
        assert!(load_jsonl(&path).is_err());
        fs::write(&path, "{\"id\":\"\",\"question\":\"q\",\"answer\":\"Yes\"}\n").unwrap();
        assert!(load_jsonl(&path).is_err());
    }

    #[test]
    fn doc_field_round_trips_and_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let with_doc = Exemplar {
            id: "x".into(),
            question: "q".into(),
            answer: "No".into(),
            doc: Some("record".into()),
        };
        save_jsonl(&path, std::slice::from_ref(&with_doc)).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), vec![with_doc]);
    }
}
