//! Loading and wiring of on-disk artifacts with errors that name the
//! missing piece and the command that produces it.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mharag_core::data::{DatasetKind, GeneratedDataset};
use mharag_core::embedding::EmbedSpec;
use mharag_core::encoders::{AdapterParams, Checkpoint, Method};
use mharag_core::retrieval::{ExemplarStore, RetrievalMode};
use mharag_core::toy_lm::{LmCheckpoint, LmWeights};

use crate::config::FileConfig;

pub fn load_dataset(path: &Path) -> Result<GeneratedDataset> {
    GeneratedDataset::load(path).with_context(|| {
        format!(
            "cannot load dataset at {} (generate one with `mharag gen`)",
            path.display()
        )
    })
}

pub fn manifest_path(dataset_dir: &Path) -> PathBuf {
    dataset_dir.join("manifest.json")
}

pub fn load_theta(path: &Path) -> Result<LmWeights> {
    LmCheckpoint::load(path).with_context(|| {
        format!(
            "cannot load generator weights at {} (produce them with `mharag pretrain`)",
            path.display()
        )
    })
}

pub fn load_phi(path: &Path, method: Method) -> Result<AdapterParams> {
    let params = Checkpoint::load(path).with_context(|| {
        format!(
            "cannot load adapter checkpoint at {} (train one with `mharag train`)",
            path.display()
        )
    })?;
    anyhow::ensure!(
        params.method() == method,
        "checkpoint {} holds {} weights, expected {method}",
        path.display(),
        params.method()
    );
    Ok(params)
}

/// Retrieval mode: explicit setting wins, else the dataset kind's natural
/// similarity (molecular strings use Tanimoto bitsets, QA uses cosine).
pub fn resolve_retrieval(config: &FileConfig, kind: DatasetKind) -> Result<RetrievalMode> {
    if config.retrieval.is_some() {
        return config.retrieval_mode();
    }
    Ok(match kind {
        DatasetKind::DocQa => RetrievalMode::Cosine,
        DatasetKind::ClusterClassification | DatasetKind::OrderProbe => RetrievalMode::Tanimoto,
    })
}

/// Store over the full train split, embedded the same way the dataset's
/// manifest oracles were certified unless the config overrides it.
pub fn build_store(
    dataset: &GeneratedDataset,
    config: &FileConfig,
) -> Result<(ExemplarStore, EmbedSpec, RetrievalMode)> {
    let spec = config.embed_spec(Some(dataset.manifest.embed_spec));
    let mode = resolve_retrieval(config, dataset.manifest.kind)?;
    let store = ExemplarStore::build(&dataset.train, mode, spec)
        .context("building the exemplar store over the train split")?;
    Ok((store, spec, mode))
}
