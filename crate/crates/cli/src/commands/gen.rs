//! `mharag gen`: synthesize a benchmark dataset and its oracle manifest.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use mharag_core::data::generators::{
    gen_cluster_classification, gen_doc_qa, gen_order_sensitive_probe, ClusterSpec, DocQaSpec,
    ProbeSpec,
};
use mharag_core::data::GeneratedDataset;

use crate::config::FileConfig;
use crate::output::{persist_config, RunMeta};

#[derive(Debug, Args)]
pub struct GenCli {
    /// Task family: cluster, doc_qa, or probe.
    #[arg(long)]
    pub kind: String,
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: <out-root>/datasets/<kind>-seed<seed>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub dev: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    /// Cluster task: number of string clusters.
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Cluster task: per-character mutation rate.
    #[arg(long)]
    pub edit_rate: Option<f64>,
    /// QA task: number of entities (each carries six property facts).
    #[arg(long)]
    pub entities: Option<usize>,
    /// Probe: number of test items.
    #[arg(long)]
    pub items: Option<usize>,
    /// Probe: conflict strength 1..=3.
    #[arg(long)]
    pub strength: Option<u32>,
    /// Probe/cluster: exemplars retrieved per question.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
}

pub struct GenOutcome {
    pub dir: PathBuf,
    pub dataset: GeneratedDataset,
}

pub fn run(cli: &GenCli) -> Result<GenOutcome> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let flags = FileConfig {
        out: cli.out.clone(),
        embed_dim: cli.embed_dim,
        ..FileConfig::default()
    };
    let merged = flags.merge(file);
    let seed = cli.seed.unwrap_or(0);

    let dataset = match cli.kind.as_str() {
        "cluster" => {
            let defaults = ClusterSpec::default();
            gen_cluster_classification(&ClusterSpec {
                seed,
                clusters: cli.clusters.unwrap_or(defaults.clusters),
                edit_rate: cli.edit_rate.unwrap_or(defaults.edit_rate),
                train_size: cli.train.unwrap_or(defaults.train_size),
                dev_size: cli.dev.unwrap_or(defaults.dev_size),
                test_size: cli.test.unwrap_or(defaults.test_size),
                knn_k: cli.k.unwrap_or(defaults.knn_k),
                embed_spec: merged.embed_spec(None),
                ..defaults
            })?
        }
        "doc_qa" => {
            let defaults = DocQaSpec::default();
            gen_doc_qa(&DocQaSpec {
                seed,
                entities: cli.entities.unwrap_or(defaults.entities),
                train_size: cli.train.unwrap_or(defaults.train_size),
                dev_size: cli.dev.unwrap_or(defaults.dev_size),
                test_size: cli.test.unwrap_or(defaults.test_size),
                embed_spec: merged.embed_spec(Some(defaults.embed_spec)),
                ..defaults
            })?
        }
        "probe" => {
            let defaults = ProbeSpec::default();
            gen_order_sensitive_probe(&ProbeSpec {
                seed,
                strength: cli.strength.unwrap_or(defaults.strength),
                items: cli.items.unwrap_or(defaults.items),
                k: cli.k.unwrap_or(defaults.k),
            })?
        }
        other => bail!("unknown dataset kind {other:?} (cluster, doc_qa, or probe)"),
    };

    let dir = cli.out.clone().unwrap_or_else(|| {
        merged
            .out_root()
            .join("datasets")
            .join(format!("{}-seed{seed}", cli.kind))
    });
    dataset.save(&dir)?;
    let resolved = crate::config::resolved_toml(&merged)?;
    let provenance = persist_config(&dir, &resolved, Some(&crate::artifacts::manifest_path(&dir)))?;
    RunMeta::write(&dir, "gen", &provenance, &[dir.join("manifest.json")])?;

    let m = &dataset.manifest;
    println!(
        "wrote {} dataset to {} (train {} / dev {} / test {})",
        m.kind,
        dir.display(),
        m.train_size,
        m.dev_size,
        m.test_size
    );
    println!("  label balance: {:.1}% Yes", m.label_balance_pct);
    if let Some(acc) = m.knn_oracle_acc {
        println!("  kNN oracle accuracy: {acc:.1}%");
    }
    if let Some(rate) = m.retrieval_top1_hit_rate {
        println!("  top-1 retrieval hit rate: {rate:.1}%");
    }
    if let Some(acc) = m.matching_oracle_acc {
        println!("  gold-doc matching oracle: {acc:.1}%");
    }
    Ok(GenOutcome { dir, dataset })
}
