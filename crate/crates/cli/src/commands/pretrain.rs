//! `mharag pretrain`: train the frozen generator θ on the synthetic format
//! corpus and persist it as a checkpoint.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use mharag_core::data::generators::{gen_pretrain_corpus, CorpusSpec, CorpusStyle};
use mharag_core::toy_lm::{pretrain_toy, LmCheckpoint, PretrainConfig, PretrainReport};

use crate::config::FileConfig;
use crate::output::{persist_config, RunMeta};

#[derive(Debug, Args)]
pub struct PretrainCli {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: <out-root>/pretrain-<shape>-seed<seed>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Generator shape: standard or compact.
    #[arg(long)]
    pub lm_shape: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Corpus size in blocks.
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Corpus style: cluster, doc_qa, or mixed.
    #[arg(long)]
    pub style: Option<String>,
    #[arg(long)]
    pub corpus_seed: Option<u64>,
    /// Print a progress line every this many steps (0 = silent).
    #[arg(long, default_value_t = 0)]
    pub log_every: usize,
}

pub struct PretrainOutcome {
    pub theta_path: PathBuf,
    pub report: PretrainReport,
}

fn parse_style(name: &str) -> Result<CorpusStyle> {
    Ok(match name {
        "cluster" => CorpusStyle::Cluster,
        "doc_qa" => CorpusStyle::DocQa,
        "mixed" => CorpusStyle::Mixed,
        other => bail!("unknown corpus style {other:?} (cluster, doc_qa, or mixed)"),
    })
}

pub fn run(cli: &PretrainCli) -> Result<PretrainOutcome> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let flags = FileConfig {
        out: cli.out.clone(),
        lm_shape: cli.lm_shape.clone(),
        lm_seed: cli.seed,
        pretrain_steps: cli.steps,
        pretrain_batch: cli.batch,
        pretrain_lr: cli.lr,
        corpus_blocks: cli.blocks,
        corpus_style: cli.style.clone(),
        corpus_seed: cli.corpus_seed,
        ..FileConfig::default()
    };
    let merged = flags.merge(file);

    let lm_config = merged.lm_config()?;
    let shape_name = merged.lm_shape.as_deref().unwrap_or("standard");
    let seed = merged.lm_seed.unwrap_or(0);
    let defaults = PretrainConfig::default();
    let pretrain_config = PretrainConfig {
        steps: merged.pretrain_steps.unwrap_or(defaults.steps),
        batch: merged.pretrain_batch.unwrap_or(defaults.batch),
        lr: merged.pretrain_lr.unwrap_or(defaults.lr),
        seed,
        log_every: cli.log_every,
        ..defaults
    };
    let corpus_defaults = CorpusSpec::default();
    let corpus_spec = CorpusSpec {
        seed: merged.corpus_seed.unwrap_or(corpus_defaults.seed),
        blocks: merged.corpus_blocks.unwrap_or(corpus_defaults.blocks),
        style: parse_style(merged.corpus_style.as_deref().unwrap_or("mixed"))?,
    };

    let dir = cli.out.clone().unwrap_or_else(|| {
        merged
            .out_root()
            .join(format!("pretrain-{shape_name}-seed{seed}"))
    });
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;

    let corpus = gen_pretrain_corpus(&corpus_spec);
    let (weights, report) = pretrain_toy(&lm_config, &pretrain_config, &corpus)?;

    let theta_path = dir.join("theta.json");
    LmCheckpoint::save(&weights, &theta_path)?;
    std::fs::write(
        dir.join("pretrain.report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let resolved = crate::config::resolved_toml(&merged)?;
    let provenance = persist_config(&dir, &resolved, None)?;
    RunMeta::write(&dir, "pretrain", &provenance, &[theta_path.clone()])?;

    println!(
        "pretrained {shape_name} generator ({} steps over {} blocks): holdout loss {:.4} -> {:.4}",
        report.steps, report.trained_blocks, report.initial_holdout_loss, report.final_holdout_loss
    );
    println!("  theta: {} (checksum {})", theta_path.display(), &weights.checksum()[..12]);
    Ok(PretrainOutcome { theta_path, report })
}
