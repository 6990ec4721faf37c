//! `mharag eval`: score a method on a dataset split and report effective
//! accuracy next to the inference cost for the same setting.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use mharag_core::cost::{flops_inference, CostReport};
use mharag_core::pipeline::{evaluate_classifier, EvalReport, EvalSetup};

use crate::artifacts::{build_store, load_dataset, load_phi, load_theta, manifest_path};
use crate::config::FileConfig;
use crate::output::{
    fmt_f64, fmt_opt_f64, fmt_opt_u64, persist_config, write_csv, Provenance, RunMeta,
};
use crate::runspec::{cost_inputs, resolve_point, Point};

#[derive(Debug, Args)]
pub struct EvalCli {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Pretrained generator checkpoint (theta.json).
    #[arg(long)]
    pub theta: Option<PathBuf>,
    /// Trained adapter checkpoint (phi-*.json); required for methods that
    /// carry trainable weights.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    /// Hybrid: keep this many retrieved exemplars as text too.
    #[arg(long)]
    pub c: Option<usize>,
    /// Which split to score: test (default) or dev.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub retrieval: Option<String>,
}

pub struct EvalRun {
    pub dir: PathBuf,
    pub report: EvalReport,
    pub cost: CostReport,
}

pub fn results_header() -> Vec<&'static str> {
    let mut cols = vec![
        "method",
        "dataset",
        "split",
        "seed",
        "k",
        "c",
        "heads",
        "m",
        "lr",
        "epochs",
        "eff_acc",
        "tp",
        "fp",
        "tn",
        "fn",
        "n",
        "total_flops",
        "encoder_flops",
        "projector_flops",
        "lm_prefill_flops",
        "lm_decode_flops",
        "retrieval_word_ops",
    ];
    cols.extend(Provenance::columns());
    cols
}

#[allow(clippy::too_many_arguments)]
pub fn results_row(
    point: &Point,
    dataset_kind: &str,
    split: &str,
    seed: u64,
    lr: Option<f64>,
    epochs: Option<usize>,
    report: &EvalReport,
    cost: &CostReport,
    provenance: &Provenance,
) -> Vec<String> {
    let mut cells = vec![
        point.method.to_string(),
        dataset_kind.to_string(),
        split.to_string(),
        seed.to_string(),
        point.k.to_string(),
        point.c.to_string(),
        point.heads.to_string(),
        point.m.to_string(),
        fmt_opt_f64(lr),
        epochs.map(|e| e.to_string()).unwrap_or_default(),
        fmt_f64(report.effective_accuracy),
        report.counts.tp.to_string(),
        report.counts.fp.to_string(),
        report.counts.tn.to_string(),
        report.counts.fn_.to_string(),
        report.n.to_string(),
        cost.total_flops.to_string(),
        cost.encoder_flops.to_string(),
        cost.projector_flops.to_string(),
        cost.lm_prefill_flops.to_string(),
        cost.lm_decode_flops.to_string(),
        fmt_opt_u64(cost.retrieval_word_ops),
    ];
    cells.extend(provenance.values());
    cells
}

impl EvalCli {
    fn as_file_config(&self) -> FileConfig {
        FileConfig {
            method: self.method.clone(),
            k: self.k,
            heads: self.heads,
            m: self.m,
            c: self.c,
            seeds: self.seed.map(|s| vec![s]),
            out: self.out.clone(),
            dataset: self.dataset.clone(),
            theta: self.theta.clone(),
            retrieval: self.retrieval.clone(),
            ..FileConfig::default()
        }
    }
}

pub fn run(cli: &EvalCli) -> Result<EvalRun> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let merged = cli.as_file_config().merge(file);
    let method = merged
        .method()?
        .context("eval needs `method` (config key or --method)")?;
    let dataset_dir = merged
        .dataset
        .clone()
        .context("eval needs `dataset` (config key or --dataset)")?;
    let theta_path = merged
        .theta
        .clone()
        .context("eval needs `theta` (config key or --theta)")?;

    let dataset = load_dataset(&dataset_dir)?;
    let theta = load_theta(&theta_path)?;
    let point = resolve_point(&merged, method)?;
    let seed = *merged.seeds().first().expect("seeds() is never empty");

    let adapter = match (&cli.checkpoint, method.has_adapter()) {
        (Some(path), true) => Some(load_phi(path, method)?),
        (None, true) => bail!(
            "{method} carries trained weights; pass --checkpoint phi-{method}-seed<seed>.json \
             (produce one with `mharag train`)"
        ),
        (Some(_), false) => bail!("{method} has no trained weights; drop --checkpoint"),
        (None, false) => None,
    };

    let split = cli.split.clone().unwrap_or_else(|| "test".into());
    let items = match split.as_str() {
        "test" => &dataset.test,
        "dev" => &dataset.dev,
        other => bail!("unknown split {other:?}; use test or dev"),
    };

    let (store, spec, _mode) = build_store(&dataset, &merged)?;
    let uses_store = method.uses_retrieval() && point.k > 0;
    let setup = EvalSetup {
        lm: &theta,
        method,
        adapter: adapter.as_ref(),
        store: uses_store.then_some(&store),
        k: point.k,
        text_context: point.c,
        shuffle_seed: None,
    };
    let report = evaluate_classifier(&setup, items)?;

    let pool = if uses_store { store.len() as u64 } else { 0 };
    let cost = flops_inference(&cost_inputs(&merged, &point, &theta.config, spec, pool))?;

    let dir = merged.out_root().join(format!("eval-{method}"));
    let resolved = crate::config::resolved_toml(&merged)?;
    let provenance = persist_config(&dir, &resolved, Some(&manifest_path(&dataset_dir)))?;
    let kind = dataset.manifest.kind.to_string();
    let row = results_row(
        &point,
        &kind,
        &split,
        seed,
        merged.lr,
        merged.epochs,
        &report,
        &cost,
        &provenance,
    );
    let results_path = dir.join("results.csv");
    write_csv(&results_path, &results_header(), &[row])?;
    RunMeta::write(&dir, "eval", &provenance, &[results_path])?;

    println!(
        "{method} on {kind} {split}: eff_acc {:.2} over {} items (tp {} fp {} tn {} fn {})",
        report.effective_accuracy,
        report.n,
        report.counts.tp,
        report.counts.fp,
        report.counts.tn,
        report.counts.fn_
    );
    println!(
        "cost: total {} FLOPs (encoder {}, projector {}, prefill {}, decode {}){}",
        cost.total_flops,
        cost.encoder_flops,
        cost.projector_flops,
        cost.lm_prefill_flops,
        cost.lm_decode_flops,
        cost.retrieval_word_ops
            .map(|w| format!(", retrieval {w} word-ops"))
            .unwrap_or_default()
    );
    Ok(EvalRun { dir, report, cost })
}
