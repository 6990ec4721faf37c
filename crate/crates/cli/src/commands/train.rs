//! `mharag train`: fit adapter weights φ against a frozen generator, one
//! run per seed, persisting checkpoints and the epoch history.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use mharag_core::encoders::Checkpoint;
use mharag_core::training::{lr_sweep, train_adapter, HistoryRow, TrainOutcome};

use crate::artifacts::{load_dataset, load_theta, manifest_path};
use crate::config::FileConfig;
use crate::output::{fmt_f64, fmt_opt_f64, persist_config, write_csv, Provenance, RunMeta};
use crate::runspec::{resolve_point, train_config};

#[derive(Debug, Args)]
pub struct TrainCli {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Pretrained generator checkpoint (theta.json).
    #[arg(long)]
    pub theta: Option<PathBuf>,
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
    #[arg(long)]
    pub lr: Option<f64>,
    /// Sweep these learning rates per seed and keep the dev-best.
    #[arg(long, value_delimiter = ',')]
    pub lr_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub dev_fraction: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub retrieval: Option<String>,
}

pub struct TrainedSeed {
    pub seed: u64,
    pub phi_path: PathBuf,
    pub outcome: TrainOutcome,
    pub chosen_lr: f64,
}

pub struct TrainRun {
    pub dir: PathBuf,
    pub seeds: Vec<TrainedSeed>,
}

impl TrainCli {
    fn as_file_config(&self) -> FileConfig {
        FileConfig {
            method: self.method.clone(),
            k: self.k,
            heads: self.heads,
            m: self.m,
            c: self.c,
            lr: self.lr,
            lr_grid: self.lr_grid.clone(),
            epochs: self.epochs,
            batch: self.batch,
            seeds: self.seeds.clone(),
            dev_fraction: self.dev_fraction,
            out: self.out.clone(),
            dataset: self.dataset.clone(),
            theta: self.theta.clone(),
            retrieval: self.retrieval.clone(),
            ..FileConfig::default()
        }
    }
}

pub fn history_header() -> Vec<&'static str> {
    let mut cols = vec![
        "epoch",
        "train_loss",
        "dev_eff_acc",
        "lr",
        "seed",
        "method",
        "k",
        "heads",
        "m",
    ];
    cols.extend(Provenance::columns());
    cols
}

pub fn history_row(row: &HistoryRow, provenance: &Provenance) -> Vec<String> {
    let mut cells = vec![
        row.epoch.to_string(),
        fmt_f64(row.train_loss),
        fmt_opt_f64(row.dev_eff_acc),
        fmt_f64(row.lr),
        row.seed.to_string(),
        row.method.to_string(),
        row.k.to_string(),
        row.heads.to_string(),
        row.m.to_string(),
    ];
    cells.extend(provenance.values());
    cells
}

pub fn run(cli: &TrainCli) -> Result<TrainRun> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let merged = cli.as_file_config().merge(file);
    let method = merged
        .method()?
        .context("train needs `method` (config key or --method)")?;
    let dataset_dir = merged
        .dataset
        .clone()
        .context("train needs `dataset` (config key or --dataset)")?;
    let theta_path = merged
        .theta
        .clone()
        .context("train needs `theta` (config key or --theta)")?;

    let dataset = load_dataset(&dataset_dir)?;
    let theta = load_theta(&theta_path)?;
    let point = resolve_point(&merged, method)?;
    let seeds = merged.seeds();

    let dir = merged.out_root().join(format!("train-{method}"));
    let resolved = crate::config::resolved_toml(&merged)?;
    let provenance = persist_config(&dir, &resolved, Some(&manifest_path(&dataset_dir)))?;

    let mut trained = Vec::new();
    let mut history_rows = Vec::new();
    let mut sweep_rows = Vec::new();
    let mut outputs = Vec::new();
    for &seed in &seeds {
        let base = train_config(&merged, &point, &dataset, seed)?;
        let (outcome, chosen_lr) = match &merged.lr_grid {
            Some(grid) => {
                let swept = lr_sweep(&theta, &dataset.train, &base, grid)?;
                for p in &swept.points {
                    sweep_rows.push(vec![
                        seed.to_string(),
                        fmt_f64(p.lr),
                        fmt_opt_f64(p.dev_eff_acc),
                        p.error.clone().unwrap_or_default(),
                    ]);
                }
                (swept.best, swept.best_lr)
            }
            None => (train_adapter(&theta, &dataset.train, &base)?, base.lr),
        };
        let phi_path = dir.join(format!("phi-{method}-seed{seed}.json"));
        Checkpoint::save(&outcome.adapter, &phi_path)?;
        outputs.push(phi_path.clone());
        history_rows.extend(outcome.history.iter().map(|r| history_row(r, &provenance)));
        println!(
            "seed {seed}: {} epochs, final loss {:.4}, dev {} (best epoch {}), lr {}, {} skipped",
            outcome.history.len(),
            outcome.history.last().map(|r| r.train_loss).unwrap_or(f64::NAN),
            outcome
                .best_dev_eff_acc
                .map(|a| format!("{a:.2}"))
                .unwrap_or_else(|| "-".into()),
            outcome.best_epoch,
            chosen_lr,
            outcome.skipped_samples,
        );
        trained.push(TrainedSeed {
            seed,
            phi_path,
            outcome,
            chosen_lr,
        });
    }

    let history_path = dir.join("history.csv");
    write_csv(&history_path, &history_header(), &history_rows)?;
    outputs.push(history_path);
    if !sweep_rows.is_empty() {
        let path = dir.join("lr_points.csv");
        write_csv(&path, &["seed", "lr", "dev_eff_acc", "error"], &sweep_rows)?;
        outputs.push(path);
    }
    RunMeta::write(&dir, "train", &provenance, &outputs)?;
    println!("train run written to {}", dir.display());
    Ok(TrainRun { dir, seeds: trained })
}
