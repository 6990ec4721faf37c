//! `mharag order-variance`: re-score each method while permuting every test
//! item's retrieved exemplars under a set of shuffle seeds, then report the
//! spread. The attention encoder is held to a hard ceiling; text-prompt
//! baselines are expected to move; input-free prompts sit out.

use std::collections::HashMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use mharag_core::encoders::Method;
use mharag_core::pipeline::{order_variance_protocol, EvalSetup};

use crate::artifacts::{build_store, load_dataset, load_phi, load_theta, manifest_path};
use crate::config::FileConfig;
use crate::output::{fmt_f64, fmt_seed_list, persist_config, write_csv, Provenance, RunMeta};
use crate::runspec::resolve_point;

/// Spread at or below this counts as order-invariant for the PASS verdict.
pub const INVARIANCE_CEILING: f64 = 1e-4;

#[derive(Debug, Args)]
pub struct OrderVarianceCli {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Pretrained generator checkpoint (theta.json).
    #[arg(long)]
    pub theta: Option<PathBuf>,
    /// Trained adapter per method, as method=path; repeatable.
    #[arg(long = "phi", value_name = "METHOD=PATH")]
    pub phi: Vec<String>,
    /// Comma-separated methods to test.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub c: Option<usize>,
    /// Comma-separated shuffle seeds (needs at least 2).
    #[arg(long, value_delimiter = ',')]
    pub shuffles: Option<Vec<u64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub retrieval: Option<String>,
}

impl OrderVarianceCli {
    fn as_file_config(&self) -> FileConfig {
        FileConfig {
            methods: self.methods.clone(),
            k: self.k,
            heads: self.heads,
            m: self.m,
            c: self.c,
            shuffle_seeds: self.shuffles.clone(),
            out: self.out.clone(),
            dataset: self.dataset.clone(),
            theta: self.theta.clone(),
            retrieval: self.retrieval.clone(),
            ..FileConfig::default()
        }
    }
}

fn parse_phi_map(pairs: &[String]) -> Result<HashMap<Method, PathBuf>> {
    let mut map = HashMap::new();
    for pair in pairs {
        let (name, path) = pair
            .split_once('=')
            .with_context(|| format!("--phi wants method=path, got {pair:?}"))?;
        let method: Method = name
            .parse()
            .map_err(|e| anyhow::anyhow!("--phi {pair:?}: {e}"))?;
        if map.insert(method, PathBuf::from(path)).is_some() {
            bail!("--phi given twice for {method}");
        }
    }
    Ok(map)
}

/// Verdict per method plus the note that explains it.
fn verdict(method: Method, std: Option<f64>) -> (&'static str, String) {
    match (method, std) {
        (Method::Pt | Method::Idpg, None) => (
            "EXCLUDED",
            "input-free prompt; no exemplar order to vary".into(),
        ),
        (Method::ZeroShot, None) => ("EXCLUDED", "retrieves nothing; no order to vary".into()),
        (Method::MhaRag, Some(s)) if s <= INVARIANCE_CEILING => (
            "PASS",
            format!("spread {} within ceiling {INVARIANCE_CEILING}", fmt_f64(s)),
        ),
        (Method::MhaRag, Some(s)) => (
            "FAIL",
            format!("spread {} above ceiling {INVARIANCE_CEILING}", fmt_f64(s)),
        ),
        (_, Some(_)) => ("REPORTED", "text prompt; order sensitivity expected".into()),
        (_, None) => unreachable!("non-excluded methods always run the protocol"),
    }
}

pub fn variance_header() -> Vec<&'static str> {
    let mut cols = vec![
        "method",
        "mean_eff_acc",
        "std",
        "seeds",
        "n_shuffles",
        "status",
        "note",
    ];
    cols.extend(Provenance::columns());
    cols
}

pub struct VarianceOutcome {
    pub dir: PathBuf,
    /// method, std (None for excluded methods), status.
    pub rows: Vec<(Method, Option<f64>, String)>,
}

pub fn run(cli: &OrderVarianceCli) -> Result<VarianceOutcome> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let merged = cli.as_file_config().merge(file);
    let methods = merged.method_list()?;
    if methods.is_empty() {
        bail!("order-variance needs `methods` (config key or --methods)");
    }
    let dataset_dir = merged
        .dataset
        .clone()
        .context("order-variance needs `dataset` (config key or --dataset)")?;
    let theta_path = merged
        .theta
        .clone()
        .context("order-variance needs `theta` (config key or --theta)")?;
    let dataset = load_dataset(&dataset_dir)?;
    let theta = load_theta(&theta_path)?;
    let shuffles = merged.shuffle_seeds();
    let phi_map = parse_phi_map(&cli.phi)?;

    let dir = merged.out_root().join("order-variance");
    let resolved = crate::config::resolved_toml(&merged)?;
    let provenance = persist_config(&dir, &resolved, Some(&manifest_path(&dataset_dir)))?;

    let (store, _spec, _mode) = build_store(&dataset, &merged)?;
    let mut csv_rows = Vec::new();
    let mut outcomes = Vec::new();
    for &method in &methods {
        let excluded = matches!(method, Method::Pt | Method::Idpg | Method::ZeroShot);
        let std = if excluded {
            None
        } else {
            let point = resolve_point(&merged.scoped_to(method), method)?;
            let adapter = match (phi_map.get(&method), method.has_adapter()) {
                (Some(path), true) => Some(load_phi(path, method)?),
                (None, true) => bail!(
                    "{method} carries trained weights; pass --phi {method}=<phi-*.json> \
                     (produce one with `mharag train`)"
                ),
                (Some(_), false) => bail!("{method} has no trained weights; drop its --phi"),
                (None, false) => None,
            };
            let setup = EvalSetup {
                lm: &theta,
                method,
                adapter: adapter.as_ref(),
                store: Some(&store),
                k: point.k,
                text_context: point.c,
                shuffle_seed: None,
            };
            let report = order_variance_protocol(&setup, &dataset.test, &shuffles)
                .map_err(|e| anyhow::anyhow!("{method}: {e}"))?;
            Some(report)
        };
        let spread = std.as_ref().map(|r| r.std);
        let (status, note) = verdict(method, spread);
        let mut row = vec![
            method.to_string(),
            std.as_ref().map(|r| fmt_f64(r.mean)).unwrap_or_default(),
            spread.map(fmt_f64).unwrap_or_default(),
            fmt_seed_list(&shuffles),
            shuffles.len().to_string(),
            status.to_string(),
            note.clone(),
        ];
        row.extend(provenance.values());
        csv_rows.push(row);
        match spread {
            Some(s) => println!("{method}: std {} -> {status} ({note})", fmt_f64(s)),
            None => println!("{method}: {status} ({note})"),
        }
        outcomes.push((method, spread, status.to_string()));
    }

    let path = dir.join("variance.csv");
    write_csv(&path, &variance_header(), &csv_rows)?;
    RunMeta::write(&dir, "order-variance", &provenance, &[path])?;
    println!("order-variance written to {}", dir.display());
    Ok(VarianceOutcome {
        dir,
        rows: outcomes,
    })
}
