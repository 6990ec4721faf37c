//! `mharag sweep`: vary one axis (k, heads, c, or lr) across methods and
//! seeds, training where the method has weights and evaluating every cell
//! on the test split. Cell failures are recorded and the sweep continues.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::Args;
use mharag_core::cost::flops_inference;
use mharag_core::encoders::Method;
use mharag_core::pipeline::{evaluate_classifier, EvalSetup};
use mharag_core::training::train_adapter;

use crate::artifacts::{build_store, load_dataset, load_theta, manifest_path};
use crate::commands::eval::{results_header, results_row};
use crate::config::FileConfig;
use crate::output::{
    fmt_f64, fmt_opt_u64, fmt_seed_list, persist_config, write_csv, Provenance, RunMeta,
};
use crate::runspec::{cost_inputs, resolve_point};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    K,
    Heads,
    C,
    Lr,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::K => "k",
            Axis::Heads => "heads",
            Axis::C => "c",
            Axis::Lr => "lr",
        })
    }
}

impl FromStr for Axis {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "k" => Axis::K,
            "heads" => Axis::Heads,
            "c" => Axis::C,
            "lr" => Axis::Lr,
            other => bail!("unknown sweep axis {other:?}; use k, heads, c, or lr"),
        })
    }
}

/// One parsed point on the axis, kept with its canonical CSV rendering.
#[derive(Debug, Clone)]
enum AxisValue {
    Count(usize),
    Rate(f64),
}

impl AxisValue {
    fn parse(axis: Axis, raw: &str) -> Result<Self> {
        Ok(match axis {
            Axis::Lr => AxisValue::Rate(
                raw.parse::<f64>()
                    .with_context(|| format!("bad lr value {raw:?}"))?,
            ),
            _ => AxisValue::Count(
                raw.parse::<usize>()
                    .with_context(|| format!("bad {axis} value {raw:?}"))?,
            ),
        })
    }

    fn render(&self) -> String {
        match self {
            AxisValue::Count(v) => v.to_string(),
            AxisValue::Rate(v) => fmt_f64(*v),
        }
    }

    /// Copy of the merged configuration with this cell's value substituted.
    fn apply(&self, axis: Axis, merged: &FileConfig) -> FileConfig {
        let mut cell = merged.clone();
        match (axis, self) {
            (Axis::K, AxisValue::Count(v)) => cell.k = Some(*v),
            (Axis::Heads, AxisValue::Count(v)) => cell.heads = Some(*v),
            (Axis::C, AxisValue::Count(v)) => cell.c = Some(*v),
            (Axis::Lr, AxisValue::Rate(v)) => {
                cell.lr = Some(*v);
                cell.lr_grid = None;
            }
            _ => unreachable!("parse() ties the value kind to the axis"),
        }
        cell
    }
}

fn axis_supports(axis: Axis, method: Method) -> bool {
    match axis {
        Axis::K => method.uses_retrieval(),
        Axis::Heads => method == Method::MhaRag,
        Axis::C => matches!(method, Method::MhaRag | Method::Xrag | Method::XragK),
        Axis::Lr => method.has_adapter(),
    }
}

#[derive(Debug, Args)]
pub struct SweepCli {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Pretrained generator checkpoint (theta.json).
    #[arg(long)]
    pub theta: Option<PathBuf>,
    /// Axis to vary: k, heads, c, or lr.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated axis values, e.g. 1,2,5,10.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    /// Comma-separated methods to run at each value.
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
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub retrieval: Option<String>,
}

impl SweepCli {
    fn as_file_config(&self) -> FileConfig {
        FileConfig {
            methods: self.methods.clone(),
            k: self.k,
            heads: self.heads,
            m: self.m,
            c: self.c,
            lr: self.lr,
            epochs: self.epochs,
            seeds: self.seeds.clone(),
            out: self.out.clone(),
            dataset: self.dataset.clone(),
            theta: self.theta.clone(),
            retrieval: self.retrieval.clone(),
            ..FileConfig::default()
        }
    }
}

pub struct SweepRun {
    pub dir: PathBuf,
    pub cells_ok: usize,
    pub cells_failed: usize,
}

fn mean_and_population_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn sweep_header() -> Vec<&'static str> {
    let mut cols = vec![
        "axis",
        "value",
        "method",
        "seeds",
        "n_ok",
        "n_failed",
        "mean_eff_acc",
        "std_eff_acc",
        "total_flops",
        "retrieval_word_ops",
        "error",
    ];
    cols.extend(Provenance::columns());
    cols
}

pub fn run(cli: &SweepCli) -> Result<SweepRun> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let merged = cli.as_file_config().merge(file);
    let axis: Axis = cli.axis.parse()?;
    if cli.values.is_empty() {
        bail!("sweep needs --values (comma-separated points on the {axis} axis)");
    }
    let values = cli
        .values
        .iter()
        .map(|raw| AxisValue::parse(axis, raw))
        .collect::<Result<Vec<_>>>()?;
    let methods = merged.method_list()?;
    if methods.is_empty() {
        bail!("sweep needs `methods` (config key or --methods)");
    }
    for &method in &methods {
        if !axis_supports(axis, method) {
            bail!("method {method} cannot vary on the {axis} axis");
        }
    }
    if merged.lr_grid.is_some() {
        bail!("sweep does not nest learning-rate grids; use `--axis lr` to sweep them");
    }
    let dataset_dir = merged
        .dataset
        .clone()
        .context("sweep needs `dataset` (config key or --dataset)")?;
    let theta_path = merged
        .theta
        .clone()
        .context("sweep needs `theta` (config key or --theta)")?;
    let dataset = load_dataset(&dataset_dir)?;
    let theta = load_theta(&theta_path)?;
    let seeds = merged.seeds();

    let dir = merged.out_root().join(format!("sweep-{axis}"));
    let resolved = crate::config::resolved_toml(&merged)?;
    let provenance = persist_config(&dir, &resolved, Some(&manifest_path(&dataset_dir)))?;
    let kind = dataset.manifest.kind.to_string();

    let mut aggregate_rows = Vec::new();
    let mut detail_rows = Vec::new();
    let mut cells_ok = 0usize;
    let mut cells_failed = 0usize;

    for &method in &methods {
        for value in &values {
            let cell_config = value.apply(axis, &merged).scoped_to(method);
            let mut scores = Vec::new();
            let mut errors: Vec<String> = Vec::new();
            let mut cost_cells = (String::new(), String::new());

            let cell = (|| -> Result<()> {
                let point = resolve_point(&cell_config, method)?;
                let (store, spec, _mode) = build_store(&dataset, &cell_config)?;
                let uses_store = method.uses_retrieval() && point.k > 0;
                let pool = if uses_store { store.len() as u64 } else { 0 };
                let cost =
                    flops_inference(&cost_inputs(&cell_config, &point, &theta.config, spec, pool))?;
                cost_cells = (
                    cost.total_flops.to_string(),
                    fmt_opt_u64(cost.retrieval_word_ops),
                );
                for &seed in &seeds {
                    let outcome = (|| -> Result<f64> {
                        let adapter = if method.has_adapter() {
                            let tc = crate::runspec::train_config(
                                &cell_config,
                                &point,
                                &dataset,
                                seed,
                            )?;
                            Some(train_adapter(&theta, &dataset.train, &tc)?.adapter)
                        } else {
                            None
                        };
                        let setup = EvalSetup {
                            lm: &theta,
                            method,
                            adapter: adapter.as_ref(),
                            store: uses_store.then_some(&store),
                            k: point.k,
                            text_context: point.c,
                            shuffle_seed: None,
                        };
                        let report = evaluate_classifier(&setup, &dataset.test)?;
                        let lr = method.has_adapter().then_some(point.lr);
                        let epochs = method.has_adapter().then_some(point.epochs);
                        let mut row = vec![axis.to_string(), value.render()];
                        row.extend(results_row(
                            &point,
                            &kind,
                            "test",
                            seed,
                            lr,
                            epochs,
                            &report,
                            &cost,
                            &provenance,
                        ));
                        detail_rows.push(row);
                        Ok(report.effective_accuracy)
                    })();
                    match outcome {
                        Ok(score) => scores.push(score),
                        Err(e) => errors.push(format!("seed {seed}: {e:#}")),
                    }
                }
                Ok(())
            })();
            if let Err(e) = cell {
                errors.push(format!("{e:#}"));
            }

            let (mean, std) = if scores.is_empty() {
                (String::new(), String::new())
            } else {
                let (m, s) = mean_and_population_std(&scores);
                (fmt_f64(m), fmt_f64(s))
            };
            let failed = !errors.is_empty();
            errors.dedup();
            let mut row = vec![
                axis.to_string(),
                value.render(),
                method.to_string(),
                fmt_seed_list(&seeds),
                scores.len().to_string(),
                (seeds.len() - scores.len()).to_string(),
                mean,
                std,
                cost_cells.0.clone(),
                cost_cells.1.clone(),
                errors.join("; "),
            ];
            row.extend(provenance.values());
            aggregate_rows.push(row);
            if failed {
                cells_failed += 1;
            } else {
                cells_ok += 1;
            }
            println!(
                "{method} {axis}={}: {}",
                value.render(),
                if scores.is_empty() {
                    "failed".to_string()
                } else {
                    let (m, s) = mean_and_population_std(&scores);
                    format!("eff_acc {m:.2} +/- {s:.2} over {} seeds", scores.len())
                }
            );
        }
    }

    let sweep_path = dir.join("sweep.csv");
    write_csv(&sweep_path, &sweep_header(), &aggregate_rows)?;
    let mut detail_header = vec!["axis", "value"];
    detail_header.extend(results_header());
    let detail_path = dir.join("cell_results.csv");
    write_csv(&detail_path, &detail_header, &detail_rows)?;
    RunMeta::write(
        &dir,
        "sweep",
        &provenance,
        &[sweep_path, detail_path],
    )?;
    println!(
        "sweep over {axis} written to {}: {cells_ok} cells ok, {cells_failed} with failures",
        dir.display()
    );
    Ok(SweepRun {
        dir,
        cells_ok,
        cells_failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing_and_method_support() {
        assert_eq!("heads".parse::<Axis>().unwrap(), Axis::Heads);
        assert!("q".parse::<Axis>().is_err());
        assert!(axis_supports(Axis::K, Method::Rag));
        assert!(!axis_supports(Axis::K, Method::Pt));
        assert!(axis_supports(Axis::Heads, Method::MhaRag));
        assert!(!axis_supports(Axis::Heads, Method::Xrag));
        assert!(axis_supports(Axis::C, Method::XragK));
        assert!(!axis_supports(Axis::C, Method::Rag));
        assert!(axis_supports(Axis::Lr, Method::Idpg));
        assert!(!axis_supports(Axis::Lr, Method::ZeroShot));
    }

    #[test]
    fn axis_values_render_canonically_and_apply() {
        let v = AxisValue::parse(Axis::Lr, "0.05").unwrap();
        assert_eq!(v.render(), "0.05");
        let base = FileConfig {
            lr_grid: Some(vec![0.1, 0.2]),
            ..FileConfig::default()
        };
        let cell = v.apply(Axis::Lr, &base);
        assert_eq!(cell.lr, Some(0.05));
        assert!(cell.lr_grid.is_none());

        let v = AxisValue::parse(Axis::K, "7").unwrap();
        let cell = v.apply(Axis::K, &FileConfig::default());
        assert_eq!(cell.k, Some(7));
    }

    #[test]
    fn population_std_matches_hand_value() {
        let (mean, std) = mean_and_population_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(mean, 5.0);
        assert_eq!(std, 2.0);
    }
}
