//! `mharag flops`: tabulate the inference cost model over methods and
//! context counts without touching any dataset or weights.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use mharag_core::cost::{effective_prompt_rows, flops_inference};
use mharag_core::encoders::Method;

use crate::config::FileConfig;
use crate::output::{fmt_opt_u64, persist_config, write_csv, Provenance, RunMeta};
use crate::runspec::{cost_inputs, resolve_point};

#[derive(Debug, Args)]
pub struct FlopsCli {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated methods to tabulate.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Comma-separated k values; non-retrieval methods emit one k=0 row.
    #[arg(long = "k-values", value_delimiter = ',')]
    pub k_values: Option<Vec<usize>>,
    /// Comma-separated hybrid text counts (default just 0); rows where
    /// c exceeds k or the method takes no hybrid text are skipped.
    #[arg(long = "c-values", value_delimiter = ',')]
    pub c_values: Option<Vec<usize>>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub lm_shape: Option<String>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Candidate pool size for the retrieval scan line item (0 = omit).
    #[arg(long)]
    pub retrieval_pool: Option<u64>,
    #[arg(long)]
    pub question_tokens: Option<u64>,
    #[arg(long)]
    pub exemplar_text_tokens: Option<u64>,
    #[arg(long)]
    pub embed_text_tokens: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl FlopsCli {
    fn as_file_config(&self) -> FileConfig {
        FileConfig {
            methods: self.methods.clone(),
            heads: self.heads,
            m: self.m,
            lm_shape: self.lm_shape.clone(),
            embed_dim: self.embed_dim,
            retrieval_pool: self.retrieval_pool,
            question_tokens: self.question_tokens,
            exemplar_text_tokens: self.exemplar_text_tokens,
            embed_text_tokens: self.embed_text_tokens,
            out: self.out.clone(),
            ..FileConfig::default()
        }
    }
}

pub fn flops_header() -> Vec<&'static str> {
    let mut cols = vec![
        "method",
        "k",
        "c",
        "heads",
        "m",
        "prompt_rows",
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

/// The (k, c) grid a method actually occupies.
fn combos(method: Method, k_values: &[usize], c_values: &[usize]) -> Vec<(usize, usize)> {
    let ks: Vec<usize> = if method.uses_retrieval() {
        k_values.to_vec()
    } else {
        vec![0]
    };
    let takes_text = matches!(method, Method::MhaRag | Method::Xrag | Method::XragK);
    let mut out = Vec::new();
    for &k in &ks {
        for &c in c_values {
            if c > 0 && (!takes_text || c > k) {
                continue;
            }
            out.push((k, c));
        }
    }
    out
}

pub struct FlopsOutcome {
    pub dir: PathBuf,
    pub rows: usize,
}

pub fn run(cli: &FlopsCli) -> Result<FlopsOutcome> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let merged = cli.as_file_config().merge(file);
    let methods = merged.method_list()?;
    if methods.is_empty() {
        bail!("flops needs `methods` (config key or --methods)");
    }
    let k_values = cli.k_values.clone().unwrap_or_else(|| vec![crate::config::DEFAULT_K]);
    let c_values = cli.c_values.clone().unwrap_or_else(|| vec![0]);
    if k_values.is_empty() {
        bail!("--k-values must not be empty");
    }
    let lm = merged.lm_config()?;
    let spec = merged.embed_spec(None);

    let dir = merged.out_root().join("flops");
    let resolved = crate::config::resolved_toml(&merged)?;
    let provenance = persist_config(&dir, &resolved, None)?;

    let mut rows = Vec::new();
    for &method in &methods {
        for (k, c) in combos(method, &k_values, &c_values) {
            let mut cell = merged.scoped_to(method);
            if method.uses_retrieval() {
                cell.k = Some(k);
            }
            if c > 0 {
                cell.c = Some(c);
            }
            let point = resolve_point(&cell, method)?;
            let pool = merged.retrieval_pool.unwrap_or(0);
            let cost = flops_inference(&cost_inputs(&cell, &point, &lm, spec, pool))?;
            let prompt_rows =
                effective_prompt_rows(method, point.k as u64, point.heads as u64, point.m as u64);
            let mut row = vec![
                method.to_string(),
                point.k.to_string(),
                point.c.to_string(),
                point.heads.to_string(),
                point.m.to_string(),
                prompt_rows.to_string(),
                cost.total_flops.to_string(),
                cost.encoder_flops.to_string(),
                cost.projector_flops.to_string(),
                cost.lm_prefill_flops.to_string(),
                cost.lm_decode_flops.to_string(),
                fmt_opt_u64(cost.retrieval_word_ops),
            ];
            row.extend(provenance.values());
            println!(
                "{method} k={} c={}: total {} FLOPs, {} prompt rows",
                point.k, point.c, cost.total_flops, prompt_rows
            );
            rows.push(row);
        }
    }

    let path = dir.join("flops.csv");
    let n = rows.len();
    write_csv(&path, &flops_header(), &rows)?;
    RunMeta::write(&dir, "flops", &provenance, &[path])?;
    println!("flops table written to {}", dir.display());
    Ok(FlopsOutcome { dir, rows: n })
}
