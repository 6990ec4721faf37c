//! `mharag params`: print trainable-parameter counts per method across a
//! list of generator widths, as an aligned table and optionally as CSV.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use mharag_core::cost::count_trainable;
use mharag_core::encoders::Method;

use crate::config::FileConfig;
use crate::output::{persist_config, write_csv, Provenance, RunMeta};

#[derive(Debug, Args)]
pub struct ParamsCli {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated methods (default: every method with trainable weights).
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Comma-separated generator widths to tabulate, e.g. 128,1024,2048.
    #[arg(long = "d-model", value_delimiter = ',')]
    pub d_model: Option<Vec<u64>>,
    /// Retriever embedding width feeding the adapters.
    #[arg(long = "d-embed")]
    pub d_embed: Option<u64>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    /// Also write params.csv (plus config copy) under the output root.
    #[arg(long)]
    pub csv: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

const ADAPTER_METHODS: [Method; 5] = [
    Method::MhaRag,
    Method::Xrag,
    Method::XragK,
    Method::Pt,
    Method::Idpg,
];

/// Right-aligned table: one row per method, one column per width.
fn render_table(methods: &[Method], widths: &[u64], cells: &[Vec<u64>]) -> String {
    let mut headers: Vec<String> = vec!["method".into()];
    headers.extend(widths.iter().map(|w| format!("d_model={w}")));
    let mut rows: Vec<Vec<String>> = vec![headers];
    for (mi, &method) in methods.iter().enumerate() {
        let mut row = vec![method.to_string()];
        row.extend(cells[mi].iter().map(|c| c.to_string()));
        rows.push(row);
    }
    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (ri, row) in rows.iter().enumerate() {
        for (ci, cell) in row.iter().enumerate() {
            if ci > 0 {
                out.push_str("  ");
            }
            if ci == 0 {
                out.push_str(&format!("{cell:<w$}", w = widths[ci]));
            } else {
                out.push_str(&format!("{cell:>w$}", w = widths[ci]));
            }
        }
        out.push('\n');
        if ri == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

pub fn params_header() -> Vec<&'static str> {
    let mut cols = vec!["method", "d_model", "d_embed", "heads", "m", "trainable"];
    cols.extend(Provenance::columns());
    cols
}

pub struct ParamsOutcome {
    pub table: String,
    pub csv_dir: Option<PathBuf>,
}

pub fn run(cli: &ParamsCli) -> Result<ParamsOutcome> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let merged = FileConfig {
        methods: cli.methods.clone(),
        heads: cli.heads,
        m: cli.m,
        out: cli.out.clone(),
        ..FileConfig::default()
    }
    .merge(file);
    let mut methods = merged.method_list()?;
    if methods.is_empty() {
        methods = ADAPTER_METHODS.to_vec();
    }
    for &method in &methods {
        if !method.has_adapter() {
            bail!("{method} has no trainable weights; drop it from the params table");
        }
    }
    let widths = cli.d_model.clone().unwrap_or_else(|| vec![128]);
    if widths.is_empty() {
        bail!("--d-model must not be empty");
    }
    let d_embed = cli
        .d_embed
        .unwrap_or_else(|| merged.embed_spec(None).dim as u64);
    let heads = merged.heads.unwrap_or(crate::config::DEFAULT_HEADS) as u64;
    let m = merged.m.unwrap_or(crate::config::DEFAULT_M) as u64;

    let mut cells = Vec::new();
    for &method in &methods {
        let mut row = Vec::new();
        for &w in &widths {
            row.push(count_trainable(method, w, d_embed, heads, m)?);
        }
        cells.push(row);
    }
    let table = render_table(&methods, &widths, &cells);
    println!("trainable parameters (d_embed={d_embed}, heads={heads}, m={m})");
    print!("{table}");

    let csv_dir = if cli.csv {
        let dir = merged.out_root().join("params");
        let resolved = crate::config::resolved_toml(&merged)?;
        let provenance = persist_config(&dir, &resolved, None)?;
        let mut rows = Vec::new();
        for (mi, &method) in methods.iter().enumerate() {
            for (wi, &w) in widths.iter().enumerate() {
                let mut row = vec![
                    method.to_string(),
                    w.to_string(),
                    d_embed.to_string(),
                    heads.to_string(),
                    m.to_string(),
                    cells[mi][wi].to_string(),
                ];
                row.extend(provenance.values());
                rows.push(row);
            }
        }
        let path = dir.join("params.csv");
        write_csv(&path, &params_header(), &rows)?;
        RunMeta::write(&dir, "params", &provenance, &[path])?;
        println!("params table written to {}", dir.display());
        Some(dir)
    } else {
        None
    };
    Ok(ParamsOutcome { table, csv_dir })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_lines_up_and_carries_every_cell() {
        let methods = [Method::MhaRag, Method::Pt];
        let widths = [128, 1024];
        let cells = vec![vec![12_288, 98_304], vec![512, 4_096]];
        let table = render_table(&methods, &widths, &cells);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains("d_model=128"));
        assert!(lines[2].contains("12288") && lines[2].contains("98304"));
        assert!(lines[3].starts_with("pt"));
        let header_len = lines[0].len();
        assert!(lines[2..].iter().all(|l| l.len() == header_len));
    }
}
