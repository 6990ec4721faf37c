//! Result persistence: CSV tables with byte-stable bodies, a provenance
//! column set on every row, and a sidecar metadata file that holds the
//! wall-clock facts so reruns still diff clean.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Version stamp for every emitted row; bump when a schema changes.
pub const SCHEMA_VERSION: u32 = 1;

pub fn tool_version() -> String {
    format!("mharag {}", env!("CARGO_PKG_VERSION"))
}

/// First 12 hex chars of SHA-256; enough to resolve, short enough for CSV.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest
        .iter()
        .take(6)
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("cannot read {} for hashing", path.display()))?;
    Ok(short_hash(&bytes))
}

/// The provenance triplet every results row carries. The per-row seed is a
/// schema column, not part of this struct.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub version: String,
    pub config_hash: String,
    /// Hash of the dataset manifest; "-" for dataset-free commands.
    pub manifest_hash: String,
}

impl Provenance {
    pub fn new(config_toml: &str, manifest_path: Option<&Path>) -> Result<Self> {
        Ok(Provenance {
            version: tool_version(),
            config_hash: short_hash(config_toml.as_bytes()),
            manifest_hash: match manifest_path {
                Some(p) => hash_file(p)?,
                None => "-".into(),
            },
        })
    }

    pub fn columns() -> [&'static str; 4] {
        ["schema_version", "version", "config_hash", "manifest_hash"]
    }

    pub fn values(&self) -> [String; 4] {
        [
            SCHEMA_VERSION.to_string(),
            self.version.clone(),
            self.config_hash.clone(),
            self.manifest_hash.clone(),
        ]
    }
}

/// Shortest-roundtrip float formatting; deterministic across runs.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn fmt_opt_u64(v: Option<u64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Seed lists inside a single CSV cell ("11+22+33").
pub fn fmt_seed_list(seeds: &[u64]) -> String {
    seeds
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join("+")
}

/// Writes one CSV table: fixed header, then rows in the order given.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("cannot create {}", parent.display()))?;
    }
    let mut writer = csv::Writer::from_path(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    writer.write_record(header)?;
    for row in rows {
        anyhow::ensure!(
            row.len() == header.len(),
            "row width {} does not match header width {} in {}",
            row.len(),
            header.len(),
            path.display()
        );
        writer.write_record(row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Wall-clock and invocation facts, kept out of the CSV bodies so repeated
/// runs produce byte-identical tables.
#[derive(Debug, Serialize)]
pub struct RunMeta {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub manifest_hash: String,
    pub unix_time_seconds: u64,
    pub outputs: Vec<PathBuf>,
}

impl RunMeta {
    pub fn write(
        dir: &Path,
        command: &str,
        provenance: &Provenance,
        outputs: &[PathBuf],
    ) -> Result<PathBuf> {
        let meta = RunMeta {
            command: command.to_string(),
            version: provenance.version.clone(),
            config_hash: provenance.config_hash.clone(),
            manifest_hash: provenance.manifest_hash.clone(),
            unix_time_seconds: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            outputs: outputs.to_vec(),
        };
        std::fs::create_dir_all(dir)?;
        let path = dir.join("run.meta.json");
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}

/// Writes the resolved config copy into the run directory and returns the
/// provenance built from its exact bytes.
pub fn persist_config(
    dir: &Path,
    config_toml: &str,
    manifest_path: Option<&Path>,
) -> Result<Provenance> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let path = dir.join("config.resolved.toml");
    std::fs::write(&path, config_toml)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Provenance::new(config_toml, manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_bodies_are_byte_identical_across_writes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![
            vec!["a".into(), fmt_f64(0.1 + 0.2)],
            vec!["b".into(), fmt_opt_f64(None)],
        ];
        write_csv(&path, &["name", "value"], &rows).unwrap();
        let first = std::fs::read(&path).unwrap();
        write_csv(&path, &["name", "value"], &rows).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);
        let text = String::from_utf8(first).unwrap();
        assert!(text.starts_with("name,value\n"));
        assert!(text.contains("a,0.30000000000000004"));
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let err = write_csv(&path, &["one", "two"], &[vec!["x".into()]]);
        assert!(err.is_err());
    }

    #[test]
    fn hashes_are_stable_and_short() {
        let h = short_hash(b"abc");
        assert_eq!(h.len(), 12);
        assert_eq!(h, short_hash(b"abc"));
        assert_ne!(h, short_hash(b"abd"));
    }

    #[test]
    fn seed_lists_render_compactly() {
        assert_eq!(fmt_seed_list(&[11, 22, 33]), "11+22+33");
        assert_eq!(fmt_seed_list(&[]), "");
    }
}
