//! Run configuration: a TOML file merged with command-line overrides
//! (flags win), resolved per command into the exact values a run uses.
//! Every run directory gets a copy of the resolved configuration, and the
//! provenance hash is taken over that copy's bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use mharag_core::embedding::EmbedSpec;
use mharag_core::encoders::Method;
use mharag_core::retrieval::RetrievalMode;
use mharag_core::toy_lm::LmConfig;
use serde::{Deserialize, Serialize};

/// Environment variable that overrides the output root everywhere.
pub const OUT_ENV: &str = "MHARAG_OUT";

/// Raw, partially-specified configuration as read from a TOML file or
/// assembled from flags. Merging fills `None`s from the weaker source.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub method: Option<String>,
    /// Several commands compare methods side by side; mutually exclusive
    /// with `method`.
    pub methods: Option<Vec<String>>,
    pub k: Option<usize>,
    pub heads: Option<usize>,
    pub m: Option<usize>,
    /// Hybrid exemplar count: that many retrieved exemplars additionally
    /// stay in the prompt as text.
    pub c: Option<usize>,
    pub lr: Option<f64>,
    pub lr_grid: Option<Vec<f64>>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub dev_fraction: Option<f64>,
    pub clip: Option<f64>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub theta: Option<PathBuf>,
    pub retrieval: Option<String>,
    pub embed_dim: Option<usize>,
    pub fingerprint_width: Option<usize>,
    pub embed_seed: Option<u64>,
    pub shuffle_seeds: Option<Vec<u64>>,
    pub lm_shape: Option<String>,
    pub lm_seed: Option<u64>,
    pub pretrain_steps: Option<usize>,
    pub pretrain_batch: Option<usize>,
    pub pretrain_lr: Option<f64>,
    pub corpus_blocks: Option<usize>,
    pub corpus_style: Option<String>,
    pub corpus_seed: Option<u64>,
    /// Analytical token lengths for the cost tables.
    pub embed_text_tokens: Option<u64>,
    pub exemplar_text_tokens: Option<u64>,
    pub question_tokens: Option<u64>,
    /// Candidate pool size for the optional retrieval-scan line item.
    pub retrieval_pool: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("bad TOML in {}", path.display()))
    }

    /// `self` wins over `weaker`; used as flags.merge(file_config).
    pub fn merge(mut self, weaker: FileConfig) -> FileConfig {
        macro_rules! fill {
            ($($field:ident),* $(,)?) => {
                $( if self.$field.is_none() { self.$field = weaker.$field; } )*
            };
        }
        fill!(
            method, methods, k, heads, m, c, lr, lr_grid, epochs, batch, seeds, dev_fraction,
            clip, out, dataset, theta, retrieval, embed_dim, fingerprint_width, embed_seed,
            shuffle_seeds, lm_shape, lm_seed, pretrain_steps, pretrain_batch, pretrain_lr,
            corpus_blocks, corpus_style, corpus_seed, embed_text_tokens, exemplar_text_tokens,
            question_tokens, retrieval_pool,
        );
        self
    }

    pub fn method(&self) -> Result<Option<Method>> {
        if self.method.is_some() && self.methods.is_some() {
            bail!("set `method` or `methods`, not both");
        }
        self.method
            .as_deref()
            .map(|s| Method::from_str(s).map_err(anyhow::Error::from))
            .transpose()
    }

    /// The method list for comparison commands; a single `method` counts as
    /// a one-element list, and nothing set is an empty list (each command
    /// decides whether that is an error or a default).
    pub fn method_list(&self) -> Result<Vec<Method>> {
        if self.method.is_some() && self.methods.is_some() {
            bail!("set `method` or `methods`, not both");
        }
        let names: Vec<String> = match (&self.method, &self.methods) {
            (Some(one), _) => vec![one.clone()],
            (None, Some(many)) => many.clone(),
            (None, None) => Vec::new(),
        };
        names
            .iter()
            .map(|s| Method::from_str(s).map_err(anyhow::Error::from))
            .collect()
    }

    pub fn retrieval_mode(&self) -> Result<RetrievalMode> {
        match self.retrieval.as_deref() {
            None | Some("tanimoto") => Ok(RetrievalMode::Tanimoto),
            Some("cosine") => Ok(RetrievalMode::Cosine),
            Some(other) => bail!("unknown retrieval mode {other:?} (tanimoto or cosine)"),
        }
    }

    /// Embedding settings; unspecified pieces fall back to the dataset
    /// manifest's spec so stores, adapters, and oracles stay compatible.
    pub fn embed_spec(&self, manifest_default: Option<EmbedSpec>) -> EmbedSpec {
        let base = manifest_default.unwrap_or_default();
        EmbedSpec {
            dim: self.embed_dim.unwrap_or(base.dim),
            fingerprint_width: self.fingerprint_width.unwrap_or(base.fingerprint_width),
            seed: self.embed_seed.unwrap_or(base.seed),
        }
    }

    pub fn lm_config(&self) -> Result<LmConfig> {
        match self.lm_shape.as_deref() {
            None | Some("standard") => Ok(LmConfig::standard()),
            Some("compact") => Ok(LmConfig::compact()),
            Some(other) => bail!("unknown lm shape {other:?} (standard or compact)"),
        }
    }

    /// Output root: MHARAG_OUT beats everything, then the merged config,
    /// then ./runs.
    pub fn out_root(&self) -> PathBuf {
        if let Some(env) = std::env::var_os(OUT_ENV) {
            if !env.is_empty() {
                return PathBuf::from(env);
            }
        }
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) if !s.is_empty() => s.clone(),
            _ => vec![0],
        }
    }

    pub fn shuffle_seeds(&self) -> Vec<u64> {
        match &self.shuffle_seeds {
            Some(s) if !s.is_empty() => s.clone(),
            _ => DEFAULT_SHUFFLES.to_vec(),
        }
    }

    /// Copy with the fields other methods own cleared, so one shared
    /// configuration (say a heads value next to rag in a sweep) still
    /// resolves cleanly per method. Single-method commands skip this and
    /// keep the strict validation instead.
    pub fn scoped_to(&self, method: Method) -> FileConfig {
        let mut scoped = self.clone();
        if method != Method::MhaRag {
            scoped.heads = None;
        }
        if !matches!(method, Method::Pt | Method::Idpg) {
            scoped.m = None;
        }
        if !method.uses_retrieval() {
            scoped.k = None;
        }
        if !matches!(method, Method::MhaRag | Method::Xrag | Method::XragK) {
            scoped.c = None;
        }
        if !method.has_adapter() {
            scoped.lr = None;
            scoped.lr_grid = None;
        }
        scoped
    }

    /// Checks the method-dependent field constraints shared by the training
    /// and evaluation commands.
    pub fn validate_against(&self, method: Method) -> Result<()> {
        if self.heads.is_some() && method != Method::MhaRag {
            bail!("`heads` only applies to mha_rag (got method {method})");
        }
        if self.m.is_some() && !matches!(method, Method::Pt | Method::Idpg) {
            bail!("`m` only applies to pt and idpg (got method {method})");
        }
        if let Some(k) = self.k {
            if !method.uses_retrieval() && k != 0 {
                bail!("{method} does not retrieve; set k = 0 or drop it");
            }
        }
        if self.lr.is_some() && self.lr_grid.is_some() {
            bail!("set `lr` or `lr_grid`, not both");
        }
        mharag_core::pipeline::validate_text_context(
            method,
            self.c.unwrap_or(0),
            self.k.unwrap_or(if method.uses_retrieval() { DEFAULT_K } else { 0 }),
        )?;
        Ok(())
    }
}

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_M: usize = 4;
pub const DEFAULT_EPOCHS: usize = 10;
pub const DEFAULT_BATCH: usize = 8;
pub const DEFAULT_LR: f64 = 3e-5;
pub const DEFAULT_DEV_FRACTION: f64 = 0.1;
pub const DEFAULT_CLIP: f64 = 1.0;
pub const DEFAULT_SHUFFLES: [u64; 5] = mharag_core::metrics::DEFAULT_SHUFFLE_SEEDS;
pub const DEFAULT_EMBED_TEXT_TOKENS: u64 = 24;
pub const DEFAULT_EXEMPLAR_TEXT_TOKENS: u64 = 30;
pub const DEFAULT_QUESTION_TOKENS: u64 = 24;

/// Serializes the fully-merged configuration; this exact text is written
/// into the run directory and hashed for the provenance column.
pub fn resolved_toml(config: &FileConfig) -> Result<String> {
    let mut text = String::new();
    writeln!(
        text,
        "# Resolved configuration (file merged with flag overrides)."
    )?;
    text.push_str(&toml::to_string_pretty(config).context("serializing resolved config")?);
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_and_gaps_fill_in() {
        let file = FileConfig {
            method: Some("pt".into()),
            epochs: Some(7),
            ..FileConfig::default()
        };
        let flags = FileConfig {
            method: Some("mha_rag".into()),
            k: Some(3),
            ..FileConfig::default()
        };
        let merged = flags.merge(file);
        assert_eq!(merged.method.as_deref(), Some("mha_rag"));
        assert_eq!(merged.epochs, Some(7));
        assert_eq!(merged.k, Some(3));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = toml::from_str::<FileConfig>("methd = \"pt\"").unwrap_err();
        assert!(err.to_string().contains("methd"));
    }

    #[test]
    fn method_field_constraints_enforced() {
        let heads_on_pt = FileConfig {
            heads: Some(4),
            ..FileConfig::default()
        };
        assert!(heads_on_pt.validate_against(Method::Pt).is_err());
        assert!(heads_on_pt.validate_against(Method::MhaRag).is_ok());
        let m_on_mha = FileConfig {
            m: Some(2),
            ..FileConfig::default()
        };
        assert!(m_on_mha.validate_against(Method::MhaRag).is_err());
        let k_on_zero = FileConfig {
            k: Some(2),
            ..FileConfig::default()
        };
        assert!(k_on_zero.validate_against(Method::ZeroShot).is_err());
        let both_lrs = FileConfig {
            lr: Some(1e-4),
            lr_grid: Some(vec![1e-4]),
            ..FileConfig::default()
        };
        assert!(both_lrs.validate_against(Method::Pt).is_err());
        let too_much_text = FileConfig {
            c: Some(9),
            k: Some(3),
            ..FileConfig::default()
        };
        assert!(too_much_text.validate_against(Method::MhaRag).is_err());
    }

    #[test]
    fn method_list_accepts_single_or_many() {
        let single = FileConfig {
            method: Some("rag".into()),
            ..FileConfig::default()
        };
        assert_eq!(single.method_list().unwrap(), vec![Method::Rag]);
        let many = FileConfig {
            methods: Some(vec!["rag".into(), "mha_rag".into()]),
            ..FileConfig::default()
        };
        assert_eq!(
            many.method_list().unwrap(),
            vec![Method::Rag, Method::MhaRag]
        );
        let both = FileConfig {
            method: Some("rag".into()),
            methods: Some(vec!["pt".into()]),
            ..FileConfig::default()
        };
        assert!(both.method_list().is_err());
        assert!(FileConfig::default().method_list().unwrap().is_empty());
    }

    #[test]
    fn resolved_toml_is_stable() {
        let config = FileConfig {
            method: Some("mha_rag".into()),
            k: Some(5),
            seeds: Some(vec![0, 1, 2]),
            ..FileConfig::default()
        };
        let a = resolved_toml(&config).unwrap();
        let b = resolved_toml(&config).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("method = \"mha_rag\""));
        let reparsed: FileConfig = toml::from_str(
            &a.lines().skip(1).collect::<Vec<_>>().join("\n"),
        )
        .unwrap();
        assert_eq!(reparsed, config);
    }
}
