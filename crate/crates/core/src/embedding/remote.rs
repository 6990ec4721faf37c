//! HTTP client for real embedding services, with a local disk cache.
//!
//! Wire format: POST `{"model": ..., "input": [text, ...]}`, response
//! `{"data": [{"index": i, "embedding": [...]}, ...]}`. The API key comes
//! from the `EMBED_API_KEY` environment variable at construction; vectors are
//! L2-normalized client-side so downstream cosine math can assume unit norm.
//!
//! The cache stores one JSON file per content hash, keyed on
//! (endpoint, model, text), so replays of an experiment never re-call the
//! service. Tests inject a counting transport instead of the HTTP one.

use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DenseEmbedding, EmbeddingError, Result};

pub const EMBED_API_KEY_VAR: &str = "EMBED_API_KEY";
pub const MAX_BATCH: usize = 64;

#[derive(Debug, Serialize)]
pub struct EmbedRequest {
    pub model: String,
    pub input: Vec<String>,
}

#[derive(Debug, Deserialize)]
pub struct EmbedResponse {
    pub data: Vec<EmbedResponseRow>,
}

#[derive(Debug, Deserialize)]
pub struct EmbedResponseRow {
    pub index: usize,
    pub embedding: Vec<f64>,
}

/// The network boundary, abstracted so tests can count and stub calls.
pub trait EmbedTransport {
    fn post_embeddings(
        &self,
        endpoint: &str,
        api_key: Option<&str>,
        request: &EmbedRequest,
    ) -> Result<EmbedResponse>;
}

/// Real HTTP transport.
pub struct HttpTransport;

impl EmbedTransport for HttpTransport {
    fn post_embeddings(
        &self,
        endpoint: &str,
        api_key: Option<&str>,
        request: &EmbedRequest,
    ) -> Result<EmbedResponse> {
        let mut req = ureq::post(endpoint).set("content-type", "application/json");
        if let Some(key) = api_key {
            req = req.set("authorization", &format!("Bearer {key}"));
        }
        let body =
            serde_json::to_string(request).map_err(|e| EmbeddingError::Remote(e.to_string()))?;
        let resp = req
            .send_string(&body)
            .map_err(|e| EmbeddingError::Remote(e.to_string()))?;
        resp.into_json::<EmbedResponse>()
            .map_err(|e| EmbeddingError::Remote(e.to_string()))
    }
}

pub struct RemoteEmbedder {
    endpoint: String,
    model: String,
    dim: usize,
    cache_dir: PathBuf,
    api_key: Option<String>,
    max_retries: u32,
    transport: Box<dyn EmbedTransport>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    model: String,
    embedding: Vec<f64>,
}

impl RemoteEmbedder {
    /// `dim` is the expected service dimension; responses with any other
    /// dimension are configuration errors, not data.
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        dim: usize,
        cache_dir: impl Into<PathBuf>,
        transport: Box<dyn EmbedTransport>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDim);
        }
        let cache_dir = cache_dir.into();
        fs::create_dir_all(&cache_dir)?;
        Ok(RemoteEmbedder {
            endpoint: endpoint.into(),
            model: model.into(),
            dim,
            cache_dir,
            api_key: std::env::var(EMBED_API_KEY_VAR).ok(),
            max_retries: 3,
            transport,
        })
    }

    fn cache_path(&self, text: &str) -> PathBuf {
        let mut hasher = Sha256::new();
        hasher.update(self.endpoint.as_bytes());
        hasher.update([0u8]);
        hasher.update(self.model.as_bytes());
        hasher.update([0u8]);
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        let mut name = String::with_capacity(64);
        for b in digest {
            name.push_str(&format!("{b:02x}"));
        }
        self.cache_dir.join(format!("{name}.json"))
    }

    fn read_cache(&self, text: &str) -> Result<Option<DenseEmbedding>> {
        let path = self.cache_path(text);
        if !path.exists() {
            return Ok(None);
        }
        let raw = fs::read_to_string(&path)?;
        let entry: CacheEntry = serde_json::from_str(&raw)
            .map_err(|e| EmbeddingError::CacheCorrupt(format!("{}: {e}", path.display())))?;
        if entry.embedding.len() != self.dim {
            return Err(EmbeddingError::DimMismatch {
                expected: self.dim,
                got: entry.embedding.len(),
            });
        }
        // Cached vectors were normalized before writing; do not renormalize,
        // so a cache hit is bit-identical to the original embedding.
        Ok(Some(DenseEmbedding::from_unit(entry.embedding)?))
    }

    fn write_cache(&self, text: &str, embedding: &DenseEmbedding) -> Result<()> {
        let entry = CacheEntry {
            model: self.model.clone(),
            embedding: embedding.values().to_vec(),
        };
        let body = serde_json::to_string(&entry)
            .map_err(|e| EmbeddingError::CacheCorrupt(e.to_string()))?;
        fs::write(self.cache_path(text), body)?;
        Ok(())
    }

    /// Embeds `texts`, serving from cache where possible and batching cache
    /// misses at most `MAX_BATCH` per request. Output order matches input.
    pub fn embed_batch(&self, texts: &[String]) -> Result<Vec<DenseEmbedding>> {
        let mut out: Vec<Option<DenseEmbedding>> = Vec::with_capacity(texts.len());
        let mut misses: Vec<usize> = Vec::new();
        for (i, text) in texts.iter().enumerate() {
            if text.is_empty() {
                return Err(EmbeddingError::EmptyText);
            }
            match self.read_cache(text)? {
                Some(e) => out.push(Some(e)),
                None => {
                    out.push(None);
                    misses.push(i);
                }
            }
        }
        for chunk in misses.chunks(MAX_BATCH) {
            let request = EmbedRequest {
                model: self.model.clone(),
                input: chunk.iter().map(|&i| texts[i].clone()).collect(),
            };
            let response = self.post_with_retries(&request)?;
            if response.data.len() != chunk.len() {
                return Err(EmbeddingError::Remote(format!(
                    "service returned {} rows for {} inputs",
                    response.data.len(),
                    chunk.len()
                )));
            }
            for row in response.data {
                if row.index >= chunk.len() {
                    return Err(EmbeddingError::Remote(format!(
                        "row index {} out of range for batch of {}",
                        row.index,
                        chunk.len()
                    )));
                }
                if row.embedding.len() != self.dim {
                    return Err(EmbeddingError::DimMismatch {
                        expected: self.dim,
                        got: row.embedding.len(),
                    });
                }
                let global = chunk[row.index];
                let embedding = DenseEmbedding::from_raw(row.embedding)?;
                self.write_cache(&texts[global], &embedding)?;
                out[global] = Some(embedding);
            }
        }
        out.into_iter()
            .enumerate()
            .map(|(i, e)| {
                e.ok_or_else(|| {
                    EmbeddingError::Remote(format!("service response missing index {i}"))
                })
            })
            .collect()
    }

    fn post_with_retries(&self, request: &EmbedRequest) -> Result<EmbedResponse> {
        let mut last_err = EmbeddingError::Remote("no attempt made".into());
        for attempt in 0..=self.max_retries {
            match self
                .transport
                .post_embeddings(&self.endpoint, self.api_key.as_deref(), request)
            {
                Ok(r) => return Ok(r),
                Err(e) => {
                    last_err =
                        EmbeddingError::Remote(format!("attempt {}: {e}", attempt + 1));
                }
            }
        }
        Err(EmbeddingError::Remote(format!(
            "gave up after {} attempts: {last_err}",
            self.max_retries + 1
        )))
    }
}
