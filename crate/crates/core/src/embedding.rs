//! Text embeddings: hashed character n-grams for dense vectors, bit
//! fingerprints for set-overlap similarity, and an optional HTTP client for
//! real embedding services with a disk cache.
//!
//! The dense embedder folds the n-gram position into the hash, so two
//! concatenations of the same pieces in different orders produce different
//! vectors. That order sensitivity is deliberate: downstream projector
//! baselines consume embeddings of concatenated texts and would otherwise be
//! order-blind by accident. The fingerprint hash does not fold position, so
//! token-set similarity stays order-free.

pub mod remote;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot embed an empty text")]
    EmptyText,
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("fingerprint width must be positive")]
    ZeroWidth,
    #[error("all hashed features cancelled; text is degenerate for dim {0}")]
    DegenerateVector(usize),
    #[error("fingerprint widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("embedding service: {0}")]
    Remote(String),
    #[error("service returned {got} dims, expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("embedding cache io: {0}")]
    CacheIo(#[from] std::io::Error),
    #[error("embedding cache entry is corrupt: {0}")]
    CacheCorrupt(String),
}

pub type Result<T> = std::result::Result<T, EmbeddingError>;

/// Joins texts the way all multi-part embedding inputs are built: a single
/// U+001F (unit separator) between pieces. The separator participates in
/// hashing like any other character.
pub const JOIN_SEP: char = '\u{1F}';

pub fn join_texts<S: AsRef<str>>(parts: &[S]) -> String {
    let mut out = String::new();
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            out.push(JOIN_SEP);
        }
        out.push_str(p.as_ref());
    }
    out
}

/// L2-normalized dense embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseEmbedding {
    values: Vec<f64>,
}

impl DenseEmbedding {
    /// Wraps raw values, normalizing to unit L2 norm. An all-zero vector is
    /// rejected rather than silently producing NaNs.
    pub fn from_raw(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(EmbeddingError::ZeroDim);
        }
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbeddingError::DegenerateVector(values.len()));
        }
        Ok(DenseEmbedding {
            values: values.into_iter().map(|x| x / norm).collect(),
        })
    }

    /// Wraps values that are already unit-norm (e.g. read back from a cache
    /// of normalized vectors) without renormalizing, so round-trips are
    /// bit-exact. Rejects vectors whose norm is not within 1e-6 of 1.
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(EmbeddingError::ZeroDim);
        }
        let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(EmbeddingError::DegenerateVector(values.len()));
        }
        Ok(DenseEmbedding { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Cosine similarity; both embeddings are unit-norm so this is a dot
    /// product. Dimensions must match.
    pub fn cosine(&self, other: &DenseEmbedding) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(EmbeddingError::DimMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }
}

/// 64-bit FNV-1a over an arbitrary byte stream.
fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Avalanche finisher (splitmix64). FNV-1a multiplies upward, so its low bits
/// mix poorly; without this pass, `h % dim` buckets degrade sharply whenever
/// dim is a power of two (the modulus then reads only the weak low bits).
fn mix64(mut h: u64) -> u64 {
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    h
}

fn hash_gram(gram: &[char], position: usize, seed: u64) -> u64 {
    let mut buf: Vec<u8> = Vec::with_capacity(gram.len() * 4 + 16);
    for c in gram {
        buf.extend_from_slice(&(*c as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(position as u64).to_le_bytes());
    buf.extend_from_slice(&seed.to_le_bytes());
    mix64(fnv1a(buf))
}

fn hash_gram_positionless(gram: &[char], seed: u64) -> u64 {
    let mut buf: Vec<u8> = Vec::with_capacity(gram.len() * 4 + 8);
    for c in gram {
        buf.extend_from_slice(&(*c as u32).to_le_bytes());
    }
    buf.extend_from_slice(&seed.to_le_bytes());
    mix64(fnv1a(buf))
}

/// Dense embedding from hashed character n-grams (n = 1..=3).
///
/// Each (gram, start position) pair hashes with the seed to pick a bucket and
/// a sign; contributions sum and the result is L2-normalized. Deterministic
/// for fixed (text, dim, seed).
pub fn embed_ngram(text: &str, dim: usize, seed: u64) -> Result<DenseEmbedding> {
    if dim == 0 {
        return Err(EmbeddingError::ZeroDim);
    }
    if text.is_empty() {
        return Err(EmbeddingError::EmptyText);
    }
    let chars: Vec<char> = text.chars().collect();
    let mut acc = vec![0.0f64; dim];
    for n in 1..=3usize {
        if chars.len() < n {
            break;
        }
        for start in 0..=chars.len() - n {
            let h = hash_gram(&chars[start..start + n], start, seed);
            let bucket = (h % dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
            acc[bucket] += sign;
        }
    }
    DenseEmbedding::from_raw(acc)
}

/// Bit-set fingerprint over positionless character n-grams (n = 2..=4),
/// the similarity key for Tanimoto retrieval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    width: usize,
    words: Vec<u64>,
}

pub const DEFAULT_FINGERPRINT_WIDTH: usize = 2048;

impl Fingerprint {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn set_count(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn intersection_count(&self, other: &Fingerprint) -> Result<u32> {
        self.check_width(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones())
            .sum())
    }

    pub fn union_count(&self, other: &Fingerprint) -> Result<u32> {
        self.check_width(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones())
            .sum())
    }

    fn check_width(&self, other: &Fingerprint) -> Result<()> {
        if self.width != other.width {
            return Err(EmbeddingError::WidthMismatch(self.width, other.width));
        }
        Ok(())
    }
}

pub fn fingerprint(text: &str, width: usize, seed: u64) -> Result<Fingerprint> {
    if width == 0 {
        return Err(EmbeddingError::ZeroWidth);
    }
    if text.is_empty() {
        return Err(EmbeddingError::EmptyText);
    }
    let chars: Vec<char> = text.chars().collect();
    let mut words = vec![0u64; width.div_ceil(64)];
    for n in 2..=4usize {
        if chars.len() < n {
            break;
        }
        for start in 0..=chars.len() - n {
            let h = hash_gram_positionless(&chars[start..start + n], seed);
            let bit = (h % width as u64) as usize;
            words[bit / 64] |= 1 << (bit % 64);
        }
    }
    // A single-char text has no 2-grams: fall back to 1-grams so every
    // non-empty text owns at least one bit.
    if chars.len() < 2 {
        for (start, c) in chars.iter().enumerate() {
            let _ = start;
            let h = hash_gram_positionless(&[*c], seed);
            let bit = (h % width as u64) as usize;
            words[bit / 64] |= 1 << (bit % 64);
        }
    }
    Ok(Fingerprint { width, words })
}

/// Shared embedding settings carried by stores and pipelines so queries and
/// candidates always hash identically.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedSpec {
    pub dim: usize,
    pub fingerprint_width: usize,
    pub seed: u64,
}

impl Default for EmbedSpec {
    fn default() -> Self {
        EmbedSpec {
            dim: 64,
            fingerprint_width: DEFAULT_FINGERPRINT_WIDTH,
            seed: 0,
        }
    }
}

impl EmbedSpec {
    pub fn embed(&self, text: &str) -> Result<DenseEmbedding> {
        embed_ngram(text, self.dim, self.seed)
    }

    pub fn fingerprint(&self, text: &str) -> Result<Fingerprint> {
        fingerprint(text, self.fingerprint_width, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let a = embed_ngram("CCO=N(c1)", 64, 7).unwrap();
        let b = embed_ngram("CCO=N(c1)", 64, 7).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.values().iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn seed_and_dim_change_the_vector() {
        let a = embed_ngram("hello", 64, 0).unwrap();
        let b = embed_ngram("hello", 64, 1).unwrap();
        assert_ne!(a, b);
        assert_eq!(embed_ngram("hello", 32, 0).unwrap().dim(), 32);
    }

    #[test]
    fn concatenation_order_is_visible() {
        // Position folding makes AB and BA embed differently.
        let ab = embed_ngram(&join_texts(&["CCO", "NNC"]), 64, 0).unwrap();
        let ba = embed_ngram(&join_texts(&["NNC", "CCO"]), 64, 0).unwrap();
        let dist: f64 = ab
            .values()
            .iter()
            .zip(ba.values())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 1e-6, "order must change the embedding, dist={dist}");
    }

    #[test]
    fn similar_texts_embed_closer_than_dissimilar() {
        let base = embed_ngram("CCOc1ccc2nc(S(N)(=O)", 64, 0).unwrap();
        let near = embed_ngram("CCOc1ccc2nc(S(N)(=O)", 64, 0).unwrap();
        let one_edit = embed_ngram("CCOc1ccc2nc(S(N)(=S)", 64, 0).unwrap();
        let far = embed_ngram("912345##==ssssllll", 64, 0).unwrap();
        assert!(base.cosine(&near).unwrap() > 0.999);
        assert!(base.cosine(&one_edit).unwrap() > base.cosine(&far).unwrap());
    }

    #[test]
    fn empty_text_and_zero_dim_are_rejected() {
        assert!(matches!(embed_ngram("", 64, 0), Err(EmbeddingError::EmptyText)));
        assert!(matches!(embed_ngram("x", 0, 0), Err(EmbeddingError::ZeroDim)));
    }

    #[test]
    fn fingerprint_ignores_order_of_shared_grams() {
        // Same multiset of grams in any position sets the same bits.
        let a = fingerprint("abcd", 2048, 0).unwrap();
        let b = fingerprint("xxabcd", 2048, 0).unwrap();
        let inter = a.intersection_count(&b).unwrap();
        // All of a's grams appear in b (positionless), so a ⊆ b.
        assert_eq!(inter, a.set_count());
    }

    #[test]
    fn fingerprint_width_mismatch_errors() {
        let a = fingerprint("abc", 1024, 0).unwrap();
        let b = fingerprint("abc", 2048, 0).unwrap();
        assert!(matches!(
            a.intersection_count(&b),
            Err(EmbeddingError::WidthMismatch(1024, 2048))
        ));
    }

    #[test]
    fn single_char_text_still_sets_a_bit() {
        let fp = fingerprint("C", 2048, 0).unwrap();
        assert!(fp.set_count() > 0);
    }

    #[test]
    fn join_uses_unit_separator() {
        let joined = join_texts(&["a", "b", "c"]);
        assert_eq!(joined, "a\u{1F}b\u{1F}c");
    }
}
