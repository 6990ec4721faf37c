//! Shared resolution from merged configuration to the concrete training,
//! evaluation, and cost-model settings a run uses.

use anyhow::Result;
use mharag_core::cost::{CostInputs, TransformerShape, CLASSIFICATION_DECODE_TOKENS};
use mharag_core::data::GeneratedDataset;
use mharag_core::embedding::EmbedSpec;
use mharag_core::encoders::Method;
use mharag_core::toy_lm::LmConfig;
use mharag_core::training::TrainConfig;

use crate::artifacts::resolve_retrieval;
use crate::config::{
    FileConfig, DEFAULT_BATCH, DEFAULT_CLIP, DEFAULT_DEV_FRACTION, DEFAULT_EMBED_TEXT_TOKENS,
    DEFAULT_EPOCHS, DEFAULT_EXEMPLAR_TEXT_TOKENS, DEFAULT_HEADS, DEFAULT_K, DEFAULT_LR,
    DEFAULT_M, DEFAULT_QUESTION_TOKENS,
};

/// Operating point shared by training, evaluation, and the cost model.
#[derive(Debug, Clone, Copy)]
pub struct Point {
    pub method: Method,
    pub k: usize,
    pub c: usize,
    pub heads: usize,
    pub m: usize,
    pub lr: f64,
    pub epochs: usize,
}

pub fn resolve_point(merged: &FileConfig, method: Method) -> Result<Point> {
    merged.validate_against(method)?;
    let k = merged
        .k
        .unwrap_or(if method.uses_retrieval() { DEFAULT_K } else { 0 });
    Ok(Point {
        method,
        k,
        c: merged.c.unwrap_or(0),
        heads: merged.heads.unwrap_or(DEFAULT_HEADS),
        m: merged.m.unwrap_or(DEFAULT_M),
        lr: merged.lr.unwrap_or(DEFAULT_LR),
        epochs: merged.epochs.unwrap_or(DEFAULT_EPOCHS),
    })
}

/// Training settings for one seed at one operating point.
pub fn train_config(
    merged: &FileConfig,
    point: &Point,
    dataset: &GeneratedDataset,
    seed: u64,
) -> Result<TrainConfig> {
    Ok(TrainConfig {
        method: point.method,
        k: point.k,
        text_context: point.c,
        heads: point.heads,
        m: point.m,
        lr: point.lr,
        epochs: point.epochs,
        batch: merged.batch.unwrap_or(DEFAULT_BATCH),
        seed,
        dev_fraction: merged.dev_fraction.unwrap_or(DEFAULT_DEV_FRACTION),
        clip: merged.clip.unwrap_or(DEFAULT_CLIP),
        retrieval_mode: resolve_retrieval(merged, dataset.manifest.kind)?,
        embed_spec: merged.embed_spec(Some(dataset.manifest.embed_spec)),
    })
}

/// Analytical cost inputs paired with a run. The generator plays both the
/// target LM and the embedder role, matching the paper's frozen-FM setup.
pub fn cost_inputs(
    merged: &FileConfig,
    point: &Point,
    lm: &LmConfig,
    spec: EmbedSpec,
    retrieval_pool: u64,
) -> CostInputs {
    let shape = TransformerShape {
        layers: lm.layers as u64,
        d_model: lm.d_model as u64,
        vocab: lm.vocab as u64,
    };
    let embed_text_tokens = merged
        .embed_text_tokens
        .unwrap_or(DEFAULT_EMBED_TEXT_TOKENS);
    let exemplar_text_tokens = merged
        .exemplar_text_tokens
        .unwrap_or(DEFAULT_EXEMPLAR_TEXT_TOKENS);
    let context_tokens = match point.method {
        Method::Rag => point.k as u64 * exemplar_text_tokens,
        Method::MhaRag | Method::Xrag | Method::XragK => point.c as u64 * exemplar_text_tokens,
        Method::Pt | Method::Idpg | Method::ZeroShot => 0,
    };
    CostInputs {
        lm: shape,
        embedder: shape,
        method: point.method,
        k: point.k as u64,
        heads: point.heads as u64,
        m: point.m as u64,
        d_embed: spec.dim as u64,
        embed_text_tokens,
        context_tokens,
        question_tokens: merged.question_tokens.unwrap_or(DEFAULT_QUESTION_TOKENS),
        new_tokens: CLASSIFICATION_DECODE_TOKENS,
        retrieval_pool: merged.retrieval_pool.unwrap_or(retrieval_pool),
        fingerprint_width: spec.fingerprint_width as u64,
    }
}
