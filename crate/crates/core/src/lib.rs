//! Soft-prompt compression of retrieved exemplars for a frozen decoder LM.
//!
//! The centerpiece is an order-invariant multi-head attention encoder that
//! turns K retrieved exemplar embeddings into an H-column soft prompt, next to
//! four baselines (text-context RAG, single- and per-exemplar affine
//! projectors, a free prompt table, and an input-dependent prompt generator).
//! Everything runs on 64-bit floats with reverse-mode autodiff on a Wengert
//! tape, deterministically under fixed seeds.

pub mod cost;
pub mod data;
pub mod embedding;
pub mod encoders;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod retrieval;
pub mod toy_lm;
pub mod training;
