//! Analytical inference-cost model and trainable-parameter accounting.
//!
//! Counting rule: one multiply-add is 2 FLOPs; embedding lookups are free;
//! the unembedding matmul is charged; layernorm, softmax, and activation
//! FLOPs are ignored (sub-1% at these shapes). All counts are exact u64
//! integers so reports are reproducible byte for byte.

use serde::{Deserialize, Serialize};

use crate::encoders::Method;
use crate::toy_lm::LmConfig;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CostError {
    #[error("cost model config: {0}")]
    BadConfig(String),
    #[error("flop count overflows u64; inputs are outside the model's intended range")]
    Overflow,
    #[error("feed-forward width {d_ff} must be exactly 4 x d_model {d_model} for the pass formula")]
    FfWidth { d_ff: usize, d_model: usize },
}

type Result<T> = std::result::Result<T, CostError>;

// Sanity caps so the u128 intermediate arithmetic below cannot wrap.
const MAX_DIM: u64 = 1 << 24;
const MAX_TOKENS: u64 = 1 << 40;

/// The shapes that determine a decoder pass cost. The feed-forward width is
/// baked in as 4 x d_model, which both bundled configs satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerShape {
    pub layers: u64,
    pub d_model: u64,
    pub vocab: u64,
}

impl TransformerShape {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.vocab == 0 {
            return Err(CostError::BadConfig(
                "transformer shape needs positive layers, d_model, vocab".into(),
            ));
        }
        if self.layers > MAX_DIM || self.d_model > MAX_DIM || self.vocab > MAX_DIM {
            return Err(CostError::BadConfig("transformer shape out of range".into()));
        }
        Ok(())
    }

    /// FLOPs for one full pass over `t` tokens:
    /// L ( 24 t d^2 + 4 t^2 d ) + 2 t d V.
    /// Per layer that is 8td^2 for the qkv and output projections, 16td^2
    /// for the two feed-forward matmuls at width 4d, and 4t^2d for the
    /// score and value-mixing matmuls; the tail term is the unembedding.
    pub fn pass_flops(&self, t: u64) -> Result<u64> {
        self.validate()?;
        if t > MAX_TOKENS {
            return Err(CostError::BadConfig("token count out of range".into()));
        }
        let (l, d, v, t) = (
            self.layers as u128,
            self.d_model as u128,
            self.vocab as u128,
            t as u128,
        );
        let wide = l * (24 * t * d * d + 4 * t * t * d) + 2 * t * d * v;
        u64::try_from(wide).map_err(|_| CostError::Overflow)
    }

    /// FLOPs to decode `new` tokens one at a time on top of a `prefill`-token
    /// cache: token j attends over prefill + j positions, so
    /// sum_j L ( 24 d^2 + 4 (prefill + j) d ) + 2 d V, evaluated in closed
    /// form.
    pub fn decode_flops(&self, prefill: u64, new: u64) -> Result<u64> {
        self.validate()?;
        if prefill > MAX_TOKENS || new > MAX_TOKENS {
            return Err(CostError::BadConfig("token count out of range".into()));
        }
        let (l, d, v) = (self.layers as u128, self.d_model as u128, self.vocab as u128);
        let (p, n) = (prefill as u128, new as u128);
        // sum_{j=1..n} (p + j) = n p + n (n + 1) / 2
        let attended = n * p + n * (n + 1) / 2;
        let wide = l * (24 * n * d * d + 4 * attended * d) + 2 * n * d * v;
        u64::try_from(wide).map_err(|_| CostError::Overflow)
    }
}

impl TryFrom<&LmConfig> for TransformerShape {
    type Error = CostError;

    fn try_from(config: &LmConfig) -> Result<Self> {
        if config.d_ff != 4 * config.d_model {
            return Err(CostError::FfWidth {
                d_ff: config.d_ff,
                d_model: config.d_model,
            });
        }
        Ok(Self {
            layers: config.layers as u64,
            d_model: config.d_model as u64,
            vocab: config.vocab as u64,
        })
    }
}

/// Token counts behind one report, echoed back so rows are self-describing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    /// Soft prompt rows seen by the generator (0 for text-only methods).
    pub m: u64,
    /// Plain-text exemplar tokens kept in the prompt.
    pub context_tokens: u64,
    pub question_tokens: u64,
    pub new_tokens: u64,
}

impl TokenBudget {
    pub fn prefill_len(&self) -> u64 {
        self.m + self.context_tokens + self.question_tokens
    }
}

/// Everything the analytical model needs for one method at one operating
/// point. `heads` is read only for the attention encoder, `m` only for the
/// free-table and query-generator methods, `k` is the retrieved exemplar
/// count, and `embed_text_tokens` is the length of one embedded exemplar
/// text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostInputs {
    pub lm: TransformerShape,
    pub embedder: TransformerShape,
    pub method: Method,
    pub k: u64,
    pub heads: u64,
    pub m: u64,
    pub d_embed: u64,
    pub embed_text_tokens: u64,
    pub context_tokens: u64,
    pub question_tokens: u64,
    pub new_tokens: u64,
    /// Candidate pool size for the optional retrieval line item (0 = omit).
    pub retrieval_pool: u64,
    pub fingerprint_width: u64,
}

/// Decode length used for the binary classification tasks in cost reports.
pub const CLASSIFICATION_DECODE_TOKENS: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: Method,
    pub encoder_flops: u64,
    pub projector_flops: u64,
    pub lm_prefill_flops: u64,
    pub lm_decode_flops: u64,
    /// Sum of the four components above.
    pub total_flops: u64,
    /// Fingerprint-similarity scan cost in 64-bit word operations, reported
    /// separately and never folded into `total_flops`.
    pub retrieval_word_ops: Option<u64>,
    pub budget: TokenBudget,
}

fn checked_sum(parts: [u64; 4]) -> Result<u64> {
    let mut acc: u64 = 0;
    for p in parts {
        acc = acc.checked_add(p).ok_or(CostError::Overflow)?;
    }
    Ok(acc)
}

/// Soft prompt rows each method hands the generator.
pub fn effective_prompt_rows(method: Method, k: u64, heads: u64, m: u64) -> u64 {
    match method {
        Method::MhaRag => heads,
        Method::Xrag => 1,
        Method::XragK => k,
        Method::Pt | Method::Idpg => m,
        Method::Rag | Method::ZeroShot => 0,
    }
}

/// Analytical inference cost for one query under one method.
pub fn flops_inference(inputs: &CostInputs) -> Result<CostReport> {
    inputs.lm.validate()?;
    inputs.embedder.validate()?;
    let CostInputs {
        method,
        k,
        heads,
        m,
        d_embed,
        embed_text_tokens,
        context_tokens,
        question_tokens,
        new_tokens,
        ..
    } = *inputs;
    if question_tokens == 0 {
        return Err(CostError::BadConfig("question_tokens must be positive".into()));
    }
    if d_embed == 0 || d_embed > MAX_DIM {
        return Err(CostError::BadConfig("d_embed out of range".into()));
    }
    for (name, value) in [
        ("k", k),
        ("heads", heads),
        ("m", m),
        ("embed_text_tokens", embed_text_tokens),
        ("context_tokens", context_tokens),
        ("question_tokens", question_tokens),
        ("new_tokens", new_tokens),
    ] {
        if value > MAX_TOKENS {
            return Err(CostError::BadConfig(format!("{name} out of range")));
        }
    }
    let needs_embedded_texts = matches!(method, Method::MhaRag | Method::Xrag | Method::XragK);
    match method {
        Method::MhaRag => {
            if heads == 0 || k == 0 {
                return Err(CostError::BadConfig(
                    "attention encoder needs heads >= 1 and k >= 1".into(),
                ));
            }
        }
        Method::Xrag | Method::XragK => {
            if k == 0 {
                return Err(CostError::BadConfig("projection methods need k >= 1".into()));
            }
        }
        Method::Pt | Method::Idpg => {
            if m == 0 {
                return Err(CostError::BadConfig("prompt length m must be >= 1".into()));
            }
            if k != 0 {
                return Err(CostError::BadConfig(
                    "retrieval-free methods take k = 0".into(),
                ));
            }
        }
        Method::ZeroShot => {
            if k != 0 {
                return Err(CostError::BadConfig("zero-shot takes k = 0".into()));
            }
        }
        Method::Rag => {}
    }
    if needs_embedded_texts && embed_text_tokens == 0 {
        return Err(CostError::BadConfig(
            "embedded exemplar texts must be at least 1 token".into(),
        ));
    }

    let d = inputs.lm.d_model as u128;
    let dp = d_embed as u128;
    let kk = k as u128;

    let encoder_flops = match method {
        // One embedder pass per exemplar text; the query reuses the
        // classifier-side embedding, so it is not billed here.
        Method::MhaRag | Method::XragK => {
            let per_text = inputs.embedder.pass_flops(embed_text_tokens)? as u128;
            u64::try_from(kk * per_text).map_err(|_| CostError::Overflow)?
        }
        // One pass over the single concatenated query + exemplars text.
        Method::Xrag => {
            let joint = question_tokens
                .checked_add(k.checked_mul(embed_text_tokens).ok_or(CostError::Overflow)?)
                .ok_or(CostError::Overflow)?;
            inputs.embedder.pass_flops(joint)?
        }
        // The query-conditioned generator embeds the question alone.
        Method::Idpg => inputs.embedder.pass_flops(question_tokens)?,
        Method::Pt | Method::Rag | Method::ZeroShot => 0,
    };

    let projector_flops = match method {
        // Per head: project q once and k, v per exemplar (2 d d' each),
        // then score and mix in d_model space (4 d per exemplar).
        Method::MhaRag => {
            let per_head = 2 * d * dp * (1 + 2 * kk) + 4 * kk * d;
            u64::try_from(heads as u128 * per_head).map_err(|_| CostError::Overflow)?
        }
        Method::Xrag => u64::try_from(2 * d * dp).map_err(|_| CostError::Overflow)?,
        Method::XragK => u64::try_from(kk * 2 * d * dp).map_err(|_| CostError::Overflow)?,
        Method::Idpg => u64::try_from(m as u128 * 2 * d * dp).map_err(|_| CostError::Overflow)?,
        Method::Pt | Method::Rag | Method::ZeroShot => 0,
    };

    let budget = TokenBudget {
        m: effective_prompt_rows(method, k, heads, m),
        context_tokens,
        question_tokens,
        new_tokens,
    };
    let prefill = budget.prefill_len();
    let lm_prefill_flops = inputs.lm.pass_flops(prefill)?;
    let lm_decode_flops = inputs.lm.decode_flops(prefill, new_tokens)?;

    let total_flops = checked_sum([
        encoder_flops,
        projector_flops,
        lm_prefill_flops,
        lm_decode_flops,
    ])?;

    let retrieval_word_ops = if inputs.retrieval_pool > 0 && method.uses_retrieval() && k > 0 {
        let words = inputs.fingerprint_width.div_ceil(64) as u128;
        Some(
            u64::try_from(inputs.retrieval_pool as u128 * 4 * words)
                .map_err(|_| CostError::Overflow)?,
        )
    } else {
        None
    };

    Ok(CostReport {
        method,
        encoder_flops,
        projector_flops,
        lm_prefill_flops,
        lm_decode_flops,
        total_flops,
        retrieval_word_ops,
        budget,
    })
}

/// Trainable parameters per method in closed form.
pub fn count_trainable(method: Method, d_model: u64, d_embed: u64, heads: u64, m: u64) -> Result<u64> {
    if d_model == 0 || d_embed == 0 {
        return Err(CostError::BadConfig("widths must be positive".into()));
    }
    let (d, dp) = (d_model as u128, d_embed as u128);
    let wide = match method {
        Method::MhaRag => {
            if heads == 0 {
                return Err(CostError::BadConfig("attention encoder needs heads >= 1".into()));
            }
            3 * heads as u128 * d * dp
        }
        Method::Xrag | Method::XragK => d * dp + d,
        Method::Pt => {
            if m == 0 {
                return Err(CostError::BadConfig("prompt length m must be >= 1".into()));
            }
            m as u128 * d
        }
        Method::Idpg => {
            if m == 0 {
                return Err(CostError::BadConfig("prompt length m must be >= 1".into()));
            }
            m as u128 * d * dp + m as u128 * d
        }
        Method::Rag | Method::ZeroShot => 0,
    };
    u64::try_from(wide).map_err(|_| CostError::Overflow)
}

/// Low-rank update size if rank-r factors were attached to the listed
/// weight matrices: r x sum(rows + cols). Accounting only; nothing here
/// trains such factors.
pub fn lora_param_count(rank: u64, attached: &[(u64, u64)]) -> Result<u64> {
    if rank == 0 {
        return Err(CostError::BadConfig("lora rank must be >= 1".into()));
    }
    let mut wide: u128 = 0;
    for &(rows, cols) in attached {
        wide += rank as u128 * (rows as u128 + cols as u128);
    }
    u64::try_from(wide).map_err(|_| CostError::Overflow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{AdapterParams, AdapterSpec};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn standard_lm() -> TransformerShape {
        TransformerShape::try_from(&LmConfig::standard()).unwrap()
    }

    fn compact_embedder() -> TransformerShape {
        TransformerShape::try_from(&LmConfig::compact()).unwrap()
    }

    fn base_inputs(method: Method) -> CostInputs {
        CostInputs {
            lm: standard_lm(),
            embedder: compact_embedder(),
            method,
            k: 0,
            heads: 0,
            m: 0,
            d_embed: 64,
            embed_text_tokens: 24,
            context_tokens: 0,
            question_tokens: 12,
            new_tokens: CLASSIFICATION_DECODE_TOKENS,
            retrieval_pool: 0,
            fingerprint_width: 2048,
        }
    }

    #[test]
    fn pass_cost_matches_a_per_piece_hand_count() {
        // Independent oracle, piece by piece at L=4, d=128, V=261, T=64:
        // qkv+output projections 8*T*d^2, feed-forward 16*T*d^2, score and
        // mix 4*T^2*d, all times L, plus unembedding 2*T*d*V.
        let t: u64 = 64;
        let d: u64 = 128;
        let v: u64 = 261;
        let l: u64 = 4;
        let per_layer = 8 * t * d * d + 16 * t * d * d + 4 * t * t * d;
        let by_hand = l * per_layer + 2 * t * d * v;
        assert_eq!(by_hand, 113_328_128);
        assert_eq!(standard_lm().pass_flops(t).unwrap(), by_hand);
    }

    #[test]
    fn decode_closed_form_matches_an_explicit_loop() {
        let lm = standard_lm();
        let prefill = 37;
        let new = 9;
        let mut looped: u64 = 0;
        for j in 1..=new {
            looped += lm.layers * (24 * lm.d_model * lm.d_model + 4 * (prefill + j) * lm.d_model)
                + 2 * lm.d_model * lm.vocab;
        }
        assert_eq!(lm.decode_flops(prefill, new).unwrap(), looped);
        assert_eq!(lm.decode_flops(prefill, 0).unwrap(), 0);
    }

    #[test]
    fn ff_width_must_be_four_times_d_model() {
        let mut config = LmConfig::standard();
        config.d_ff = 500;
        assert!(matches!(
            TransformerShape::try_from(&config),
            Err(CostError::FfWidth { d_ff: 500, d_model: 128 })
        ));
        assert!(TransformerShape::try_from(&LmConfig::standard()).is_ok());
        assert!(TransformerShape::try_from(&LmConfig::compact()).is_ok());
    }

    #[test]
    fn degenerate_shapes_and_counts_are_rejected() {
        let zero = TransformerShape { layers: 0, d_model: 128, vocab: 261 };
        assert!(zero.pass_flops(10).is_err());
        let mut inputs = base_inputs(Method::ZeroShot);
        inputs.question_tokens = 0;
        assert!(flops_inference(&inputs).is_err());
    }

    fn rag_total(k: u64, per_exemplar_tokens: u64) -> u64 {
        let mut inputs = base_inputs(Method::Rag);
        inputs.k = k;
        inputs.context_tokens = k * per_exemplar_tokens;
        flops_inference(&inputs).unwrap().total_flops
    }

    #[test]
    fn text_context_cost_grows_superlinearly_in_k() {
        // Doubling the exemplar count more than doubles the quadratic
        // attention share of prefill.
        let lm = standard_lm();
        let attention_term = |k: u64| {
            let t = k * 24 + 12;
            lm.layers * 4 * t * t * lm.d_model
        };
        for k in 1..=5 {
            assert!(attention_term(2 * k) > 2 * attention_term(k));
        }
        // Totals are convex in k: second differences strictly positive.
        let totals: Vec<u64> = (1..=10).map(|k| rag_total(k, 24)).collect();
        for w in totals.windows(3) {
            assert!(w[2] - w[1] > w[1] - w[0], "{w:?}");
        }
    }

    fn mha_total(k: u64, heads: u64) -> CostReport {
        let mut inputs = base_inputs(Method::MhaRag);
        inputs.k = k;
        inputs.heads = heads;
        flops_inference(&inputs).unwrap()
    }

    #[test]
    fn attention_encoder_cost_is_affine_in_k_with_the_predicted_slope() {
        let inputs = base_inputs(Method::MhaRag);
        let heads = 4u64;
        let per_text = inputs.embedder.pass_flops(inputs.embed_text_tokens).unwrap();
        let d = inputs.lm.d_model;
        let per_exemplar_head_cost = heads * (4 * d * inputs.d_embed + 4 * d);
        let slope = per_text + per_exemplar_head_cost;
        let totals: Vec<u64> = (1..=10).map(|k| mha_total(k, heads).total_flops).collect();
        for w in totals.windows(2) {
            assert_eq!(w[1] - w[0], slope);
        }
        // Prefill itself never moves with k: the prompt stays at H rows.
        let prefill_at = |k: u64| mha_total(k, heads).lm_prefill_flops;
        assert_eq!(prefill_at(1), prefill_at(10));
    }

    #[test]
    fn single_head_encoder_tracks_the_joint_projection_method() {
        // Same generator-side work for every k: both hand the model one
        // soft row. The encoder sides differ once k > 1 because one long
        // text costs more than k short ones (the t^2 term), so totals are
        // compared only at k = 1 with the embedded lengths matched.
        for k in 1..=10u64 {
            let mut mha = base_inputs(Method::MhaRag);
            mha.k = k;
            mha.heads = 1;
            let mut xrag = base_inputs(Method::Xrag);
            xrag.k = k;
            let a = flops_inference(&mha).unwrap();
            let b = flops_inference(&xrag).unwrap();
            assert_eq!(a.lm_prefill_flops, b.lm_prefill_flops);
            assert_eq!(a.lm_decode_flops, b.lm_decode_flops);
        }
        let mut mha = base_inputs(Method::MhaRag);
        mha.k = 1;
        mha.heads = 1;
        let mut xrag = base_inputs(Method::Xrag);
        xrag.k = 1;
        // Match the embedded text lengths: the joint text is question +
        // exemplar, so hand the single-head encoder a text of that length.
        mha.embed_text_tokens = xrag.question_tokens + xrag.embed_text_tokens;
        let a = flops_inference(&mha).unwrap();
        let b = flops_inference(&xrag).unwrap();
        assert_eq!(a.encoder_flops, b.encoder_flops);
        let d = mha.lm.d_model;
        // Residual is the head's extra query projection and score/mix work.
        assert_eq!(
            a.total_flops - b.total_flops,
            4 * d * mha.d_embed + 4 * d
        );
        let gap = (a.total_flops - b.total_flops) as f64 / b.total_flops as f64;
        assert!(gap <= 1e-3, "relative gap {gap}");
    }

    #[test]
    fn few_heads_beat_one_row_per_exemplar_and_text_context() {
        // Fewer prompt rows than exemplars: the prefill saving dwarfs the
        // extra head cost.
        let k = 8;
        let mha = mha_total(k, 2);
        let mut xragk = base_inputs(Method::XragK);
        xragk.k = k;
        let xragk = flops_inference(&xragk).unwrap();
        assert!(mha.total_flops < xragk.total_flops);
        // And the whole soft-prompt pipeline undercuts raw text context.
        assert!(mha_total(10, 4).total_flops < rag_total(10, 24));
    }

    #[test]
    fn totals_rise_with_every_token_axis() {
        let base = base_inputs(Method::ZeroShot);
        let total = |f: &dyn Fn(&mut CostInputs)| {
            let mut inputs = base;
            f(&mut inputs);
            flops_inference(&inputs).unwrap().total_flops
        };
        let reference = total(&|_| {});
        assert!(total(&|i| i.context_tokens = 8) > reference);
        assert!(total(&|i| i.question_tokens += 8) > reference);
        assert!(total(&|i| i.new_tokens += 8) > reference);
        assert!(rag_total(4, 24) > rag_total(3, 24));
    }

    #[test]
    fn report_total_is_the_sum_of_its_parts() {
        let mut inputs = base_inputs(Method::MhaRag);
        inputs.k = 5;
        inputs.heads = 4;
        inputs.retrieval_pool = 1500;
        let report = flops_inference(&inputs).unwrap();
        assert_eq!(
            report.total_flops,
            report.encoder_flops
                + report.projector_flops
                + report.lm_prefill_flops
                + report.lm_decode_flops
        );
        // The similarity scan is a separate line item: 1500 pairs, 4 word
        // ops over ceil(2048/64) = 32 words each.
        assert_eq!(report.retrieval_word_ops, Some(1500 * 4 * 32));
        inputs.retrieval_pool = 0;
        assert_eq!(flops_inference(&inputs).unwrap().retrieval_word_ops, None);
    }

    #[test]
    fn retrieval_free_methods_never_report_a_scan() {
        let mut pt = base_inputs(Method::Pt);
        pt.m = 4;
        pt.retrieval_pool = 1500;
        let report = flops_inference(&pt).unwrap();
        assert_eq!(report.retrieval_word_ops, None);
        assert_eq!(report.encoder_flops, 0);
        assert_eq!(report.projector_flops, 0);
        assert_eq!(report.budget.m, 4);
    }

    #[test]
    fn soft_prompt_rows_per_method() {
        assert_eq!(effective_prompt_rows(Method::MhaRag, 5, 4, 0), 4);
        assert_eq!(effective_prompt_rows(Method::Xrag, 5, 0, 0), 1);
        assert_eq!(effective_prompt_rows(Method::XragK, 5, 0, 0), 5);
        assert_eq!(effective_prompt_rows(Method::Pt, 0, 0, 7), 7);
        assert_eq!(effective_prompt_rows(Method::Idpg, 0, 0, 7), 7);
        assert_eq!(effective_prompt_rows(Method::Rag, 5, 0, 0), 0);
        assert_eq!(effective_prompt_rows(Method::ZeroShot, 0, 0, 0), 0);
    }

    #[test]
    fn method_preconditions_are_enforced() {
        let mut mha = base_inputs(Method::MhaRag);
        mha.k = 3;
        assert!(flops_inference(&mha).is_err(), "heads = 0");
        mha.heads = 2;
        mha.k = 0;
        assert!(flops_inference(&mha).is_err(), "k = 0");
        let mut pt = base_inputs(Method::Pt);
        pt.m = 4;
        pt.k = 2;
        assert!(flops_inference(&pt).is_err(), "pt with retrieval");
        let mut idpg = base_inputs(Method::Idpg);
        idpg.k = 0;
        assert!(flops_inference(&idpg).is_err(), "m = 0");
        let mut zero = base_inputs(Method::ZeroShot);
        zero.k = 1;
        assert!(flops_inference(&zero).is_err(), "zero-shot with k");
    }

    #[test]
    fn trainable_counts_match_hand_values() {
        assert_eq!(count_trainable(Method::Pt, 2048, 64, 0, 10).unwrap(), 20_480);
        assert_eq!(count_trainable(Method::MhaRag, 64, 32, 2, 0).unwrap(), 12_288);
        assert_eq!(count_trainable(Method::Xrag, 128, 64, 0, 0).unwrap(), 128 * 64 + 128);
        assert_eq!(count_trainable(Method::XragK, 128, 64, 0, 0).unwrap(), 128 * 64 + 128);
        assert_eq!(
            count_trainable(Method::Idpg, 128, 64, 0, 3).unwrap(),
            3 * 128 * 64 + 3 * 128
        );
        assert_eq!(count_trainable(Method::Rag, 128, 64, 0, 0).unwrap(), 0);
        assert_eq!(count_trainable(Method::ZeroShot, 128, 64, 0, 0).unwrap(), 0);
        assert!(count_trainable(Method::MhaRag, 128, 64, 0, 0).is_err());
        assert!(count_trainable(Method::Pt, 128, 64, 0, 0).is_err());
    }

    #[test]
    fn closed_forms_agree_with_instantiated_adapters() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for round in 0..20 {
            let d_model = rng.gen_range(2..48);
            let d_embed = rng.gen_range(2..48);
            let heads = rng.gen_range(1..6);
            let m = rng.gen_range(1..6);
            for method in Method::ALL {
                if !method.has_adapter() {
                    continue;
                }
                let spec = AdapterSpec {
                    method,
                    d_model,
                    d_embed,
                    heads,
                    m,
                    seed: round as u64,
                };
                let params = AdapterParams::init(&spec).unwrap();
                let closed = count_trainable(
                    method,
                    d_model as u64,
                    d_embed as u64,
                    heads as u64,
                    m as u64,
                )
                .unwrap();
                assert_eq!(closed, params.param_count() as u64, "{method}");
            }
        }
    }

    #[test]
    fn low_rank_accounting_follows_the_formula() {
        // r (in + out) summed over attached matrices.
        assert_eq!(lora_param_count(8, &[(128, 128), (128, 512)]).unwrap(), 8 * (256 + 640));
        assert_eq!(lora_param_count(4, &[]).unwrap(), 0);
        assert!(lora_param_count(0, &[(128, 128)]).is_err());
    }

    #[test]
    fn reports_serialize_for_the_harness() {
        let mut inputs = base_inputs(Method::MhaRag);
        inputs.k = 5;
        inputs.heads = 4;
        let report = flops_inference(&inputs).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: CostReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert!(json.contains("\"mha_rag\""));
    }
}
