//! End-to-end glue: retrieve exemplars for a question, build each method's
//! encoder inputs, produce the soft prompt or text context, and score the
//! two candidate answers with the frozen generator.

use rand_chacha::rand_core::SeedableRng;

use crate::data::Exemplar;
use crate::embedding::{join_texts, DenseEmbedding, EmbedSpec, EmbeddingError};
use crate::encoders::{AdapterParams, EncoderError, EncoderInputs, Method};
use crate::metrics::{
    effective_accuracy, shuffle_indices, ConfusionCounts, MetricsError, OrderVarianceError,
    OrderVarianceReport,
};
use crate::numerics::{Matrix, NodeId, Tape};
use crate::retrieval::{ExemplarStore, RetrievalError};
use crate::toy_lm::{LmError, LmWeights, PromptedInput};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("pipeline config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

type Result<T> = std::result::Result<T, PipelineError>;

/// The two answers the classification tasks decode between.
pub const YES_ANSWER: &str = "Yes";
pub const NO_ANSWER: &str = "No";

/// Owning form of the per-sample encoder inputs, built from raw texts.
#[derive(Debug, Clone)]
pub struct OwnedEncoderInputs {
    pub query: Option<DenseEmbedding>,
    pub contexts: Vec<DenseEmbedding>,
}

impl OwnedEncoderInputs {
    pub fn as_inputs(&self) -> EncoderInputs<'_> {
        EncoderInputs {
            query: self.query.as_ref(),
            contexts: &self.contexts,
        }
    }
}

fn embed_pair(spec: &EmbedSpec, ex: &Exemplar) -> Result<DenseEmbedding> {
    Ok(spec.embed(&join_texts(&[ex.question.as_str(), ex.answer.as_str()]))?)
}

/// What each method feeds its encoder.
///
/// The attention encoder reads the embedded question plus one embedding per
/// retrieved question-answer pair. The joint projection embeds the question
/// and every pair as one concatenated text; the per-pair projection embeds
/// each pair separately. The query-conditioned generator sees the question
/// alone, and the free prompt table sees nothing.
pub fn encoder_inputs(
    method: Method,
    spec: &EmbedSpec,
    question: &str,
    retrieved: &[Exemplar],
) -> Result<OwnedEncoderInputs> {
    if method.uses_retrieval() && retrieved.is_empty() {
        return Err(PipelineError::BadConfig(format!(
            "{method} needs at least one retrieved exemplar"
        )));
    }
    let inputs = match method {
        Method::MhaRag => OwnedEncoderInputs {
            query: Some(spec.embed(question)?),
            contexts: retrieved
                .iter()
                .map(|ex| embed_pair(spec, ex))
                .collect::<Result<_>>()?,
        },
        Method::Xrag => {
            let mut parts: Vec<&str> = vec![question];
            for ex in retrieved {
                parts.push(&ex.question);
                parts.push(&ex.answer);
            }
            OwnedEncoderInputs {
                query: None,
                contexts: vec![spec.embed(&join_texts(&parts))?],
            }
        }
        Method::XragK => OwnedEncoderInputs {
            query: None,
            contexts: retrieved
                .iter()
                .map(|ex| embed_pair(spec, ex))
                .collect::<Result<_>>()?,
        },
        Method::Idpg => OwnedEncoderInputs {
            query: Some(spec.embed(question)?),
            contexts: Vec::new(),
        },
        Method::Pt => OwnedEncoderInputs {
            query: None,
            contexts: Vec::new(),
        },
        Method::Rag | Method::ZeroShot => {
            return Err(PipelineError::BadConfig(format!(
                "{method} has no encoder inputs"
            )))
        }
    };
    Ok(inputs)
}

/// Soft prompt as a plain matrix for frozen evaluation.
pub fn soft_prompt_value(
    adapter: &AdapterParams,
    spec: &EmbedSpec,
    question: &str,
    retrieved: &[Exemplar],
) -> Result<Matrix> {
    let inputs = encoder_inputs(adapter.method(), spec, question, retrieved)?;
    Ok(adapter.encode_value(&inputs.as_inputs())?)
}

/// Soft prompt wired into an existing tape so gradients flow into the
/// adapter nodes during training.
pub fn soft_prompt_on_tape(
    tape: &mut Tape,
    adapter: &AdapterParams,
    adapter_nodes: &[NodeId],
    spec: &EmbedSpec,
    question: &str,
    retrieved: &[Exemplar],
) -> Result<NodeId> {
    let inputs = encoder_inputs(adapter.method(), spec, question, retrieved)?;
    Ok(adapter.encode(tape, adapter_nodes, &inputs.as_inputs())?)
}

/// Rejects hybrid text-context requests the method cannot honor: only the
/// encoder methods that actually retrieve can keep extra exemplars as text,
/// and never more than they retrieved.
pub fn validate_text_context(method: Method, c: usize, k: usize) -> Result<()> {
    if c == 0 {
        return Ok(());
    }
    let hybrid_capable = method.has_adapter() && method.uses_retrieval();
    if !hybrid_capable {
        return Err(PipelineError::BadConfig(format!(
            "{method} cannot keep extra text exemplars; set c = 0"
        )));
    }
    if c > k {
        return Err(PipelineError::BadConfig(format!(
            "hybrid keeps c = {c} exemplars as text but only k = {k} are retrieved"
        )));
    }
    Ok(())
}

/// One question's prompt ingredients: the soft prompt (if the method builds
/// one) and the exemplars kept as plain text. For the encoder methods,
/// `text_context` is the hybrid knob: the first that many retrieved
/// exemplars also stay in the prompt as text.
pub fn prepare_prompt(
    method: Method,
    adapter: Option<&AdapterParams>,
    spec: &EmbedSpec,
    question: &str,
    retrieved: &[Exemplar],
    text_context: usize,
) -> Result<(Option<Matrix>, Vec<Exemplar>)> {
    validate_text_context(method, text_context, retrieved.len())?;
    if method.has_adapter() {
        let adapter = adapter.ok_or_else(|| {
            PipelineError::BadConfig(format!("{method} needs trained adapter weights"))
        })?;
        if adapter.method() != method {
            return Err(PipelineError::BadConfig(format!(
                "adapter was trained for {}, asked to run as {method}",
                adapter.method()
            )));
        }
        let z = soft_prompt_value(adapter, spec, question, retrieved)?;
        let kept = text_context.min(retrieved.len());
        Ok((Some(z), retrieved[..kept].to_vec()))
    } else {
        match method {
            Method::Rag => Ok((None, retrieved.to_vec())),
            Method::ZeroShot => Ok((None, Vec::new())),
            _ => unreachable!("adapter methods handled above"),
        }
    }
}

/// Restricted decoding over the two candidate answers; ties go to Yes so
/// the decision is total and deterministic.
pub fn classify(
    lm: &LmWeights,
    method: Method,
    adapter: Option<&AdapterParams>,
    spec: &EmbedSpec,
    question: &str,
    retrieved: &[Exemplar],
    text_context: usize,
) -> Result<bool> {
    let (z, text_context) =
        prepare_prompt(method, adapter, spec, question, retrieved, text_context)?;
    let prompted = PromptedInput {
        soft_prompt_len: z.as_ref().map_or(0, Matrix::rows),
        context_exemplars: &text_context,
        question,
        answer: None,
    };
    let yes = lm.score_answer(&prompted, z.as_ref(), YES_ANSWER)?;
    let no = lm.score_answer(&prompted, z.as_ref(), NO_ANSWER)?;
    Ok(yes >= no)
}

fn actual_label(ex: &Exemplar) -> Result<bool> {
    match ex.answer.as_str() {
        YES_ANSWER => Ok(true),
        NO_ANSWER => Ok(false),
        other => Err(PipelineError::BadConfig(format!(
            "classification eval needs Yes/No answers, exemplar {:?} has {other:?}",
            ex.id
        ))),
    }
}

/// Everything one evaluation pass needs besides the test items.
#[derive(Clone, Copy)]
pub struct EvalSetup<'a> {
    pub lm: &'a LmWeights,
    pub method: Method,
    pub adapter: Option<&'a AdapterParams>,
    pub store: Option<&'a ExemplarStore>,
    pub k: usize,
    /// Hybrid knob: the first `c` retrieved exemplars also stay in the
    /// prompt as plain text (0 = pure soft prompt).
    pub text_context: usize,
    /// When set, each item's retrieved exemplars are permuted under this
    /// seed before encoding or rendering (the order-variance protocol).
    pub shuffle_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub counts: ConfusionCounts,
    pub effective_accuracy: f64,
    pub n: usize,
}

/// Scores every test item and folds the outcomes into effective accuracy.
pub fn evaluate_classifier(setup: &EvalSetup<'_>, test: &[Exemplar]) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(PipelineError::BadConfig("empty test set".into()));
    }
    if !setup.method.uses_retrieval() && setup.k != 0 {
        return Err(PipelineError::BadConfig(format!(
            "{} ignores exemplars; pass k = 0",
            setup.method
        )));
    }
    validate_text_context(setup.method, setup.text_context, setup.k)?;
    let retrieves = setup.method.uses_retrieval() && setup.k > 0;
    let store = if retrieves {
        Some(setup.store.ok_or_else(|| {
            PipelineError::BadConfig(format!("{} needs an exemplar store", setup.method))
        })?)
    } else {
        None
    };
    let spec = store
        .map(|s| s.embed_spec())
        .unwrap_or_default();
    let mut counts = ConfusionCounts::default();
    for ex in test {
        let actual = actual_label(ex)?;
        let mut retrieved = match store {
            Some(store) => {
                let hit = store.top_k(&ex.question, setup.k, None)?;
                store.resolve(&hit.ids)?
            }
            None => Vec::new(),
        };
        if let Some(seed) = setup.shuffle_seed {
            let order = shuffle_indices(seed, &ex.id, retrieved.len());
            retrieved = order.into_iter().map(|i| retrieved[i].clone()).collect();
        }
        let predicted = classify(
            setup.lm,
            setup.method,
            setup.adapter,
            &spec,
            &ex.question,
            &retrieved,
            setup.text_context,
        )?;
        counts.record(actual, predicted);
    }
    Ok(EvalReport {
        counts,
        effective_accuracy: effective_accuracy(&counts)?,
        n: test.len(),
    })
}

/// Runs the shuffled-order protocol: one full evaluation per seed with every
/// item's retrieved exemplars permuted, summarized as mean and spread.
pub fn order_variance_protocol(
    setup: &EvalSetup<'_>,
    test: &[Exemplar],
    seeds: &[u64],
) -> std::result::Result<OrderVarianceReport, OrderVarianceError<PipelineError>> {
    crate::metrics::order_variance(seeds, |seed| {
        let shuffled = EvalSetup {
            shuffle_seed: Some(seed),
            ..*setup
        };
        evaluate_classifier(&shuffled, test).map(|r| r.effective_accuracy)
    })
}

/// Seed-stable split into a larger fit part and a smaller held-out part,
/// stratified by answer so both labels appear on each side whenever the
/// input has them. Returns (fit, holdout).
pub fn stratified_split(
    exemplars: &[Exemplar],
    holdout_fraction: f64,
    seed: u64,
) -> Result<(Vec<Exemplar>, Vec<Exemplar>)> {
    use rand::Rng;
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(PipelineError::BadConfig(
            "holdout fraction must be in [0, 1)".into(),
        ));
    }
    let mut fit = Vec::new();
    let mut holdout = Vec::new();
    // Salted so the split stream never collides with other uses of the seed.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5717_ab0d_5eed_0001);
    for label in [YES_ANSWER, NO_ANSWER] {
        let mut group: Vec<Exemplar> = exemplars
            .iter()
            .filter(|e| e.answer == label)
            .cloned()
            .collect();
        for i in (1..group.len()).rev() {
            group.swap(i, rng.gen_range(0..=i));
        }
        let take = if holdout_fraction == 0.0 || group.is_empty() {
            0
        } else {
            ((group.len() as f64 * holdout_fraction).ceil() as usize).min(group.len() - 1)
        };
        holdout.extend(group.drain(..take));
        fit.extend(group);
    }
    let rest: Vec<Exemplar> = exemplars
        .iter()
        .filter(|e| e.answer != YES_ANSWER && e.answer != NO_ANSWER)
        .cloned()
        .collect();
    fit.extend(rest);
    if fit.is_empty() {
        return Err(PipelineError::BadConfig(
            "split left no exemplars to fit on".into(),
        ));
    }
    Ok((fit, holdout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::AdapterSpec;
    use crate::retrieval::RetrievalMode;
    use crate::toy_lm::LmConfig;

    fn tiny_lm() -> LmWeights {
        let config = LmConfig {
            layers: 1,
            d_model: 16,
            heads: 2,
            d_ff: 64,
            vocab: crate::toy_lm::tokenizer::VOCAB_SIZE,
            max_positions: 160,
        };
        LmWeights::init(&config, 5).unwrap()
    }

    fn ex(id: &str, q: &str, a: &str) -> Exemplar {
        Exemplar {
            id: id.into(),
            question: q.into(),
            answer: a.into(),
            doc: None,
        }
    }

    fn pool() -> Vec<Exemplar> {
        vec![
            ex("p0", "CCON", "Yes"),
            ex("p1", "CCOC", "No"),
            ex("p2", "NNCC", "Yes"),
            ex("p3", "OCCN", "No"),
            ex("p4", "CCCN", "Yes"),
        ]
    }

    fn store() -> ExemplarStore {
        ExemplarStore::build(&pool(), RetrievalMode::Tanimoto, EmbedSpec::default()).unwrap()
    }

    fn adapter(method: Method) -> AdapterParams {
        AdapterParams::init(&AdapterSpec {
            method,
            d_model: 16,
            d_embed: 64,
            heads: 2,
            m: 3,
            seed: 9,
        })
        .unwrap()
    }

    #[test]
    fn encoder_inputs_follow_each_methods_contract() {
        let spec = EmbedSpec::default();
        let retrieved = pool();
        let mha = encoder_inputs(Method::MhaRag, &spec, "CCQQ", &retrieved).unwrap();
        assert!(mha.query.is_some());
        assert_eq!(mha.contexts.len(), retrieved.len());
        let xrag = encoder_inputs(Method::Xrag, &spec, "CCQQ", &retrieved).unwrap();
        assert!(xrag.query.is_none());
        assert_eq!(xrag.contexts.len(), 1);
        let xragk = encoder_inputs(Method::XragK, &spec, "CCQQ", &retrieved).unwrap();
        assert_eq!(xragk.contexts.len(), retrieved.len());
        let idpg = encoder_inputs(Method::Idpg, &spec, "CCQQ", &retrieved).unwrap();
        assert!(idpg.query.is_some());
        assert!(idpg.contexts.is_empty());
        let pt = encoder_inputs(Method::Pt, &spec, "CCQQ", &retrieved).unwrap();
        assert!(pt.query.is_none() && pt.contexts.is_empty());
        assert!(encoder_inputs(Method::Rag, &spec, "CCQQ", &retrieved).is_err());
        assert!(encoder_inputs(Method::MhaRag, &spec, "CCQQ", &[]).is_err());
    }

    #[test]
    fn joint_text_is_question_then_pairs_in_retrieval_order() {
        // Independent reconstruction of the concatenation the joint
        // projection embeds.
        let spec = EmbedSpec::default();
        let retrieved = vec![ex("a", "q1", "Yes"), ex("b", "q2", "No")];
        let got = encoder_inputs(Method::Xrag, &spec, "qq", &retrieved).unwrap();
        let manual = spec
            .embed(&join_texts(&["qq", "q1", "Yes", "q2", "No"]))
            .unwrap();
        assert_eq!(got.contexts[0], manual);
        // A different exemplar order embeds differently (position-folded
        // hashing), which is exactly the order sensitivity the protocol
        // measures for this method.
        let swapped = vec![retrieved[1].clone(), retrieved[0].clone()];
        let other = encoder_inputs(Method::Xrag, &spec, "qq", &swapped).unwrap();
        assert_ne!(other.contexts[0], manual);
    }

    #[test]
    fn tape_and_value_prompts_agree() {
        let spec = EmbedSpec::default();
        let adapter = adapter(Method::MhaRag);
        let retrieved = pool();
        let by_value = soft_prompt_value(&adapter, &spec, "CCQQ", &retrieved).unwrap();
        let mut tape = Tape::new();
        let nodes = adapter.register(&mut tape).unwrap();
        let node =
            soft_prompt_on_tape(&mut tape, &adapter, &nodes, &spec, "CCQQ", &retrieved).unwrap();
        assert_eq!(tape.value(node).max_abs_diff(&by_value).unwrap(), 0.0);
        assert_eq!(by_value.shape(), (2, 16));
    }

    #[test]
    fn prepare_prompt_splits_soft_and_text_paths() {
        let spec = EmbedSpec::default();
        let retrieved = pool();
        let pt = adapter(Method::Pt);
        let (z, text) = prepare_prompt(Method::Pt, Some(&pt), &spec, "CQ", &retrieved, 0).unwrap();
        assert_eq!(z.unwrap().rows(), 3);
        assert!(text.is_empty());
        let (z, text) = prepare_prompt(Method::Rag, None, &spec, "CQ", &retrieved, 0).unwrap();
        assert!(z.is_none());
        assert_eq!(text.len(), retrieved.len());
        let (z, text) = prepare_prompt(Method::ZeroShot, None, &spec, "CQ", &retrieved, 0).unwrap();
        assert!(z.is_none() && text.is_empty());
        assert!(prepare_prompt(Method::MhaRag, None, &spec, "CQ", &retrieved, 0).is_err());
        let wrong = adapter(Method::Xrag);
        assert!(prepare_prompt(Method::MhaRag, Some(&wrong), &spec, "CQ", &retrieved, 0).is_err());
    }

    #[test]
    fn hybrid_keeps_the_leading_exemplars_as_text() {
        let spec = EmbedSpec::default();
        let retrieved = pool();
        let a = adapter(Method::MhaRag);
        let (z, text) =
            prepare_prompt(Method::MhaRag, Some(&a), &spec, "CQ", &retrieved, 2).unwrap();
        assert_eq!(text, retrieved[..2]);
        // The soft prompt itself still reads the whole retrieved set.
        let full = soft_prompt_value(&a, &spec, "CQ", &retrieved).unwrap();
        assert_eq!(z.unwrap().max_abs_diff(&full).unwrap(), 0.0);

        // Methods without retrieved exemplars have nothing to keep as text,
        // and nobody can keep more than was retrieved.
        let pt = adapter(Method::Pt);
        assert!(prepare_prompt(Method::Pt, Some(&pt), &spec, "CQ", &retrieved, 1).is_err());
        assert!(validate_text_context(Method::MhaRag, 4, 3).is_err());
        assert!(validate_text_context(Method::Rag, 1, 5).is_err());
        assert!(validate_text_context(Method::MhaRag, 3, 3).is_ok());
        assert!(validate_text_context(Method::ZeroShot, 0, 0).is_ok());
    }

    #[test]
    fn classify_is_deterministic() {
        let lm = tiny_lm();
        let spec = EmbedSpec::default();
        let retrieved = pool();
        let adapter = adapter(Method::MhaRag);
        let a = classify(&lm, Method::MhaRag, Some(&adapter), &spec, "CCON", &retrieved, 0).unwrap();
        let b = classify(&lm, Method::MhaRag, Some(&adapter), &spec, "CCON", &retrieved, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn evaluation_tallies_against_gold_labels() {
        let lm = tiny_lm();
        let setup = EvalSetup {
            lm: &lm,
            method: Method::ZeroShot,
            adapter: None,
            store: None,
            k: 0,
            text_context: 0,
            shuffle_seed: None,
        };
        let test = pool();
        let report = evaluate_classifier(&setup, &test).unwrap();
        assert_eq!(report.n, 5);
        assert_eq!(report.counts.total(), 5);
        // An untrained model still yields a well-defined score.
        assert!((0.0..=100.0).contains(&report.effective_accuracy));
    }

    #[test]
    fn eval_rejects_inconsistent_setups() {
        let lm = tiny_lm();
        let mut setup = EvalSetup {
            lm: &lm,
            method: Method::Pt,
            adapter: None,
            store: None,
            k: 3,
            text_context: 0,
            shuffle_seed: None,
        };
        let test = pool();
        assert!(evaluate_classifier(&setup, &test).is_err(), "pt with k > 0");
        setup.method = Method::Rag;
        assert!(evaluate_classifier(&setup, &test).is_err(), "no store");
        setup.k = 0;
        setup.method = Method::ZeroShot;
        assert!(evaluate_classifier(&setup, &[]).is_err(), "empty test");
        let bad = vec![ex("x", "CC", "Maybe")];
        assert!(evaluate_classifier(&setup, &bad).is_err(), "non-binary gold");
    }

    #[test]
    fn input_free_prompts_are_immune_to_shuffling() {
        // The free table and the query-only generator never see exemplars,
        // so every shuffle seed reproduces the same predictions exactly.
        let lm = tiny_lm();
        let store = store();
        let test = vec![ex("t0", "CCOO", "Yes"), ex("t1", "NOON", "No")];
        for method in [Method::Pt, Method::Idpg] {
            let a = adapter(method);
            let setup = EvalSetup {
                lm: &lm,
                method,
                adapter: Some(&a),
                store: Some(&store),
                k: 0,
                text_context: 0,
                shuffle_seed: None,
            };
            let report = order_variance_protocol(&setup, &test, &[1, 2, 3]).unwrap();
            assert_eq!(report.std, 0.0, "{method}");
        }
    }

    #[test]
    fn attention_encoder_is_immune_to_shuffling_end_to_end() {
        let lm = tiny_lm();
        let store = store();
        let a = adapter(Method::MhaRag);
        let setup = EvalSetup {
            lm: &lm,
            method: Method::MhaRag,
            adapter: Some(&a),
            store: Some(&store),
            k: 3,
            text_context: 0,
            shuffle_seed: None,
        };
        let test = vec![ex("t0", "CCOO", "Yes"), ex("t1", "NOON", "No")];
        let report = order_variance_protocol(&setup, &test, &[7, 8, 9]).unwrap();
        assert_eq!(report.std, 0.0);
        assert_eq!(report.scores.len(), 3);
    }

    #[test]
    fn shuffling_changes_what_text_methods_render() {
        // Not an accuracy claim, just that the shuffle seed actually moves
        // the exemplar order a text-context method renders.
        let store = store();
        let hit = store.top_k("CCON", 3, None).unwrap();
        let retrieved = store.resolve(&hit.ids).unwrap();
        let order_a = shuffle_indices(1, "item", retrieved.len());
        let order_b = shuffle_indices(2, "item", retrieved.len());
        assert_ne!(order_a, order_b);
    }

    #[test]
    fn stratified_split_is_stable_and_balanced() {
        let mut exemplars = Vec::new();
        for i in 0..20 {
            let answer = if i % 2 == 0 { "Yes" } else { "No" };
            exemplars.push(ex(&format!("e{i}"), &format!("q{i}"), answer));
        }
        let (fit_a, dev_a) = stratified_split(&exemplars, 0.1, 4).unwrap();
        let (fit_b, dev_b) = stratified_split(&exemplars, 0.1, 4).unwrap();
        assert_eq!(fit_a, fit_b);
        assert_eq!(dev_a, dev_b);
        assert_eq!(fit_a.len() + dev_a.len(), 20);
        assert!(dev_a.iter().any(|e| e.answer == "Yes"));
        assert!(dev_a.iter().any(|e| e.answer == "No"));
        let (fit_c, _) = stratified_split(&exemplars, 0.1, 5).unwrap();
        assert_ne!(fit_a, fit_c, "different seed, different shuffle");
        let (fit_all, dev_none) = stratified_split(&exemplars, 0.0, 4).unwrap();
        assert_eq!(fit_all.len(), 20);
        assert!(dev_none.is_empty());
        assert!(stratified_split(&exemplars, 1.0, 4).is_err());
    }
}
