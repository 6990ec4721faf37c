//! Adapter training against the frozen generator: leave-one-out retrieval,
//! batched cross-entropy on the answer bytes, gradient clipping, Adam on the
//! adapter weights only, and dev-selected checkpoints.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Exemplar;
use crate::embedding::EmbedSpec;
use crate::encoders::{AdapterParams, AdapterSpec, EncoderError, Method};
use crate::metrics::MetricsError;
use crate::numerics::{clip_global_norm, Adam, Matrix, NumericsError, Tape};
use crate::pipeline::{
    evaluate_classifier, soft_prompt_on_tape, stratified_split, EvalSetup, PipelineError,
};
use crate::retrieval::{ExemplarStore, RetrievalError, RetrievalMode};
use crate::toy_lm::{render, LmError, LmWeights, PromptedInput, ThetaMode};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    BadConfig(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}; aborting")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, TrainError>;

/// Learning rates the sweep tries when none is pinned.
pub const LR_GRID: [f64; 3] = [1e-5, 3e-5, 5e-4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    /// Exemplars retrieved per sample; 0 for the retrieval-free methods.
    pub k: usize,
    /// Hybrid knob: the first `c` retrieved exemplars also stay in the
    /// prompt as plain text during training and dev evaluation.
    pub text_context: usize,
    pub heads: usize,
    pub m: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Fraction held out for dev selection; 0 trains on everything and
    /// keeps the final weights.
    pub dev_fraction: f64,
    pub clip: f64,
    pub retrieval_mode: RetrievalMode,
    pub embed_spec: EmbedSpec,
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        TrainConfig {
            method,
            k: if method.uses_retrieval() { 5 } else { 0 },
            text_context: 0,
            heads: 4,
            m: 4,
            lr: 3e-5,
            epochs: 10,
            batch: 8,
            seed: 0,
            dev_fraction: 0.1,
            clip: 1.0,
            retrieval_mode: RetrievalMode::Tanimoto,
            embed_spec: EmbedSpec::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.method.has_adapter() {
            return Err(TrainError::BadConfig(format!(
                "{} has nothing to train",
                self.method
            )));
        }
        if self.method.uses_retrieval() && self.k == 0 {
            return Err(TrainError::BadConfig(format!(
                "{} needs k >= 1 retrieved exemplars",
                self.method
            )));
        }
        if !self.method.uses_retrieval() && self.k != 0 {
            return Err(TrainError::BadConfig(format!(
                "{} ignores exemplars; set k = 0",
                self.method
            )));
        }
        crate::pipeline::validate_text_context(self.method, self.text_context, self.k)
            .map_err(|e| TrainError::BadConfig(e.to_string()))?;
        if self.epochs == 0 || self.batch == 0 {
            return Err(TrainError::BadConfig(
                "epochs and batch must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::BadConfig("lr must be positive".into()));
        }
        if !(self.clip.is_finite() && self.clip > 0.0) {
            return Err(TrainError::BadConfig("clip must be positive".into()));
        }
        Ok(())
    }
}

/// One epoch's coordinates and outcomes, the unit of the history CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_eff_acc: Option<f64>,
    pub lr: f64,
    pub seed: u64,
    pub method: Method,
    pub k: usize,
    pub heads: usize,
    pub m: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Dev-selected weights (final weights when no dev split exists).
    pub adapter: AdapterParams,
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    pub best_dev_eff_acc: Option<f64>,
    /// Samples dropped because leave-one-out retrieval came back empty.
    pub skipped_samples: usize,
    /// Optimizer slot count, which must equal the adapter's matrix count:
    /// the frozen generator never gets optimizer state.
    pub optimizer_slots: usize,
    /// Generator checksum after training; compare with the value taken
    /// before to certify the frozen weights never moved.
    pub theta_checksum: String,
}

/// Retrieved context per training sample, excluding the sample itself.
/// Samples whose pool is empty after exclusion are absent from the map and
/// counted in the second return.
pub fn leave_one_out_cache(
    store: &ExemplarStore,
    samples: &[Exemplar],
    k: usize,
) -> Result<(BTreeMap<String, Vec<Exemplar>>, usize)> {
    let mut cache = BTreeMap::new();
    let mut skipped = 0;
    for ex in samples {
        match store.top_k(&ex.question, k, Some(&ex.id)) {
            Ok(hit) => {
                cache.insert(ex.id.clone(), store.resolve(&hit.ids)?);
            }
            Err(RetrievalError::EmptyAfterExclusion) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    Ok((cache, skipped))
}

/// Forward one batch on a single tape and return (mean loss, gradient per
/// adapter matrix in optimizer order). The generator registers as constants,
/// so the backward pass touches adapter nodes only.
fn batch_grads(
    lm: &LmWeights,
    adapter: &AdapterParams,
    embed_spec: &EmbedSpec,
    text_context: usize,
    batch: &[(&Exemplar, &[Exemplar])],
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let lm_nodes = lm.register(&mut tape, ThetaMode::Frozen)?;
    let adapter_nodes = adapter.register(&mut tape)?;
    let mut losses = Vec::with_capacity(batch.len());
    for (ex, retrieved) in batch {
        let z = soft_prompt_on_tape(
            &mut tape,
            adapter,
            &adapter_nodes,
            embed_spec,
            &ex.question,
            retrieved,
        )?;
        let kept_as_text = &retrieved[..text_context.min(retrieved.len())];
        let rendered = render(
            &PromptedInput {
                soft_prompt_len: tape.value(z).rows(),
                context_exemplars: kept_as_text,
                question: &ex.question,
                answer: Some(&ex.answer),
            },
            lm.config.max_positions,
        )?;
        let fwd = lm.forward(&mut tape, &lm_nodes, &rendered, Some(z))?;
        losses.push(fwd.loss.expect("answer present, loss exists"));
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    let mean = tape.scale(total, 1.0 / losses.len() as f64)?;
    let value = tape.value(mean).get(0, 0);
    tape.backward(mean)?;
    let grads = adapter_nodes
        .iter()
        .map(|&id| tape.grad_or_zeros(id))
        .collect();
    Ok((value, grads))
}

/// Trains an adapter against the frozen generator. Every random choice
/// derives from `config.seed`, so reruns produce bit-identical weights and
/// history.
pub fn train_adapter(
    lm: &LmWeights,
    exemplars: &[Exemplar],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if exemplars.len() < 2 {
        return Err(TrainError::BadConfig(
            "training needs at least 2 exemplars".into(),
        ));
    }
    let (fit, dev) = stratified_split(exemplars, config.dev_fraction, config.seed)?;
    let mut adapter = AdapterParams::init(&AdapterSpec {
        method: config.method,
        d_model: lm.config.d_model,
        d_embed: config.embed_spec.dim,
        heads: config.heads,
        m: config.m,
        seed: config.seed,
    })?;

    let store = if config.method.uses_retrieval() {
        Some(ExemplarStore::build(
            &fit,
            config.retrieval_mode,
            config.embed_spec,
        )?)
    } else {
        None
    };
    let empty_context: Vec<Exemplar> = Vec::new();
    let (cache, skipped_samples) = match &store {
        Some(store) => leave_one_out_cache(store, &fit, config.k)?,
        None => (BTreeMap::new(), 0),
    };
    let trainable: Vec<&Exemplar> = fit
        .iter()
        .filter(|ex| store.is_none() || cache.contains_key(&ex.id))
        .collect();
    if trainable.is_empty() {
        return Err(TrainError::BadConfig(format!(
            "no trainable samples remain ({skipped_samples} skipped for empty retrieval)"
        )));
    }

    let shapes: Vec<(usize, usize)> = adapter.matrices().iter().map(|m| m.shape()).collect();
    let mut adam = Adam::new(config.lr, &shapes);
    let optimizer_slots = adam.slot_count();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xba7c_405d_e70c_0002);

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, AdapterParams)> = None;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..trainable.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.gen_range(0..=i));
        }
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch).enumerate() {
            let batch: Vec<(&Exemplar, &[Exemplar])> = chunk
                .iter()
                .map(|&i| {
                    let ex = trainable[i];
                    let retrieved = cache
                        .get(&ex.id)
                        .map(Vec::as_slice)
                        .unwrap_or(&empty_context);
                    (ex, retrieved)
                })
                .collect();
            let (batch_loss, mut grads) =
                batch_grads(lm, &adapter, &config.embed_spec, config.text_context, &batch)?;
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            clip_global_norm(&mut grads, config.clip);
            adam.step(&mut adapter.matrices_mut(), &grads)?;
            loss_sum += batch_loss * batch.len() as f64;
            loss_count += batch.len();
        }
        let train_loss = loss_sum / loss_count as f64;

        let dev_eff_acc = if dev.is_empty() {
            None
        } else {
            let report = evaluate_classifier(
                &EvalSetup {
                    lm,
                    method: config.method,
                    adapter: Some(&adapter),
                    store: store.as_ref(),
                    k: config.k,
                    text_context: config.text_context,
                    shuffle_seed: None,
                },
                &dev,
            )?;
            Some(report.effective_accuracy)
        };
        if let Some(acc) = dev_eff_acc {
            // Strict improvement keeps the earliest best epoch on ties.
            if best.as_ref().map_or(true, |(b, _, _)| acc > *b) {
                best = Some((acc, epoch, adapter.clone()));
            }
        }
        history.push(HistoryRow {
            epoch,
            train_loss,
            dev_eff_acc,
            lr: config.lr,
            seed: config.seed,
            method: config.method,
            k: config.k,
            heads: config.heads,
            m: config.m,
        });
    }

    let (best_dev_eff_acc, best_epoch, chosen) = match best {
        Some((acc, epoch, params)) => (Some(acc), epoch, params),
        None => (None, config.epochs, adapter),
    };
    Ok(TrainOutcome {
        adapter: chosen,
        history,
        best_epoch,
        best_dev_eff_acc,
        skipped_samples,
        optimizer_slots,
        theta_checksum: lm.checksum(),
    })
}

/// One grid point's fate in a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lr: f64,
    pub dev_eff_acc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct LrSweepOutcome {
    pub best_lr: f64,
    pub best: TrainOutcome,
    pub points: Vec<SweepPoint>,
}

/// Index of the winning point: highest dev score, ties to the smaller lr.
fn select_best_point(points: &[(f64, Option<f64>)]) -> Option<usize> {
    let mut winner: Option<usize> = None;
    for (i, &(lr, acc)) in points.iter().enumerate() {
        let Some(acc) = acc else { continue };
        let replace = match winner {
            None => true,
            Some(w) => {
                let (wlr, wacc) = points[w];
                let wacc = wacc.expect("winner always has a score");
                acc > wacc || (acc == wacc && lr < wlr)
            }
        };
        if replace {
            winner = Some(i);
        }
    }
    winner
}

/// Trains once per learning rate with everything else fixed and keeps the
/// dev-best run. Failed points are recorded, not fatal, unless every point
/// fails.
pub fn lr_sweep(
    lm: &LmWeights,
    exemplars: &[Exemplar],
    base: &TrainConfig,
    grid: &[f64],
) -> Result<LrSweepOutcome> {
    if grid.is_empty() {
        return Err(TrainError::BadConfig("empty learning-rate grid".into()));
    }
    if base.dev_fraction <= 0.0 {
        return Err(TrainError::BadConfig(
            "a sweep needs a dev split to select on".into(),
        ));
    }
    let mut points = Vec::with_capacity(grid.len());
    let mut outcomes: Vec<Option<TrainOutcome>> = Vec::with_capacity(grid.len());
    for &lr in grid {
        let config = TrainConfig { lr, ..*base };
        match train_adapter(lm, exemplars, &config) {
            Ok(outcome) => {
                points.push(SweepPoint {
                    lr,
                    dev_eff_acc: outcome.best_dev_eff_acc,
                    error: None,
                });
                outcomes.push(Some(outcome));
            }
            Err(e) => {
                points.push(SweepPoint {
                    lr,
                    dev_eff_acc: None,
                    error: Some(e.to_string()),
                });
                outcomes.push(None);
            }
        }
    }
    let scored: Vec<(f64, Option<f64>)> =
        points.iter().map(|p| (p.lr, p.dev_eff_acc)).collect();
    let Some(winner) = select_best_point(&scored) else {
        let summary: Vec<String> = points
            .iter()
            .map(|p| format!("lr {}: {}", p.lr, p.error.as_deref().unwrap_or("no dev score")))
            .collect();
        return Err(TrainError::BadConfig(format!(
            "every sweep point failed: {}",
            summary.join("; ")
        )));
    };
    let best = outcomes.swap_remove(winner).expect("winner trained");
    Ok(LrSweepOutcome {
        best_lr: grid[winner],
        best,
        points,
    })
}
