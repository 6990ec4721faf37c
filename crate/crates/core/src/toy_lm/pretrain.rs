//! Next-token pretraining that mints the frozen weights.
//!
//! Blocks are rendered through the same layout evaluation uses (context
//! exemplars, question, answer), with the loss over every position rather
//! than just the answer, so the model learns both byte statistics and the
//! copy-from-context pattern.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{LmNodes, LmWeights, ThetaMode};
use super::{render, LmConfig, LmError, PromptedInput, Result};
use crate::data::generators::CorpusBlock;
use crate::numerics::{clip_global_norm, Adam, Matrix, Tape};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of blocks held out for the before/after loss comparison.
    pub holdout_fraction: f64,
    /// The run fails unless final holdout loss < ratio x initial.
    pub improvement_ratio: f64,
    /// Blocks rendering past this many positions are skipped, not truncated,
    /// so no block ever ends mid-answer.
    pub max_len: usize,
    /// Cap on holdout blocks actually evaluated (keeps eval cost bounded).
    pub max_holdout_blocks: usize,
    /// Print a progress line every this many steps; 0 is silent.
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            batch: 4,
            lr: 1e-3,
            seed: 0,
            holdout_fraction: 0.1,
            improvement_ratio: 0.8,
            max_len: 384,
            max_holdout_blocks: 200,
            log_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub trained_blocks: usize,
    pub holdout_blocks: usize,
    pub skipped_blocks: usize,
    pub initial_holdout_loss: f64,
    pub final_holdout_loss: f64,
}

/// Next-token targets over one rendered block: every transition scores, not
/// just the answer.
fn stream_targets(tokens: &[usize]) -> (Vec<usize>, Vec<bool>) {
    let n = tokens.len();
    let mut targets = vec![0usize; n];
    let mut mask = vec![false; n];
    for t in 0..n.saturating_sub(1) {
        targets[t] = tokens[t + 1];
        mask[t] = true;
    }
    (targets, mask)
}

fn block_tokens(block: &CorpusBlock, max_positions: usize) -> Result<Vec<usize>> {
    let input = PromptedInput {
        soft_prompt_len: 0,
        context_exemplars: &block.context,
        question: &block.question,
        answer: Some(&block.answer),
    };
    Ok(render(&input, max_positions)?.tokens)
}

fn stream_loss_node(
    weights: &LmWeights,
    tape: &mut Tape,
    nodes: &LmNodes,
    tokens: &[usize],
) -> Result<crate::numerics::NodeId> {
    let logits = weights.forward_tokens(tape, nodes, tokens, None)?;
    let (targets, mask) = stream_targets(tokens);
    Ok(tape.cross_entropy(logits, &targets, &mask)?)
}

fn mean_eval_loss(weights: &LmWeights, streams: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    for tokens in streams {
        let mut tape = Tape::new();
        let nodes = weights.register(&mut tape, ThetaMode::Frozen)?;
        let loss = stream_loss_node(weights, &mut tape, &nodes, tokens)?;
        total += tape.value(loss).get(0, 0);
    }
    Ok(total / streams.len() as f64)
}

pub fn pretrain_toy(
    config: &LmConfig,
    pcfg: &PretrainConfig,
    corpus: &[CorpusBlock],
) -> Result<(LmWeights, PretrainReport)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(LmError::BadConfig("pretraining corpus is empty".into()));
    }
    if pcfg.batch == 0 || pcfg.steps == 0 {
        return Err(LmError::BadConfig(
            "pretraining needs positive steps and batch".into(),
        ));
    }
    if !(pcfg.holdout_fraction > 0.0 && pcfg.holdout_fraction < 0.5) {
        return Err(LmError::BadConfig(
            "holdout fraction must sit in (0, 0.5)".into(),
        ));
    }

    let max_len = pcfg.max_len.min(config.max_positions);
    let mut streams = Vec::with_capacity(corpus.len());
    let mut skipped = 0usize;
    for block in corpus {
        match block_tokens(block, max_len) {
            Ok(tokens) => streams.push(tokens),
            Err(LmError::Overflow { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if streams.len() < 2 {
        return Err(LmError::BadConfig(format!(
            "only {} corpus blocks fit in {} positions",
            streams.len(),
            max_len
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed);
    let mut order: Vec<usize> = (0..streams.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let holdout_n = ((streams.len() as f64 * pcfg.holdout_fraction).ceil() as usize)
        .clamp(1, streams.len() - 1)
        .min(pcfg.max_holdout_blocks);
    let holdout: Vec<Vec<usize>> = order[..holdout_n]
        .iter()
        .map(|&i| streams[i].clone())
        .collect();
    let train: Vec<&Vec<usize>> = order[holdout_n..].iter().map(|&i| &streams[i]).collect();

    let mut weights = LmWeights::init(config, pcfg.seed)?;
    let shapes: Vec<(usize, usize)> = weights.matrices().iter().map(|m| m.shape()).collect();
    let mut adam = Adam::new(pcfg.lr, &shapes);

    let initial_holdout_loss = mean_eval_loss(&weights, &holdout)?;

    let mut initial_batch_loss = None;
    let divergence_gate = pcfg.steps / 10;
    for step in 0..pcfg.steps {
        let mut grad_sum: Vec<Matrix> =
            shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        let mut batch_loss = 0.0;
        for _ in 0..pcfg.batch {
            let tokens = train[rng.gen_range(0..train.len())];
            let mut tape = Tape::new();
            let nodes = weights.register(&mut tape, ThetaMode::Trainable)?;
            let loss = stream_loss_node(&weights, &mut tape, &nodes, tokens)?;
            let value = tape.value(loss).get(0, 0);
            if !value.is_finite() {
                return Err(LmError::NonFiniteLoss {
                    context: format!("pretraining step {step}"),
                });
            }
            batch_loss += value;
            tape.backward(loss)?;
            for (slot, id) in nodes.ordered().into_iter().enumerate() {
                if let Some(g) = tape.grad(id) {
                    grad_sum[slot].add_assign(g)?;
                }
            }
        }
        batch_loss /= pcfg.batch as f64;
        let initial = *initial_batch_loss.get_or_insert(batch_loss);
        if step >= divergence_gate && batch_loss > initial {
            return Err(LmError::Diverged {
                step,
                loss: batch_loss,
                initial,
            });
        }

        for g in grad_sum.iter_mut() {
            g.scale_assign(1.0 / pcfg.batch as f64);
        }
        clip_global_norm(&mut grad_sum, 1.0);
        let mut params = weights.matrices_mut();
        adam.step(&mut params, &grad_sum)?;

        if pcfg.log_every > 0 && (step % pcfg.log_every == 0 || step + 1 == pcfg.steps) {
            eprintln!("pretrain step {step}/{}: batch loss {batch_loss:.4}", pcfg.steps);
        }
    }

    let final_holdout_loss = mean_eval_loss(&weights, &holdout)?;
    if !(final_holdout_loss < pcfg.improvement_ratio * initial_holdout_loss) {
        return Err(LmError::InsufficientImprovement {
            initial: initial_holdout_loss,
            final_loss: final_holdout_loss,
            ratio: pcfg.improvement_ratio,
        });
    }

    Ok((
        weights,
        PretrainReport {
            steps: pcfg.steps,
            trained_blocks: train.len(),
            holdout_blocks: holdout.len(),
            skipped_blocks: skipped,
            initial_holdout_loss,
            final_holdout_loss,
        },
    ))
}
