//! Small frozen decoder-only transformer the adapters condition.
//!
//! The model reads an optional soft prompt (m learned vectors standing in
//! front of the token embeddings), optional plain-text exemplars, and a
//! question, then predicts the answer bytes. During adapter training its
//! weights enter the tape as constants, so no gradient ever reaches them.

pub mod tokenizer;

mod model;
mod pretrain;

pub use model::{BlockWeights, LmCheckpoint, LmForward, LmNodes, LmWeights, ThetaMode};
pub use pretrain::{pretrain_toy, PretrainConfig, PretrainReport};

use serde::{Deserialize, Serialize};

use crate::data::Exemplar;
use crate::numerics::NumericsError;
use tokenizer::{ANS, BOS, EOS, SEP};

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error(
        "sequence needs {total} positions (prompt {m} + context {context_tokens} + \
         question {question_tokens} + answer {answer_tokens} + specials {specials}) \
         but the model has {max_positions}"
    )]
    Overflow {
        m: usize,
        context_tokens: usize,
        question_tokens: usize,
        answer_tokens: usize,
        specials: usize,
        total: usize,
        max_positions: usize,
    },
    #[error("nothing to condition on: no soft prompt, no exemplars, empty question")]
    EmptyInput,
    #[error("soft prompt is {got:?} but the model expects {want:?}")]
    SoftPromptShape {
        want: (usize, usize),
        got: (usize, usize),
    },
    #[error("loss went non-finite at {context}")]
    NonFiniteLoss { context: String },
    #[error("pretraining diverged: loss {loss} at step {step} exceeds initial {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error(
        "pretraining fell short: holdout loss went {initial} -> {final_loss}, \
         needed a factor below {ratio}"
    )]
    InsufficientImprovement {
        initial: f64,
        final_loss: f64,
        ratio: f64,
    },
    #[error("checkpoint {path}: {source}")]
    CheckpointIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {source}")]
    CheckpointSerde {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint format {got} is not supported (expected {want})")]
    CheckpointFormat { got: u32, want: u32 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, LmError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_positions: usize,
}

impl LmConfig {
    /// Default model size.
    pub fn standard() -> Self {
        LmConfig {
            layers: 4,
            d_model: 128,
            heads: 4,
            d_ff: 512,
            vocab: tokenizer::VOCAB_SIZE,
            max_positions: 640,
        }
    }

    /// Reduced size for fast end-to-end runs.
    pub fn compact() -> Self {
        LmConfig {
            layers: 2,
            d_model: 64,
            heads: 2,
            d_ff: 256,
            vocab: tokenizer::VOCAB_SIZE,
            max_positions: 640,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0
            || self.d_model == 0
            || self.heads == 0
            || self.d_ff == 0
            || self.vocab == 0
            || self.max_positions == 0
        {
            return Err(LmError::BadConfig("all dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(LmError::BadConfig(format!(
                "hidden width {} is not divisible by head count {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// What to put in front of the model for one sample.
#[derive(Debug, Clone)]
pub struct PromptedInput<'a> {
    /// Soft-prompt length m; 0 means none.
    pub soft_prompt_len: usize,
    /// Exemplars rendered as plain text, in the given order.
    pub context_exemplars: &'a [Exemplar],
    pub question: &'a str,
    /// Training target; scoring and training set it, generation leaves it
    /// empty.
    pub answer: Option<&'a str>,
}

/// Token-count breakdown of one rendered sequence. `total` counts the soft
/// prompt's virtual positions too, so it equals the transformer's sequence
/// length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutBudget {
    pub m: usize,
    pub context_tokens: usize,
    pub question_tokens: usize,
    pub answer_tokens: usize,
    pub specials: usize,
    pub total: usize,
}

/// A rendered sample: real token ids, per-position next-token targets, and
/// the mask selecting answer and end-of-sequence targets. Targets and mask
/// are indexed by transformer position (virtual soft-prompt positions first),
/// so their length is `budget.total`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedInput {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
    pub budget: LayoutBudget,
}

impl RenderedInput {
    /// Positions before the first answer token, i.e. what generation would
    /// process before emitting anything.
    pub fn prefill_len(&self) -> usize {
        self.budget.total - self.budget.answer_tokens - usize::from(self.has_answer())
    }

    fn has_answer(&self) -> bool {
        // EOS is appended exactly when an answer was rendered.
        self.tokens.last() == Some(&EOS)
    }
}

/// Lay out one sample: `[Z_0..Z_{m-1}] [BOS] ex_1 [SEP] .. ex_c [SEP]
/// question [ANS] answer [EOS]`, with positional indices running across
/// virtual and real tokens uniformly. The loss mask selects exactly the
/// positions whose prediction target is an answer byte or EOS.
pub fn render(input: &PromptedInput<'_>, max_positions: usize) -> Result<RenderedInput> {
    if input.soft_prompt_len == 0 && input.context_exemplars.is_empty() && input.question.is_empty()
    {
        return Err(LmError::EmptyInput);
    }

    let m = input.soft_prompt_len;
    let mut tokens = vec![BOS];
    let mut specials = 1;
    let mut context_tokens = 0;
    for ex in input.context_exemplars {
        let text = tokenizer::exemplar_text(&ex.question, &ex.answer);
        let ids = tokenizer::encode_text(&text);
        context_tokens += ids.len();
        tokens.extend(ids);
        tokens.push(SEP);
        specials += 1;
    }
    let question_ids = tokenizer::encode_text(&tokenizer::question_text(input.question));
    let question_tokens = question_ids.len();
    tokens.extend(question_ids);
    tokens.push(ANS);
    specials += 1;

    let answer_start = tokens.len();
    let mut answer_tokens = 0;
    if let Some(answer) = input.answer {
        let ids = tokenizer::encode_text(answer);
        answer_tokens = ids.len();
        tokens.extend(ids);
        tokens.push(EOS);
        specials += 1;
    }

    let total = m + tokens.len();
    let budget = LayoutBudget {
        m,
        context_tokens,
        question_tokens,
        answer_tokens,
        specials,
        total,
    };
    if total > max_positions {
        return Err(LmError::Overflow {
            m,
            context_tokens,
            question_tokens,
            answer_tokens,
            specials,
            total,
            max_positions,
        });
    }

    // Position t predicts the token at t+1; real token j sits at position
    // m + j. Only answer bytes and the closing EOS are scored.
    let mut targets = vec![0usize; total];
    let mut loss_mask = vec![false; total];
    for (j, &tok) in tokens.iter().enumerate().skip(1) {
        let predicting_position = m + j - 1;
        targets[predicting_position] = tok;
        loss_mask[predicting_position] = input.answer.is_some() && j >= answer_start;
    }

    Ok(RenderedInput {
        tokens,
        targets,
        loss_mask,
        budget,
    })
}
