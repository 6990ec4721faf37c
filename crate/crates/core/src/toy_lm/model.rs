//! Weights, forward pass, scoring, and greedy decoding.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tokenizer::{EOS, VOCAB_SIZE};
use super::{render, LmConfig, LmError, PromptedInput, RenderedInput, Result};
use crate::numerics::{random_normal, Matrix, NodeId, Tape};

const INIT_STD: f64 = 0.02;
const MASKED_SCORE: f64 = -1e30;
pub const LM_CHECKPOINT_FORMAT: u32 = 1;

/// One pre-norm transformer block: attention with output projection, then a
/// two-layer GELU feed-forward, each behind its own layer norm and residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmWeights {
    pub config: LmConfig,
    pub tok_embed: Matrix,
    pub pos_embed: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub final_gain: Matrix,
    pub final_bias: Matrix,
    pub unembed: Matrix,
}

/// Whether the model's weights take gradients on a tape. Adapter training
/// always uses `Frozen`: the weights enter the tape as constants, which the
/// backward sweep never touches, so there is no gradient path into them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaMode {
    Frozen,
    Trainable,
}

/// Tape node ids for one registration of the weights.
pub struct LmNodes {
    pub tok_embed: NodeId,
    pub pos_embed: NodeId,
    pub blocks: Vec<[NodeId; 12]>,
    pub final_gain: NodeId,
    pub final_bias: NodeId,
    pub unembed: NodeId,
}

impl LmNodes {
    /// All nodes in the same fixed order as `LmWeights::matrices`.
    pub fn ordered(&self) -> Vec<NodeId> {
        let mut out = vec![self.tok_embed, self.pos_embed];
        for b in &self.blocks {
            out.extend_from_slice(b);
        }
        out.push(self.final_gain);
        out.push(self.final_bias);
        out.push(self.unembed);
        out
    }
}

pub struct LmForward {
    pub logits: NodeId,
    pub loss: Option<NodeId>,
}

impl LmWeights {
    pub fn init(config: &LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut norm = |r: usize, c: usize| random_normal(r, c, INIT_STD, &mut rng);
        let blocks = (0..config.layers)
            .map(|_| BlockWeights {
                ln1_gain: Matrix::from_vec(1, d, vec![1.0; d]).expect("sized"),
                ln1_bias: Matrix::zeros(1, d),
                wq: norm(d, d),
                wk: norm(d, d),
                wv: norm(d, d),
                wo: norm(d, d),
                ln2_gain: Matrix::from_vec(1, d, vec![1.0; d]).expect("sized"),
                ln2_bias: Matrix::zeros(1, d),
                w1: norm(d, config.d_ff),
                b1: Matrix::zeros(1, config.d_ff),
                w2: norm(config.d_ff, d),
                b2: Matrix::zeros(1, d),
            })
            .collect::<Vec<_>>();
        Ok(LmWeights {
            config: *config,
            tok_embed: norm(config.vocab, d),
            pos_embed: norm(config.max_positions, d),
            blocks,
            final_gain: Matrix::from_vec(1, d, vec![1.0; d]).expect("sized"),
            final_bias: Matrix::zeros(1, d),
            unembed: norm(d, config.vocab),
        })
    }

    /// Matrices in a fixed order shared by checksums, optimizer slots, and
    /// `LmNodes::ordered`.
    pub fn matrices(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = vec![&self.tok_embed, &self.pos_embed];
        for b in &self.blocks {
            out.extend([
                &b.ln1_gain,
                &b.ln1_bias,
                &b.wq,
                &b.wk,
                &b.wv,
                &b.wo,
                &b.ln2_gain,
                &b.ln2_bias,
                &b.w1,
                &b.b1,
                &b.w2,
                &b.b2,
            ]);
        }
        out.extend([&self.final_gain, &self.final_bias, &self.unembed]);
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.tok_embed, &mut self.pos_embed];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        out.extend([&mut self.final_gain, &mut self.final_bias, &mut self.unembed]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.matrices().iter().map(|m| m.data().len()).sum()
    }

    /// Content hash over dimensions and raw f64 bytes; the frozen-weights
    /// invariant is "this string never changes during adapter training".
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for m in self.matrices() {
            hasher.update((m.shape().0 as u64).to_le_bytes());
            hasher.update((m.shape().1 as u64).to_le_bytes());
            for x in m.data() {
                hasher.update(x.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn register(&self, tape: &mut Tape, mode: ThetaMode) -> Result<LmNodes> {
        let mut push = |m: &Matrix| -> Result<NodeId> {
            Ok(match mode {
                ThetaMode::Frozen => tape.constant(m.clone()),
                ThetaMode::Trainable => tape.param(m)?,
            })
        };
        let tok_embed = push(&self.tok_embed)?;
        let pos_embed = push(&self.pos_embed)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            blocks.push([
                push(&b.ln1_gain)?,
                push(&b.ln1_bias)?,
                push(&b.wq)?,
                push(&b.wk)?,
                push(&b.wv)?,
                push(&b.wo)?,
                push(&b.ln2_gain)?,
                push(&b.ln2_bias)?,
                push(&b.w1)?,
                push(&b.b1)?,
                push(&b.w2)?,
                push(&b.b2)?,
            ]);
        }
        Ok(LmNodes {
            tok_embed,
            pos_embed,
            blocks,
            final_gain: push(&self.final_gain)?,
            final_bias: push(&self.final_bias)?,
            unembed: push(&self.unembed)?,
        })
    }

    /// Token-level forward pass over `tokens` with `soft_prompt` rows (if
    /// any) occupying the first positions. Returns the logits node, one row
    /// per position.
    pub fn forward_tokens(
        &self,
        tape: &mut Tape,
        nodes: &LmNodes,
        tokens: &[usize],
        soft_prompt: Option<NodeId>,
    ) -> Result<NodeId> {
        let d = self.config.d_model;
        let m = match soft_prompt {
            Some(z) => {
                let shape = tape.value(z).shape();
                if shape.1 != d || shape.0 == 0 {
                    return Err(LmError::SoftPromptShape {
                        want: (shape.0.max(1), d),
                        got: shape,
                    });
                }
                shape.0
            }
            None => 0,
        };
        let total = m + tokens.len();
        if total > self.config.max_positions {
            return Err(LmError::Overflow {
                m,
                context_tokens: 0,
                question_tokens: tokens.len(),
                answer_tokens: 0,
                specials: 0,
                total,
                max_positions: self.config.max_positions,
            });
        }

        let tok_rows = tape.row_select(nodes.tok_embed, tokens)?;
        let seq = match soft_prompt {
            Some(z) => tape.concat_rows(&[z, tok_rows])?,
            None => tok_rows,
        };
        let indices: Vec<usize> = (0..total).collect();
        let pos_rows = tape.row_select(nodes.pos_embed, &indices)?;
        let mut x = tape.add(seq, pos_rows)?;

        // Additive causal mask: position t sees positions 0..=t.
        let mut mask = Matrix::zeros(total, total);
        for i in 0..total {
            for j in (i + 1)..total {
                mask.set(i, j, MASKED_SCORE);
            }
        }
        let mask = tape.constant(mask);

        let dh = d / self.config.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for b in &nodes.blocks {
            let [ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, w1, b1, w2, b2] = *b;
            let h1 = tape.layernorm(x, ln1_gain, ln1_bias)?;
            let q = tape.matmul(h1, wq)?;
            let k = tape.matmul(h1, wk)?;
            let v = tape.matmul(h1, wv)?;
            let mut heads = Vec::with_capacity(self.config.heads);
            for h in 0..self.config.heads {
                let qi = tape.slice_cols(q, h * dh, dh)?;
                let ki = tape.slice_cols(k, h * dh, dh)?;
                let vi = tape.slice_cols(v, h * dh, dh)?;
                let scores = tape.matmul_nt(qi, ki)?;
                let scaled = tape.scale(scores, scale)?;
                let masked = tape.add(scaled, mask)?;
                let weights = tape.softmax_rows(masked)?;
                heads.push(tape.matmul(weights, vi)?);
            }
            let merged = tape.concat_cols(&heads)?;
            let attn_out = tape.matmul(merged, wo)?;
            x = tape.add(x, attn_out)?;

            let h2 = tape.layernorm(x, ln2_gain, ln2_bias)?;
            let f = tape.matmul(h2, w1)?;
            let f = tape.add_bias(f, b1)?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, w2)?;
            let f = tape.add_bias(f, b2)?;
            x = tape.add(x, f)?;
        }

        let xn = tape.layernorm(x, nodes.final_gain, nodes.final_bias)?;
        Ok(tape.matmul(xn, nodes.unembed)?)
    }

    /// Forward pass over a rendered sample, with the mean cross-entropy over
    /// masked positions when the sample carries an answer.
    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &LmNodes,
        rendered: &RenderedInput,
        soft_prompt: Option<NodeId>,
    ) -> Result<LmForward> {
        match (rendered.budget.m, soft_prompt) {
            (0, None) => {}
            (m, Some(z)) => {
                let shape = tape.value(z).shape();
                if shape != (m, self.config.d_model) {
                    return Err(LmError::SoftPromptShape {
                        want: (m, self.config.d_model),
                        got: shape,
                    });
                }
            }
            (m, None) => {
                return Err(LmError::SoftPromptShape {
                    want: (m, self.config.d_model),
                    got: (0, 0),
                })
            }
        }
        let logits = self.forward_tokens(tape, nodes, &rendered.tokens, soft_prompt)?;
        let loss = if rendered.loss_mask.iter().any(|&b| b) {
            let node = tape.cross_entropy(logits, &rendered.targets, &rendered.loss_mask)?;
            let value = tape.value(node).get(0, 0);
            if !value.is_finite() {
                return Err(LmError::NonFiniteLoss {
                    context: format!("forward over {} positions", rendered.budget.total),
                });
            }
            Some(node)
        } else {
            None
        };
        Ok(LmForward { logits, loss })
    }

    /// Logits on a throwaway tape with frozen weights.
    pub fn eval_logits(
        &self,
        rendered: &RenderedInput,
        soft_prompt: Option<&Matrix>,
    ) -> Result<Matrix> {
        let mut tape = Tape::new();
        let nodes = self.register(&mut tape, ThetaMode::Frozen)?;
        let z = soft_prompt.map(|m| tape.constant(m.clone()));
        let fwd = self.forward(&mut tape, &nodes, rendered, z)?;
        Ok(tape.value(fwd.logits).clone())
    }

    /// Mean masked cross-entropy on a throwaway tape.
    pub fn eval_loss(
        &self,
        rendered: &RenderedInput,
        soft_prompt: Option<&Matrix>,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let nodes = self.register(&mut tape, ThetaMode::Frozen)?;
        let z = soft_prompt.map(|m| tape.constant(m.clone()));
        let fwd = self.forward(&mut tape, &nodes, rendered, z)?;
        let loss = fwd.loss.ok_or(LmError::BadConfig(
            "loss requested for a sample with no answer".into(),
        ))?;
        Ok(tape.value(loss).get(0, 0))
    }

    /// Total log-probability of `answer` (its bytes plus the closing EOS)
    /// given the prompt. Restricted decoding compares these sums across the
    /// candidate answers.
    pub fn score_answer(
        &self,
        input: &PromptedInput<'_>,
        soft_prompt: Option<&Matrix>,
        answer: &str,
    ) -> Result<f64> {
        let scored = PromptedInput {
            answer: Some(answer),
            ..input.clone()
        };
        let rendered = render(&scored, self.config.max_positions)?;
        let logits = self.eval_logits(&rendered, soft_prompt)?;
        let mut total = 0.0;
        for t in 0..rendered.budget.total {
            if !rendered.loss_mask[t] {
                continue;
            }
            let row = logits.row(t);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_z = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            total += row[rendered.targets[t]] - log_z;
        }
        Ok(total)
    }

    /// Greedy decoding: repeatedly append the argmax token until EOS or
    /// `max_new` tokens. A prefix already ending in EOS generates nothing.
    /// Returns the generated bytes decoded as text (EOS excluded).
    pub fn generate(
        &self,
        input: &PromptedInput<'_>,
        soft_prompt: Option<&Matrix>,
        max_new: usize,
    ) -> Result<String> {
        let rendered = render(input, self.config.max_positions)?;
        let m = rendered.budget.m;
        let want = (m, self.config.d_model);
        match soft_prompt {
            None if m == 0 => {}
            Some(mat) if mat.shape() == want => {}
            other => {
                return Err(LmError::SoftPromptShape {
                    want,
                    got: other.map_or((0, 0), |mat| mat.shape()),
                })
            }
        }
        if rendered.tokens.last() == Some(&EOS) {
            return Ok(String::new());
        }
        let mut tokens = rendered.tokens.clone();
        let mut generated = Vec::new();
        while generated.len() < max_new {
            if m + tokens.len() >= self.config.max_positions {
                break;
            }
            let mut tape = Tape::new();
            let nodes = self.register(&mut tape, ThetaMode::Frozen)?;
            let z = soft_prompt.map(|mat| tape.constant(mat.clone()));
            let logits = self.forward_tokens(&mut tape, &nodes, &tokens, z)?;
            let last = tape.value(logits).row(m + tokens.len() - 1).to_vec();
            let mut best = 0;
            for (i, &x) in last.iter().enumerate() {
                if x > last[best] {
                    best = i;
                }
            }
            if best == EOS {
                break;
            }
            tokens.push(best);
            generated.push(best);
        }
        Ok(super::tokenizer::decode_text(&generated))
    }

    /// Shape consistency against the stored config, plus finiteness.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let d = self.config.d_model;
        let checks: Vec<((usize, usize), (usize, usize), &str)> = {
            let mut out = vec![
                (self.tok_embed.shape(), (self.config.vocab, d), "tok_embed"),
                (
                    self.pos_embed.shape(),
                    (self.config.max_positions, d),
                    "pos_embed",
                ),
                (self.final_gain.shape(), (1, d), "final_gain"),
                (self.final_bias.shape(), (1, d), "final_bias"),
                (self.unembed.shape(), (d, self.config.vocab), "unembed"),
            ];
            for b in &self.blocks {
                out.extend([
                    (b.ln1_gain.shape(), (1, d), "ln1_gain"),
                    (b.ln1_bias.shape(), (1, d), "ln1_bias"),
                    (b.wq.shape(), (d, d), "wq"),
                    (b.wk.shape(), (d, d), "wk"),
                    (b.wv.shape(), (d, d), "wv"),
                    (b.wo.shape(), (d, d), "wo"),
                    (b.ln2_gain.shape(), (1, d), "ln2_gain"),
                    (b.ln2_bias.shape(), (1, d), "ln2_bias"),
                    (b.w1.shape(), (d, self.config.d_ff), "w1"),
                    (b.b1.shape(), (1, self.config.d_ff), "b1"),
                    (b.w2.shape(), (self.config.d_ff, d), "w2"),
                    (b.b2.shape(), (1, d), "b2"),
                ]);
            }
            out
        };
        for (got, want, name) in checks {
            if got != want {
                return Err(LmError::BadConfig(format!(
                    "{name} is {got:?}, expected {want:?}"
                )));
            }
        }
        if self.blocks.len() != self.config.layers {
            return Err(LmError::BadConfig(format!(
                "{} blocks for {} configured layers",
                self.blocks.len(),
                self.config.layers
            )));
        }
        for m in self.matrices() {
            m.validate().map_err(LmError::Numerics)?;
        }
        if self.config.vocab != VOCAB_SIZE {
            return Err(LmError::BadConfig(format!(
                "vocab {} does not match the tokenizer's {VOCAB_SIZE}",
                self.config.vocab
            )));
        }
        Ok(())
    }
}

/// Same container discipline as adapter checkpoints: a format tag wrapping
/// the full weight set as JSON.
#[derive(Debug, Serialize, Deserialize)]
pub struct LmCheckpoint {
    pub format: u32,
    pub weights: LmWeights,
}

impl LmCheckpoint {
    pub fn save(weights: &LmWeights, path: &Path) -> Result<()> {
        let snapshot = LmCheckpoint {
            format: LM_CHECKPOINT_FORMAT,
            weights: weights.clone(),
        };
        let json = serde_json::to_string(&snapshot).map_err(|source| LmError::CheckpointSerde {
            path: path.display().to_string(),
            source,
        })?;
        std::fs::write(path, json).map_err(|source| LmError::CheckpointIo {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<LmWeights> {
        let raw = std::fs::read_to_string(path).map_err(|source| LmError::CheckpointIo {
            path: path.display().to_string(),
            source,
        })?;
        let snapshot: LmCheckpoint =
            serde_json::from_str(&raw).map_err(|source| LmError::CheckpointSerde {
                path: path.display().to_string(),
                source,
            })?;
        if snapshot.format != LM_CHECKPOINT_FORMAT {
            return Err(LmError::CheckpointFormat {
                got: snapshot.format,
                want: LM_CHECKPOINT_FORMAT,
            });
        }
        snapshot.weights.validate()?;
        Ok(snapshot.weights)
    }
}
