//! Adapters that map retrieved-exemplar embeddings to soft-prompt rows.
//!
//! Every adapter produces a small matrix `Z` (m rows, one per soft-prompt
//! vector, each of LM hidden width `d`) from fixed input embeddings of width
//! `d_embed`. The multi-head encoder attends over per-exemplar embeddings and
//! is invariant to their order; the affine projectors and the prompt table are
//! the baselines it is compared against.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::DenseEmbedding;
use crate::numerics::{random_normal, Matrix, NodeId, NumericsError, Tape};

/// Weight initialization scale shared by every adapter.
pub const INIT_STD: f64 = 0.02;

/// On-disk checkpoint layout version.
pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("bad adapter config: {0}")]
    BadConfig(String),
    #[error("{method} needs {what}")]
    MissingInput {
        method: &'static str,
        what: &'static str,
    },
    #[error("{method} takes {want} context embeddings, got {got}")]
    ContextCount {
        method: &'static str,
        want: &'static str,
        got: usize,
    },
    #[error("embedding width {got} does not match adapter width {want}")]
    EmbedDim { want: usize, got: usize },
    #[error("checkpoint format {got} is not supported (expected {want})")]
    CheckpointFormat { got: u32, want: u32 },
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
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, EncoderError>;

// ── methods ──

/// Every evaluable conditioning method, including the two that carry no
/// trainable adapter (plain text context and no context at all).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MhaRag,
    Xrag,
    XragK,
    Pt,
    Idpg,
    Rag,
    ZeroShot,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::MhaRag,
        Method::Xrag,
        Method::XragK,
        Method::Pt,
        Method::Idpg,
        Method::Rag,
        Method::ZeroShot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::MhaRag => "mha_rag",
            Method::Xrag => "xrag",
            Method::XragK => "xrag_k",
            Method::Pt => "pt",
            Method::Idpg => "idpg",
            Method::Rag => "rag",
            Method::ZeroShot => "zero_shot",
        }
    }

    /// Whether the method has trainable adapter weights.
    pub fn has_adapter(self) -> bool {
        !matches!(self, Method::Rag | Method::ZeroShot)
    }

    /// Whether evaluation retrieves exemplars at all. The free prompt table
    /// and the query-conditioned generator ignore exemplars by construction.
    pub fn uses_retrieval(self) -> bool {
        !matches!(self, Method::Pt | Method::Idpg | Method::ZeroShot)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = EncoderError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                EncoderError::BadConfig(format!(
                    "unknown method {s:?} (expected one of: mha_rag, xrag, xrag_k, pt, idpg, rag, zero_shot)"
                ))
            })
    }
}

/// Ratio of plain-text context tokens to soft-prompt vectors. Methods with no
/// soft prompt (m = 0) have no compression ratio.
pub fn compression_ratio(context_tokens: usize, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(EncoderError::BadConfig(
            "compression ratio is undefined for an empty soft prompt".into(),
        ));
    }
    Ok(context_tokens as f64 / m as f64)
}

// ── parameter containers ──

/// One attention head: all three maps take a `d_embed` row vector to a
/// `d_model` row vector, stored input-major so `row · w` applies them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MhaHead {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MhaRagParams {
    pub heads: Vec<MhaHead>,
}

/// Shared by the single-vector and per-exemplar affine projectors; the two
/// differ only in what rows they are applied to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub w: Matrix,
    pub b: Matrix,
}

/// Free prompt table; ignores the input entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtParams {
    pub table: Matrix,
}

/// Question-conditioned prompt generator: one affine map whose output is cut
/// into `m` rows of width `d_model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdpgParams {
    pub w: Matrix,
    pub b: Matrix,
    pub m: usize,
    pub d_model: usize,
}

/// Trainable weights for one method, tagged so checkpoints are
/// self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum AdapterParams {
    MhaRag(MhaRagParams),
    Xrag(AffineParams),
    XragK(AffineParams),
    Pt(PtParams),
    Idpg(IdpgParams),
}

/// Everything needed to build fresh adapter weights.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub method: Method,
    pub d_model: usize,
    pub d_embed: usize,
    /// Head count for the multi-head encoder; ignored elsewhere.
    pub heads: usize,
    /// Soft-prompt length for the table and generator baselines; ignored
    /// elsewhere.
    pub m: usize,
    pub seed: u64,
}

impl AdapterParams {
    pub fn init(spec: &AdapterSpec) -> Result<Self> {
        if spec.d_model == 0 || spec.d_embed == 0 {
            return Err(EncoderError::BadConfig(
                "adapter dimensions must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        match spec.method {
            Method::MhaRag => {
                if spec.heads == 0 {
                    return Err(EncoderError::BadConfig(
                        "multi-head encoder needs at least one head".into(),
                    ));
                }
                let heads = (0..spec.heads)
                    .map(|_| MhaHead {
                        wq: random_normal(spec.d_embed, spec.d_model, INIT_STD, &mut rng),
                        wk: random_normal(spec.d_embed, spec.d_model, INIT_STD, &mut rng),
                        wv: random_normal(spec.d_embed, spec.d_model, INIT_STD, &mut rng),
                    })
                    .collect();
                Ok(AdapterParams::MhaRag(MhaRagParams { heads }))
            }
            Method::Xrag | Method::XragK => {
                let params = AffineParams {
                    w: random_normal(spec.d_embed, spec.d_model, INIT_STD, &mut rng),
                    b: Matrix::zeros(1, spec.d_model),
                };
                Ok(if spec.method == Method::Xrag {
                    AdapterParams::Xrag(params)
                } else {
                    AdapterParams::XragK(params)
                })
            }
            Method::Pt => {
                if spec.m == 0 {
                    return Err(EncoderError::BadConfig(
                        "prompt table needs at least one row".into(),
                    ));
                }
                Ok(AdapterParams::Pt(PtParams {
                    table: random_normal(spec.m, spec.d_model, INIT_STD, &mut rng),
                }))
            }
            Method::Idpg => {
                if spec.m == 0 {
                    return Err(EncoderError::BadConfig(
                        "prompt generator needs at least one output row".into(),
                    ));
                }
                Ok(AdapterParams::Idpg(IdpgParams {
                    w: random_normal(spec.d_embed, spec.m * spec.d_model, INIT_STD, &mut rng),
                    b: Matrix::zeros(1, spec.m * spec.d_model),
                    m: spec.m,
                    d_model: spec.d_model,
                }))
            }
            Method::Rag | Method::ZeroShot => Err(EncoderError::BadConfig(format!(
                "{} has no trainable adapter",
                spec.method
            ))),
        }
    }

    pub fn method(&self) -> Method {
        match self {
            AdapterParams::MhaRag(_) => Method::MhaRag,
            AdapterParams::Xrag(_) => Method::Xrag,
            AdapterParams::XragK(_) => Method::XragK,
            AdapterParams::Pt(_) => Method::Pt,
            AdapterParams::Idpg(_) => Method::Idpg,
        }
    }

    /// LM hidden width of the soft-prompt rows this adapter emits.
    pub fn d_model(&self) -> usize {
        match self {
            AdapterParams::MhaRag(p) => p.heads[0].wq.shape().1,
            AdapterParams::Xrag(p) | AdapterParams::XragK(p) => p.w.shape().1,
            AdapterParams::Pt(p) => p.table.shape().1,
            AdapterParams::Idpg(p) => p.d_model,
        }
    }

    /// Input embedding width, or `None` for the table (which reads nothing).
    pub fn d_embed(&self) -> Option<usize> {
        match self {
            AdapterParams::MhaRag(p) => Some(p.heads[0].wq.shape().0),
            AdapterParams::Xrag(p) | AdapterParams::XragK(p) => Some(p.w.shape().0),
            AdapterParams::Pt(_) => None,
            AdapterParams::Idpg(p) => Some(p.w.shape().0),
        }
    }

    /// Soft-prompt rows produced when `k` exemplars are retrieved.
    pub fn soft_prompt_len(&self, k: usize) -> usize {
        match self {
            AdapterParams::MhaRag(p) => p.heads.len(),
            AdapterParams::Xrag(_) => 1,
            AdapterParams::XragK(_) => k,
            AdapterParams::Pt(p) => p.table.shape().0,
            AdapterParams::Idpg(p) => p.m,
        }
    }

    /// Matrices in the fixed order used for optimizer slots and gradients.
    pub fn matrices(&self) -> Vec<&Matrix> {
        match self {
            AdapterParams::MhaRag(p) => p
                .heads
                .iter()
                .flat_map(|h| [&h.wq, &h.wk, &h.wv])
                .collect(),
            AdapterParams::Xrag(p) | AdapterParams::XragK(p) => vec![&p.w, &p.b],
            AdapterParams::Pt(p) => vec![&p.table],
            AdapterParams::Idpg(p) => vec![&p.w, &p.b],
        }
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            AdapterParams::MhaRag(p) => p
                .heads
                .iter_mut()
                .flat_map(|h| [&mut h.wq, &mut h.wk, &mut h.wv])
                .collect(),
            AdapterParams::Xrag(p) | AdapterParams::XragK(p) => vec![&mut p.w, &mut p.b],
            AdapterParams::Pt(p) => vec![&mut p.table],
            AdapterParams::Idpg(p) => vec![&mut p.w, &mut p.b],
        }
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.matrices().iter().map(|m| m.shape()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.matrices().iter().map(|m| m.data().len()).sum()
    }

    /// Push every matrix onto `tape` as a trainable leaf, in `matrices` order.
    pub fn register(&self, tape: &mut Tape) -> Result<Vec<NodeId>> {
        self.matrices()
            .into_iter()
            .map(|m| Ok(tape.param(m)?))
            .collect()
    }

    /// Shape and finiteness checks for freshly deserialized weights.
    pub fn validate(&self) -> Result<()> {
        for m in self.matrices() {
            m.validate().map_err(EncoderError::Numerics)?;
        }
        match self {
            AdapterParams::MhaRag(p) => {
                if p.heads.is_empty() {
                    return Err(EncoderError::BadConfig("encoder has no heads".into()));
                }
                let shape = p.heads[0].wq.shape();
                for h in &p.heads {
                    if h.wq.shape() != shape || h.wk.shape() != shape || h.wv.shape() != shape {
                        return Err(EncoderError::BadConfig(
                            "attention head shapes disagree".into(),
                        ));
                    }
                }
            }
            AdapterParams::Xrag(p) | AdapterParams::XragK(p) => {
                if p.b.shape() != (1, p.w.shape().1) {
                    return Err(EncoderError::BadConfig(
                        "projector bias width does not match weight output width".into(),
                    ));
                }
            }
            AdapterParams::Pt(p) => {
                if p.table.shape().0 == 0 {
                    return Err(EncoderError::BadConfig("prompt table is empty".into()));
                }
            }
            AdapterParams::Idpg(p) => {
                if p.w.shape().1 != p.m * p.d_model {
                    return Err(EncoderError::BadConfig(format!(
                        "generator output width {} is not m ({}) x d_model ({})",
                        p.w.shape().1,
                        p.m,
                        p.d_model
                    )));
                }
                if p.b.shape() != (1, p.w.shape().1) {
                    return Err(EncoderError::BadConfig(
                        "generator bias width does not match weight output width".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

// ── encoding on a tape ──

/// Inputs each adapter may read. The multi-head encoder wants the question
/// embedding plus one embedding per exemplar; the single-vector projector
/// wants exactly one joint embedding in `contexts`; the per-exemplar
/// projector wants one per exemplar; the generator wants only the question.
pub struct EncoderInputs<'a> {
    pub query: Option<&'a DenseEmbedding>,
    pub contexts: &'a [DenseEmbedding],
}

fn embedding_row(tape: &mut Tape, e: &DenseEmbedding) -> NodeId {
    let m = Matrix::from_vec(1, e.dim(), e.values().to_vec()).expect("embedding length matches dim");
    tape.constant(m)
}

fn stack_rows(tape: &mut Tape, want_dim: usize, embeddings: &[DenseEmbedding]) -> Result<NodeId> {
    let mut data = Vec::with_capacity(embeddings.len() * want_dim);
    for e in embeddings {
        if e.dim() != want_dim {
            return Err(EncoderError::EmbedDim {
                want: want_dim,
                got: e.dim(),
            });
        }
        data.extend_from_slice(e.values());
    }
    let m = Matrix::from_vec(embeddings.len(), want_dim, data)?;
    Ok(tape.constant(m))
}

/// One head's read of the context set: softmax over scaled query-key scores,
/// then the weighted value sum. Scores are scaled by the LM hidden width, not
/// the embedding width.
fn head_readout(
    tape: &mut Tape,
    head: &[NodeId; 3],
    e_x: NodeId,
    e_ctx: NodeId,
    d_model: usize,
) -> Result<NodeId> {
    let q = tape.matmul(e_x, head[0])?;
    let k = tape.matmul(e_ctx, head[1])?;
    let v = tape.matmul(e_ctx, head[2])?;
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(scores, 1.0 / (d_model as f64).sqrt())?;
    let weights = tape.softmax_rows(scaled)?;
    Ok(tape.matmul(weights, v)?)
}

impl AdapterParams {
    /// Build the soft-prompt rows on `tape` from registered parameter nodes
    /// (`nodes`, in `matrices` order) and the given inputs. Returns an
    /// m x d_model node.
    pub fn encode(
        &self,
        tape: &mut Tape,
        nodes: &[NodeId],
        inputs: &EncoderInputs<'_>,
    ) -> Result<NodeId> {
        let want = self.matrices().len();
        if nodes.len() != want {
            return Err(EncoderError::BadConfig(format!(
                "expected {want} parameter nodes, got {}",
                nodes.len()
            )));
        }
        match self {
            AdapterParams::MhaRag(p) => {
                let query = inputs.query.ok_or(EncoderError::MissingInput {
                    method: "mha_rag",
                    what: "a question embedding",
                })?;
                if inputs.contexts.is_empty() {
                    return Err(EncoderError::ContextCount {
                        method: "mha_rag",
                        want: "at least 1",
                        got: 0,
                    });
                }
                let d_embed = p.heads[0].wq.shape().0;
                let d_model = p.heads[0].wq.shape().1;
                if query.dim() != d_embed {
                    return Err(EncoderError::EmbedDim {
                        want: d_embed,
                        got: query.dim(),
                    });
                }
                let e_x = embedding_row(tape, query);
                let e_ctx = stack_rows(tape, d_embed, inputs.contexts)?;
                let mut rows = Vec::with_capacity(p.heads.len());
                for h in 0..p.heads.len() {
                    let head = [nodes[3 * h], nodes[3 * h + 1], nodes[3 * h + 2]];
                    rows.push(head_readout(tape, &head, e_x, e_ctx, d_model)?);
                }
                Ok(tape.concat_rows(&rows)?)
            }
            AdapterParams::Xrag(p) => {
                if inputs.contexts.len() != 1 {
                    return Err(EncoderError::ContextCount {
                        method: "xrag",
                        want: "exactly 1 (the joint text)",
                        got: inputs.contexts.len(),
                    });
                }
                let e = stack_rows(tape, p.w.shape().0, inputs.contexts)?;
                let projected = tape.matmul(e, nodes[0])?;
                Ok(tape.add_bias(projected, nodes[1])?)
            }
            AdapterParams::XragK(p) => {
                if inputs.contexts.is_empty() {
                    return Err(EncoderError::ContextCount {
                        method: "xrag_k",
                        want: "at least 1",
                        got: 0,
                    });
                }
                let e = stack_rows(tape, p.w.shape().0, inputs.contexts)?;
                let projected = tape.matmul(e, nodes[0])?;
                Ok(tape.add_bias(projected, nodes[1])?)
            }
            AdapterParams::Pt(_) => Ok(nodes[0]),
            AdapterParams::Idpg(p) => {
                let query = inputs.query.ok_or(EncoderError::MissingInput {
                    method: "idpg",
                    what: "a question embedding",
                })?;
                if query.dim() != p.w.shape().0 {
                    return Err(EncoderError::EmbedDim {
                        want: p.w.shape().0,
                        got: query.dim(),
                    });
                }
                let e_x = embedding_row(tape, query);
                let projected = tape.matmul(e_x, nodes[0])?;
                let flat = tape.add_bias(projected, nodes[1])?;
                let mut rows = Vec::with_capacity(p.m);
                for i in 0..p.m {
                    rows.push(tape.slice_cols(flat, i * p.d_model, p.d_model)?);
                }
                Ok(tape.concat_rows(&rows)?)
            }
        }
    }

    /// Encode on a throwaway tape and return the soft-prompt matrix. For
    /// evaluation paths that never call backward.
    pub fn encode_value(&self, inputs: &EncoderInputs<'_>) -> Result<Matrix> {
        let mut tape = Tape::new();
        let nodes = self.register(&mut tape)?;
        let z = self.encode(&mut tape, &nodes, inputs)?;
        Ok(tape.value(z).clone())
    }
}

// ── checkpoints ──

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub params: AdapterParams,
}

impl Checkpoint {
    pub fn save(params: &AdapterParams, path: &Path) -> Result<()> {
        let snapshot = Checkpoint {
            format: CHECKPOINT_FORMAT,
            params: params.clone(),
        };
        let json = serde_json::to_string(&snapshot).map_err(|source| {
            EncoderError::CheckpointSerde {
                path: path.display().to_string(),
                source,
            }
        })?;
        std::fs::write(path, json).map_err(|source| EncoderError::CheckpointIo {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<AdapterParams> {
        let raw = std::fs::read_to_string(path).map_err(|source| EncoderError::CheckpointIo {
            path: path.display().to_string(),
            source,
        })?;
        let snapshot: Checkpoint =
            serde_json::from_str(&raw).map_err(|source| EncoderError::CheckpointSerde {
                path: path.display().to_string(),
                source,
            })?;
        if snapshot.format != CHECKPOINT_FORMAT {
            return Err(EncoderError::CheckpointFormat {
                got: snapshot.format,
                want: CHECKPOINT_FORMAT,
            });
        }
        snapshot.params.validate()?;
        Ok(snapshot.params)
    }
}
