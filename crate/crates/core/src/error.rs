//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: shape {shape:?} implies {expected} elements, data has {actual}")]
    BadTensorData {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("token id {id} at position {position} is out of range for vocab size {vocab}")]
    TokenOutOfRange {
        position: usize,
        id: u32,
        vocab: usize,
    },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("layer index {index} out of range for {n_layers} layers")]
    LayerOutOfRange { index: usize, n_layers: usize },

    #[error("weight-average insertion after block {slot} has no next block (n_layers = {n_layers})")]
    WeightAverageAtLastSlot { slot: usize, n_layers: usize },

    #[error("zero-norm {operand} operand in angular distance")]
    ZeroNormVector { operand: &'static str },

    #[error("plan notation error at byte {pos}: {msg}\n  {text}\n  {caret}", caret = caret(*.pos))]
    PlanParse {
        pos: usize,
        text: String,
        msg: String,
    },

    #[error("plan arithmetic inconsistent: {msg}")]
    PlanArithmetic { msg: String },

    #[error("invalid plan: {reason}")]
    PlanInvalid { reason: String },

    #[error("non-finite gradient in tensor `{tensor}`")]
    NonFiniteGradient { tensor: String },

    #[error("non-finite value in finite-difference probe at tensor {tensor}, coordinate {index}")]
    NonFiniteEval { tensor: usize, index: usize },

    #[error("training diverged at step {step} (non-finite loss); last good checkpoint preserved")]
    Diverged {
        step: usize,
        last_good: Box<crate::checkpoint::Checkpoint>,
    },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("corpus `{id}` has split {actual:?}, expected {expected:?}")]
    WrongSplit {
        id: String,
        expected: crate::corpus::Split,
        actual: crate::corpus::Split,
    },

    #[error("checkpoint format error: {reason}")]
    CheckpointFormat { reason: String },

    #[error("checkpoint checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },

    #[error("missing tensor `{name}`")]
    MissingTensor { name: String },

    #[error("unexpected tensor `{name}` for this config")]
    UnexpectedTensor { name: String },

    #[error("freeze mask does not cover checkpoint tensors: {reason}")]
    MaskMismatch { reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn caret(pos: usize) -> String {
    let mut s = " ".repeat(pos);
    s.push('^');
    s
}
