use alloc::string::String;
use alloc::vec::Vec;

use crate::model::WeightSite;

/// Errors produced by the engine, model and compression routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("empty loss: every position is ignored")]
    EmptyLoss,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("rank {rank} out of range for a {rows}x{cols} matrix")]
    RankOutOfRange { rank: usize, rows: usize, cols: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sequence too short: need at least {min} tokens, got {len}")]
    SequenceTooShort { len: usize, min: usize },
    #[error("unknown weight site {0}")]
    UnknownSite(WeightSite),
    #[error("dangling anchor {anchor} for target {target}")]
    DanglingAnchor { target: WeightSite, anchor: WeightSite },
    #[error("invalid sharing plan: {0}")]
    InvalidPlan(String),
    #[error("eva initialization requires an activation sample")]
    MissingActivations,
    #[error("similarity strategy requires an importance report")]
    MissingReport,
    #[error("requested {requested} delta sites but only {available} are eligible")]
    TooManySites { requested: usize, available: usize },
    #[error("empty corpus sample")]
    EmptySample,
    #[error("replacement mask covers {got} sites, expected {expected}")]
    MaskMismatch { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("compressed count {compressed} exceeds original {original}")]
    CompressedLarger { original: u64, compressed: u64 },
    #[error("non-finite loss at step {step} (lr {lr:e})")]
    NanLoss { step: usize, lr: f64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
