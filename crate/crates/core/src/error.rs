use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = BlmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BlmError {
    #[error("blank index {index} out of range for a canvas with {blanks} blank(s)")]
    BlankOutOfRange { index: usize, blanks: usize },

    #[error("left length {left} is not below the blank length {len}")]
    LeftLengthOutOfRange { left: usize, len: usize },

    #[error("action does not match the blank kind: {0}")]
    ActionKindMismatch(&'static str),

    #[error("invalid generation order: {0}")]
    InvalidOrder(String),

    #[error("prefix of length {prefix} leaves no action for a sentence of length {len}")]
    NoActionsLeft { prefix: usize, len: usize },

    #[error("cannot enumerate {n}! orders (limit is {limit})")]
    TooManyOrders { n: usize, limit: usize },

    #[error("empty sentence")]
    EmptySentence,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("canvas has no blanks")]
    CompleteCanvas,

    #[error("empty canvas")]
    EmptyCanvas,

    #[error("token id {id} is outside the vocabulary of size {size}")]
    UnknownId { id: u32, size: usize },

    #[error("blank length {len} exceeds the maximum annotated length {max}")]
    LengthTooLarge { len: usize, max: usize },

    #[error("malformed template: {0}")]
    MalformedTemplate(String),

    #[error("{path}:{line}: {message}")]
    AtLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("mode mismatch: checkpoint is {found}, task needs {expected}")]
    ModeMismatch { expected: String, found: String },

    #[error("invalid mask specification: {0}")]
    InvalidMask(String),

    #[error("cannot place {slots} slot(s) in a document of {len} character(s)")]
    SlotPlacement { slots: usize, len: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty candidate list")]
    NoCandidates,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownConfigKey(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch")]
    Checksum,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
