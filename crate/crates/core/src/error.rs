use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class. The numeric value doubles as the CLI exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage = 1,
    Format = 2,
    Invariant = 3,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} got {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {0:?}: dimensions must be >= 1 and the shape non-empty")]
    InvalidShape(Vec<usize>),

    #[error("element count {actual} does not match shape {shape:?}")]
    ElementCount { shape: Vec<usize>, actual: usize },

    #[error("non-finite value at element {index} while encoding or decoding {dtype}")]
    NonFinite { dtype: &'static str, index: usize },

    #[error("cosine similarity undefined for a zero-norm vector")]
    ZeroNorm,

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),

    #[error("bad data offsets for tensor {name:?}: {reason}")]
    BadOffsets { name: String, reason: String },

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("unrecognized adapter key {0:?}")]
    UnrecognizedKey(String),

    #[error("invalid block {0:?}")]
    InvalidBlock(String),

    #[error("invalid LoRA pair: {0}")]
    InvalidPair(String),

    #[error("orphan LoRA factor: {stem:?} has {present} but no {missing}")]
    OrphanFactor {
        stem: String,
        present: &'static str,
        missing: &'static str,
    },

    #[error("rank disagreement for {stem:?}: up has rank {up}, down has rank {down}")]
    RankMismatch { stem: String, up: usize, down: usize },

    #[error("adapter has no stems in block {0}")]
    EmptyBlock(String),

    #[error("overlapping stems between adapters: {0}")]
    Overlap(String),

    #[error("stem {0:?} has no matching base weight")]
    MissingBase(String),

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("missing label {0:?}")]
    MissingLabel(String),

    #[error("ragged embedding dimensions: {label:?} has {got}, expected {expected}")]
    RaggedDimensions { label: String, got: usize, expected: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            InvalidArgument(_) | InvalidBlock(_) => ErrorKind::Usage,
            Truncated(_)
            | MalformedHeader(_)
            | UnknownDtype(_)
            | BadOffsets { .. }
            | DuplicateName(_)
            | UnrecognizedKey(_)
            | OrphanFactor { .. }
            | MissingLabel(_)
            | RaggedDimensions { .. }
            | Io { .. } => ErrorKind::Format,
            ShapeMismatch { .. }
            | InvalidShape(_)
            | ElementCount { .. }
            | NonFinite { .. }
            | ZeroNorm
            | InvalidPair(_)
            | RankMismatch { .. }
            | EmptyBlock(_)
            | Overlap(_)
            | MissingBase(_)
            | NonFiniteLoss { .. } => ErrorKind::Invariant,
        }
    }

    /// Short stable tag used in machine-parsable CLI output.
    pub fn code(&self) -> &'static str {
        use Error::*;
        match self {
            ShapeMismatch { .. } => "shape-mismatch",
            InvalidShape(_) => "invalid-shape",
            ElementCount { .. } => "element-count",
            NonFinite { .. } => "non-finite",
            ZeroNorm => "zero-norm",
            Truncated(_) => "truncated",
            MalformedHeader(_) => "malformed-header",
            UnknownDtype(_) => "unknown-dtype",
            BadOffsets { .. } => "bad-offsets",
            DuplicateName(_) => "duplicate-name",
            UnrecognizedKey(_) => "unrecognized-key",
            InvalidBlock(_) => "invalid-block",
            InvalidPair(_) => "invalid-pair",
            OrphanFactor { .. } => "orphan-factor",
            RankMismatch { .. } => "rank-mismatch",
            EmptyBlock(_) => "empty-block",
            Overlap(_) => "overlap",
            MissingBase(_) => "missing-base",
            NonFiniteLoss { .. } => "non-finite-loss",
            MissingLabel(_) => "missing-label",
            RaggedDimensions { .. } => "ragged-dimensions",
            InvalidArgument(_) => "invalid-argument",
            Io { .. } => "io",
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
