//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]; variants are specific enough
//! that callers (and tests) can match on the failure class rather than
//! string-compare messages.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes incompatible for the requested op.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Elementwise domain violation (log of non-positive, division by zero,
    /// non-finite op output).
    #[error("domain error: {0}")]
    Domain(String),

    /// A row with (near-)zero L2 norm cannot be normalized.
    #[error("zero-norm row {row}: cannot normalize")]
    ZeroRow { row: usize },

    /// Projection head mapped an embedding to a degenerate (zero) vector.
    #[error("degenerate projection: {0}")]
    DegenerateProjection(String),

    /// Autodiff graph contract violated (non-scalar loss, double backward).
    #[error("graph contract: {0}")]
    Contract(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Prompt bank used in the wrong mode.
    #[error("prompt mode error: {0}")]
    Mode(String),

    /// Too few samples for an estimator.
    #[error("sample-size error: {0}")]
    SampleSize(String),

    /// Class-conditioned HSIC has no class with at least two samples.
    #[error("estimator undefined: {0}")]
    EstimatorUndefined(String),

    /// Classification task with fewer than two classes.
    #[error("degenerate task: {0}")]
    DegenerateTask(String),

    /// Generated splits would leave a (class, attribute) group empty.
    #[error("group coverage: {0}")]
    GroupCoverage(String),

    /// Unknown key in a config file or `--set` override.
    #[error("unknown config key `{key}` (nearest valid key: `{nearest}`)")]
    UnknownKey { key: String, nearest: String },

    /// Training loss became non-finite.
    #[error("diverged run: non-finite loss at step {step}")]
    Diverged { step: usize },

    /// Checkpoint header carries an unsupported version.
    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    /// Checkpoint file ends before the manifest says it should.
    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    /// Checkpoint magic or manifest failed to parse.
    #[error("checkpoint parse: {0}")]
    CheckpointParse(String),

    /// Checkpoint tensor shape disagrees with the model being loaded.
    #[error("checkpoint shape mismatch: {0}")]
    CheckpointShape(String),

    /// Dataset file magic/manifest/extent problems.
    #[error("dataset file: {0}")]
    DatasetFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for diverged runs, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged { .. } => 2,
            _ => 1,
        }
    }
}
