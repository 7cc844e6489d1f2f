//! Toy vision-language model, synthetic multi-task data and the task-bias
//! experiments run on top of them.

pub mod attention;
pub mod backbone;
pub mod classifier;
pub mod pretrain;
pub mod probe;
pub mod prompt;
pub mod synth;

use std::path::{Path, PathBuf};

use synth::TaskId;
pub use taskbias_tensor as tensor;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed input: {0}")]
    Format(String),
    #[error("vocabulary for task {0} is empty")]
    EmptyVocabulary(TaskId),
    #[error("invalid caption policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid task pair ({0}, {1})")]
    InvalidPair(TaskId, TaskId),
    #[error("need at least {need} examples, got {got}")]
    TooFewExamples { need: usize, got: usize },
    #[error("unknown example id {0}")]
    UnknownExample(u64),
    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint does not start with the expected magic bytes")]
    BadMagic,
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint is missing tensor `{name}`")]
    MissingTensor { name: String },
    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint holds a {got}, expected a {expected}")]
    WrongKind {
        expected: &'static str,
        got: String,
    },
    #[error("prompt was tuned against backbone {expected}, found {got}")]
    BackboneMismatch { expected: String, got: String },
    #[error("unsupported character {0:?}")]
    BadCharacter(char),
    #[error("backbone weights are frozen")]
    Frozen,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
}

impl CoreError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// Whether this error stems from arithmetic blowing up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CoreError::Numerical(_) | CoreError::Tensor(tensor::TensorError::NonFinite { .. })
        )
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
